use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// A named model tensor. Trainable parameters receive gradients; the rest
/// (batch-norm running statistics) are state that is only checkpointed.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    key: u64,
    pub value: Tensor,
    trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self::build(name.into(), value, true)
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Self::build(name.into(), value, false)
    }

    fn build(name: String, mut value: Tensor, trainable: bool) -> Self {
        value.set_requires_grad(trainable);
        Self {
            name,
            key: NEXT_KEY.fetch_add(1, Ordering::Relaxed),
            value,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Anything that owns parameters, visited in declaration order.
pub trait Module {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.numel()
            }
        });
        n
    }

    /// Copy gradients from the last backward pass on `tape` into each
    /// trainable parameter. Parameters the tape never saw get `None`.
    fn collect_grads(&mut self, tape: &Tape) {
        self.visit_mut(&mut |p| {
            let g = if p.trainable() {
                tape.param_grad(p.key())
            } else {
                None
            };
            p.value
                .set_grad(g)
                .expect("gradient length matches parameter");
        });
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.value.zero_grad());
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        if let Some(m) = self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(m) = self {
            m.visit_mut(f);
        }
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for m in self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

/// Initialization stream for one named tensor. Depending only on
/// `(seed, name)` lets model variants that share a layer share its weights.
pub fn init_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}
