use std::cell::Cell;

use super::cost::OpCount;
use super::param::{Module, Param};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics produced by a train-mode batch-norm forward, applied to
/// the running buffers after the pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_key: u64,
    pub var_key: u64,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
}

/// Intermediate maps captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Bottleneck attention weights, one `[B, N, k]` tensor per global module.
    pub attention: Vec<Tensor>,
    /// Skip-gate coefficient maps `[B, 1, H, W]`, deepest stage first.
    pub psi: Vec<Tensor>,
    /// Bottleneck input and the tensor handed to the decoder.
    pub bottleneck_in: Option<Tensor>,
    pub bottleneck_out: Option<Tensor>,
}

/// Per-pass state threaded through every layer.
pub struct Ctx {
    pub tape: Tape,
    pub mode: Mode,
    pub(crate) stats: Vec<StatUpdate>,
    pub trace: Trace,
    ops: Cell<OpCount>,
}

impl Ctx {
    pub fn new(tape: &Tape, mode: Mode) -> Self {
        Self {
            tape: tape.clone(),
            mode,
            stats: Vec::new(),
            trace: Trace::default(),
            ops: Cell::new(OpCount::default()),
        }
    }

    /// Training pass on a fresh gradient-recording tape.
    pub fn train() -> Self {
        Self::new(&Tape::new(), Mode::Train)
    }

    /// Inference pass on a value-only tape.
    pub fn eval() -> Self {
        Self::new(&Tape::no_grad(), Mode::Eval)
    }

    pub fn param(&self, p: &Param) -> Var {
        self.tape.param_leaf(p.key(), &p.value, p.trainable())
    }

    /// Arithmetic performed by layers on this context so far.
    pub fn op_count(&self) -> OpCount {
        self.ops.get()
    }

    pub(crate) fn count(&self, ops: OpCount) {
        self.ops.set(self.ops.get() + ops);
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stats
    }

    /// Blend recorded batch statistics into the running buffers of `module`:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_stat_updates<M: Module + ?Sized>(&mut self, module: &mut M) {
        let updates = std::mem::take(&mut self.stats);
        if updates.is_empty() {
            return;
        }
        module.visit_mut(&mut |p| {
            for u in &updates {
                let batch = if p.key() == u.mean_key {
                    &u.batch_mean
                } else if p.key() == u.var_key {
                    &u.batch_var
                } else {
                    continue;
                };
                for (r, b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - u.momentum) * *r + u.momentum * b;
                }
            }
        });
    }
}
