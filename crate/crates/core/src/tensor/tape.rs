use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward closure: receives the output gradient and, per parent, whether
/// that parent wants a gradient. Returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<usize>,
    numel: usize,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    no_grad: bool,
    /// Every leaf created for a parameter key; a layer applied twice on one
    /// tape contributes one leaf per application.
    params: HashMap<u64, Vec<usize>>,
    grads: Vec<Option<Rc<Vec<f64>>>>,
}

/// Ordered record of executed primitives. Cloning yields another handle to
/// the same record.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
    shape: Rc<[usize]>,
    data: Rc<Vec<f64>>,
    requires_grad: bool,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Rc<Vec<f64>>>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<Tensor> {
        let g = self.grads.get(var.id)?.as_ref()?;
        Some(Tensor::new(&var.shape, g.as_ref().clone()).expect("grad shape"))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        let tape = Self::default();
        tape.inner.borrow_mut().no_grad = true;
        tape
    }

    pub fn is_no_grad(&self) -> bool {
        self.inner.borrow().no_grad
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.params.clear();
        inner.grads.clear();
    }

    /// Leaf carrying the tensor's value; differentiable iff the tensor has
    /// `requires_grad` set.
    pub fn var(&self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    /// Differentiable leaf.
    pub fn leaf_grad(&self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.leaf(vec![], vec![value], false)
    }

    /// Leaf for a trainable parameter identified by `key`; after
    /// [`Tape::backward`] its gradient is available via [`Tape::param_grad`].
    pub(crate) fn param_leaf(&self, key: u64, t: &Tensor, trainable: bool) -> Var {
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), trainable);
        self.inner
            .borrow_mut()
            .params
            .entry(key)
            .or_default()
            .push(v.id);
        v
    }

    pub(crate) fn param_grad(&self, key: u64) -> Option<Vec<f64>> {
        let inner = self.inner.borrow();
        let mut total: Option<Vec<f64>> = None;
        for &id in inner.params.get(&key)? {
            let Some(g) = inner.grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            match &mut total {
                Some(t) => t.iter_mut().zip(g.iter()).for_each(|(a, b)| *a += b),
                None => total = Some(g.as_ref().clone()),
            }
        }
        total
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && !inner.no_grad;
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: vec![],
            numel: data.len(),
            requires_grad,
            backward: None,
        });
        drop(inner);
        Var {
            tape: self.clone(),
            id,
            shape: shape.into(),
            data: Rc::new(data),
            requires_grad,
        }
    }

    /// Record a primitive whose output is `(shape, data)` computed from
    /// `parents`. The closure is kept only if some parent needs a gradient.
    pub(crate) fn push<F>(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: &[&Var],
        backward: F,
    ) -> Var
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        for p in parents {
            assert!(
                Rc::ptr_eq(&p.tape.inner, &self.inner),
                "operands recorded on different tapes"
            );
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad = !inner.no_grad && parents.iter().any(|p| p.requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            numel: data.len(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        drop(inner);
        Var {
            tape: self.clone(),
            id,
            shape: shape.into(),
            data: Rc::new(data),
            requires_grad,
        }
    }

    /// Reverse replay from a scalar `loss`. Gradients accumulate additively
    /// over fan-out; any previous gradients on this tape are replaced.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        if loss.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node
                    .parents
                    .iter()
                    .map(|&p| inner.nodes[p].requires_grad)
                    .collect();
                let parent_grads = bw(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), inner.nodes[p].numel);
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        // Keep gradients only for nodes that asked for them.
        let kept: Vec<Option<Rc<Vec<f64>>>> = grads
            .into_iter()
            .zip(&inner.nodes)
            .map(|(g, n)| {
                if n.requires_grad {
                    g.map(Rc::new)
                } else {
                    None
                }
            })
            .collect();
        inner.grads = kept.clone();
        Ok(Gradients { grads: kept })
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        self.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Copy of the current value as a plain tensor.
    pub fn value(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.as_ref().clone()).expect("var shape")
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Gradient from the most recent backward pass on this tape, if any.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let g = inner.grads.get(self.id)?.as_ref()?;
        Some(Tensor::new(&self.shape, g.as_ref().clone()).expect("grad shape"))
    }
}
