use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use thiserror::Error;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// A differentiable operation recorded on the tape.
///
/// The forward value is computed by the constructor that records the
/// primitive; the tape only needs the vector-Jacobian product.
pub trait Primitive {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` wherever `needs[i]` is false.
    fn vjp(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecMode {
    /// Fixed reduction order in every primitive.
    pub deterministic: bool,
    /// Record the first non-finite value produced by any primitive.
    pub check_finite: bool,
}

impl ExecMode {
    pub const DETERMINISTIC: ExecMode = ExecMode {
        deterministic: true,
        check_finite: true,
    };
    pub const FAST: ExecMode = ExecMode {
        deterministic: false,
        check_finite: true,
    };
}

impl Default for ExecMode {
    fn default() -> Self {
        Self::DETERMINISTIC
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("backward root must be a scalar, got {numel} values")]
    NonScalarRoot { numel: usize },
    #[error("seed gradient has {got} values, root has {want}")]
    SeedShape { got: usize, want: usize },
    #[error("non-finite value produced by `{op}` during {pass:?} pass")]
    NonFinite { op: &'static str, pass: Pass },
}

struct Node {
    value: Tensor,
    prim: Option<Box<dyn Primitive>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode recording of one forward computation.
///
/// A tape is single-writer; build a fresh one per forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: ExecMode,
    fault: RefCell<Option<NumericsError>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_mode(ExecMode::default())
    }

    pub fn with_mode(mode: ExecMode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            mode,
            fault: RefCell::new(None),
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Names of the primitives recorded so far.
    pub fn op_names(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes.borrow().iter().filter_map(|n| n.prim.as_ref().map(|p| p.name())).collect()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            requires_grad: false,
            param: None,
        })
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Node {
            value,
            prim: None,
            inputs: Vec::new(),
            requires_grad: true,
            param: None,
        })
    }

    /// Binds a stored parameter as a trainable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(Node {
            value: store.value(id).clone(),
            prim: None,
            inputs: Vec::new(),
            requires_grad: true,
            param: Some(id),
        })
    }

    /// Records the output of a primitive applied to `inputs`.
    pub fn record<'t>(
        &'t self,
        prim: impl Primitive + 'static,
        inputs: &[Var<'t>],
        value: Tensor,
    ) -> Var<'t> {
        if self.mode.check_finite && !value.is_finite() {
            let mut fault = self.fault.borrow_mut();
            if fault.is_none() {
                *fault = Some(NumericsError::NonFinite {
                    op: prim.name(),
                    pass: Pass::Forward,
                });
            }
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value,
            prim: Some(Box::new(prim)),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            param: None,
        })
    }

    pub fn fault(&self) -> Option<NumericsError> {
        self.fault.borrow().clone()
    }

    pub(crate) fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, NumericsError> {
        let numel = root.value().numel();
        if numel != 1 {
            return Err(NumericsError::NonScalarRoot { numel });
        }
        self.backward_with_seed(root, &[1.0])
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with_seed(
        &self,
        root: Var<'_>,
        seed: &[f64],
    ) -> Result<Gradients, NumericsError> {
        if let Some(f) = self.fault() {
            return Err(f);
        }
        let nodes = self.nodes.borrow();
        let want = nodes[root.id].value.numel();
        if seed.len() != want {
            return Err(NumericsError::SeedShape {
                got: seed.len(),
                want,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(seed.to_vec());
        }
        let mut out = Gradients::default();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.prim {
                None => {
                    if let Some(pid) = node.param {
                        out.params.push((pid, g));
                    } else {
                        out.leaves.insert(id, g);
                    }
                }
                Some(prim) => {
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|&i| nodes[i].requires_grad)
                        .collect();
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &nodes[i].value).collect();
                    let gins = prim.vjp(&ins, &node.value, &g, &needs);
                    debug_assert_eq!(gins.len(), node.inputs.len());
                    for ((&input, gi), need) in node.inputs.iter().zip(gins).zip(needs) {
                        let Some(gi) = gi else { continue };
                        if !need {
                            continue;
                        }
                        if self.mode.check_finite && gi.iter().any(|v| !v.is_finite()) {
                            return Err(NumericsError::NonFinite {
                                op: prim.name(),
                                pass: Pass::Backward,
                            });
                        }
                        match &mut grads[input] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&gi) {
                                    *a += v;
                                }
                            }
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        // Parameters appear in reverse recording order; restore forward order
        // so accumulation into shared buffers happens in a fixed sequence.
        out.params.reverse();
        Ok(out)
    }
}

/// Leaf and parameter gradients from one backward pass.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient for a free leaf; `None` if nothing reached it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    /// Tape ids of every leaf that received a gradient, ascending.
    pub fn leaf_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.leaves.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty() && self.params.is_empty()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_ref(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.numel(), 1, "item() on tensor of shape {:?}", v.shape());
        v.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
