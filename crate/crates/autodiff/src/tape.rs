use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::kernels::Conv1dGeom;
use crate::{Error, Result, Tensor};

/// Deepest recorded derivative level. Level 1 is a gradient recorded with
/// `create_graph`, level 2 a gradient of such a gradient.
pub const MAX_LEVEL: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MulConst(usize, Arc<Tensor>),
    MatMul { a: usize, b: usize, batch: usize, ta: bool, tb: bool },
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: Axis },
    Slice { a: usize, axis: Axis, start: usize },
    Place { a: usize, axis: Axis, start: usize },
    GatherRows { a: usize, idx: Arc<Vec<usize>> },
    ScatterAddRows { a: usize, idx: Arc<Vec<usize>> },
    PickCols { a: usize, idx: Arc<Vec<usize>> },
    PlacePicks { a: usize, idx: Arc<Vec<usize>> },
    SumAll(usize),
    BroadcastScalar(usize),
    RowSum(usize),
    BroadcastCols(usize),
    ColSum(usize),
    BroadcastRows(usize),
    TileRows { a: usize, times: usize },
    UntileSum { a: usize, times: usize },
    SwapMid { a: usize, dims: [usize; 4] },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Pow(usize, f64),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Unfold { a: usize, geom: Conv1dGeom },
    Fold { a: usize, geom: Conv1dGeom },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MatMul { a, b, .. } => vec![*a, *b],
            Concat { parts, .. } => parts.clone(),
            Neg(a) | Scale(a, _) | AddConst(a) | MulConst(a, _) | Transpose(a) | Reshape(a)
            | SumAll(a) | BroadcastScalar(a) | RowSum(a) | BroadcastCols(a) | ColSum(a)
            | BroadcastRows(a) | Exp(a) | Log(a) | Tanh(a) | Pow(a, _) | Relu(a) | Softmax(a)
            | LogSoftmax(a) => vec![*a],
            Slice { a, .. }
            | Place { a, .. }
            | GatherRows { a, .. }
            | ScatterAddRows { a, .. }
            | PickCols { a, .. }
            | PlacePicks { a, .. }
            | TileRows { a, .. }
            | UntileSum { a, .. }
            | SwapMid { a, .. }
            | Unfold { a, .. }
            | Fold { a, .. } => vec![*a],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Arc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) level: u8,
}

struct Inner {
    nodes: Vec<Node>,
    recording: bool,
    level: u8,
}

/// Append-only record of executed operations.
///
/// Every value produced by an operation on a [`Var`] is pushed here, so the
/// tape order is a topological order of the computation. Cloning a `Tape`
/// yields another handle to the same record.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Inner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that never records inputs: every value is a constant. Used for
    /// evaluation and generation.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new(), recording, level: 0 })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.leaf_arc(Arc::new(value), true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf_arc(Arc::new(value), false)
    }

    /// Shares an existing buffer, e.g. frozen weights, without copying.
    pub fn leaf_arc(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.recording;
        let level = inner.level;
        inner.nodes.push(Node { value, op: Op::Leaf, requires_grad, level });
        Var { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut inner = self.inner.borrow_mut();
        let requires_grad =
            inner.recording && op.inputs().iter().any(|&i| inner.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        let level = inner.level;
        inner.nodes.push(Node { value: Arc::new(value), op, requires_grad, level });
        Ok(Var { tape: self.clone(), id: inner.nodes.len() - 1 })
    }

    pub(crate) fn value(&self, id: usize) -> Arc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn var(&self, id: usize) -> Var {
        Var { tape: self.clone(), id }
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// With `create_graph` the backward pass is itself recorded, so the
    /// returned gradients can be differentiated again. Targets that do not
    /// influence `loss` get a zero gradient.
    pub fn grad(&self, loss: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        if !loss.tape.same(self) || wrt.iter().any(|w| !w.tape.same(self)) {
            return Err(Error::ForeignVar);
        }
        let loss_value = self.value(loss.id);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }

        let end = loss.id + 1;
        let lo = wrt.iter().map(|w| w.id).min().unwrap_or(end).min(end);
        let (relevant, level) = {
            let inner = self.inner.borrow();
            let mut relevant = vec![false; end - lo];
            for w in wrt {
                if w.id < end && inner.nodes[w.id].requires_grad {
                    relevant[w.id - lo] = true;
                }
            }
            let mut max_level = 0u8;
            for i in lo..end {
                let node = &inner.nodes[i];
                if !relevant[i - lo]
                    && node.requires_grad
                    && node.op.inputs().iter().any(|&j| j >= lo && relevant[j - lo])
                {
                    relevant[i - lo] = true;
                }
                if relevant[i - lo] {
                    max_level = max_level.max(node.level);
                }
            }
            (relevant, max_level + 1)
        };
        if create_graph && level > MAX_LEVEL {
            return Err(Error::NestingTooDeep { max: MAX_LEVEL });
        }

        let saved = {
            let mut inner = self.inner.borrow_mut();
            let saved = (inner.recording, inner.level);
            inner.recording = create_graph && saved.0;
            inner.level = if create_graph { level } else { 0 };
            saved
        };
        let result = self.backward(loss, wrt, lo, &relevant);
        {
            let mut inner = self.inner.borrow_mut();
            inner.recording = saved.0;
            inner.level = saved.1;
        }
        result
    }

    fn backward(&self, loss: &Var, wrt: &[Var], lo: usize, relevant: &[bool]) -> Result<Vec<Var>> {
        let end = loss.id + 1;
        let mut adj: Vec<Option<Var>> = vec![None; end - lo];
        let mut captured: Vec<Option<Var>> = vec![None; wrt.len()];
        if relevant[loss.id - lo] {
            adj[loss.id - lo] = Some(self.constant(Tensor::full(self.value(loss.id).shape(), 1.0)));
        }
        for i in (lo..end).rev() {
            let Some(g) = adj[i - lo].take() else { continue };
            for (slot, w) in captured.iter_mut().zip(wrt) {
                if w.id == i {
                    *slot = Some(g.clone());
                }
            }
            let op = self.inner.borrow().nodes[i].op.clone();
            let inputs = op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|&j| j >= lo && relevant[j - lo]).collect();
            if !need.iter().any(|&n| n) {
                continue;
            }
            let contribs = crate::backward::rule(self, &op, i, &g, &need)?;
            for (j, contrib) in inputs.into_iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                let slot = &mut adj[j - lo];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&c)?,
                    None => c,
                });
            }
        }
        wrt.iter()
            .zip(captured)
            .map(|(w, g)| match g {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.value(w.id).shape()))),
            })
            .collect()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Var {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Derivative level of the operation that produced this value.
    pub fn level(&self) -> u8 {
        self.tape.inner.borrow().nodes[self.id].level
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        self.tape.leaf_arc(self.value(), false)
    }
}
