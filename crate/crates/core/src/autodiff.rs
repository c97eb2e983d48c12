//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! Every operation appends a node to a [`Tape`]; a [`Var`] is a cheap handle
//! to one of those nodes. [`Tape::backward`] walks the tape in decreasing
//! construction order. With `create_graph` set, the adjoint computations are
//! themselves recorded as differentiable nodes, so a second `backward`
//! through a gradient yields exact second derivatives. This is what makes the
//! meta-gradient through an inner gradient step exact.
//!
//! Backward rules are written once, in terms of `Var` operations. In
//! first-order mode the rule sees detached copies of its inputs, so the same
//! code produces plain constant adjoints.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParameterSet};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Operation kinds a node can be built from. Attributes ride along in the
/// variant.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Relu,
    Exp,
    Log,
    Sqrt,
    Abs,
    Square,
    Sum,
    Mean,
    SumAxis(usize),
    MaxOverAxis(usize),
    LogSoftmax,
    /// Concatenation along the leading axis.
    Concat,
    SliceRows { start: usize, end: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::MaxOverAxis(_) => "max_over_axis",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::SliceRows { .. } => "slice_rows",
        }
    }
}

struct Node {
    value: Tensor,
    /// `None` for leaves and constants.
    op: Option<OpKind>,
    parents: Vec<NodeId>,
    requires_grad: bool,
}

/// Computation graph for one differentiation scope (typically one episode
/// within one training step). Dropping the tape frees every node.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Option<OpKind>, parents: Vec<NodeId>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, Vec::new(), true)
    }

    /// A leaf that never receives an adjoint.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, None, Vec::new(), false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Constant copy of `v`, cutting it out of the graph.
    pub fn detach<'t>(&'t self, v: Var<'t>) -> Var<'t> {
        self.constant(v.value())
    }

    fn value_of(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Builds a node applying `op` to `inputs`, validating shapes and domain.
    pub fn build<'t>(&'t self, op: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let name = op.name();
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::shape(name, "input belongs to a different tape"));
            }
        }
        let arity_ok = match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => inputs.len() == 2,
            OpKind::Concat => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::shape(name, format!("wrong number of inputs ({})", inputs.len())));
        }
        let vals: Vec<Tensor> = inputs.iter().map(|v| v.value()).collect();
        let a = &vals[0];
        let value = match &op {
            OpKind::Add => a.zip_map(&vals[1], |x, y| x + y),
            OpKind::Sub => a.zip_map(&vals[1], |x, y| x - y),
            OpKind::Mul => a.zip_map(&vals[1], |x, y| x * y),
            OpKind::Div => a.zip_map(&vals[1], |x, y| x / y),
            OpKind::Neg => Ok(a.map(|x| -x)),
            OpKind::Scale(c) => {
                let c = *c;
                Ok(a.map(|x| x * c))
            }
            OpKind::MatMul => a.matmul(&vals[1]),
            OpKind::Transpose => a.transpose(),
            OpKind::Reshape(shape) => a.reshape(shape),
            OpKind::Relu => Ok(a.map(|x| if x > 0.0 { x } else { 0.0 })),
            OpKind::Exp => Ok(a.map(f64::exp)),
            OpKind::Log => {
                if let Some(bad) = a.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::domain("log", format!("non-positive input {bad}")));
                }
                Ok(a.map(f64::ln))
            }
            OpKind::Sqrt => {
                if let Some(bad) = a.data().iter().find(|&&x| x < 0.0) {
                    return Err(Error::domain("sqrt", format!("negative input {bad}")));
                }
                Ok(a.map(f64::sqrt))
            }
            OpKind::Abs => Ok(a.map(f64::abs)),
            OpKind::Square => Ok(a.map(|x| x * x)),
            OpKind::Sum => Ok(Tensor::scalar(a.sum())),
            OpKind::Mean => {
                if a.numel() == 0 {
                    return Err(Error::shape("mean", "empty input"));
                }
                Ok(Tensor::scalar(a.sum() / a.numel() as f64))
            }
            OpKind::SumAxis(axis) => a.sum_axis(*axis),
            OpKind::MaxOverAxis(axis) => a.max_axis(*axis),
            OpKind::LogSoftmax => a.log_softmax(),
            OpKind::Concat => Tensor::concat(&vals),
            OpKind::SliceRows { start, end } => a.slice_rows(*start, *end),
        }?;
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            Ok(self.push(value, Some(op), inputs.iter().map(|v| v.id).collect(), true))
        } else {
            // Constant folding: nothing upstream can receive an adjoint.
            Ok(self.push(value, None, Vec::new(), false))
        }
    }

    /// Reverse pass from a scalar `root`.
    ///
    /// Returns an adjoint for every `requires_grad` node that `root` depends
    /// on, leaves and intermediates alike. With `create_graph` the adjoints
    /// are differentiable functions of the inputs.
    pub fn backward<'t>(&'t self, root: Var<'t>, create_graph: bool) -> Result<GradientMap<'t>> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::shape("backward", "root belongs to a different tape"));
        }
        let root_value = root.value();
        if !root_value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got shape {:?}", root_value.shape()),
            ));
        }
        let mut adjoints: BTreeMap<NodeId, Var<'t>> = BTreeMap::new();
        if !root.requires_grad() {
            return Ok(GradientMap { adjoints });
        }
        let mut pending: Vec<Option<Var<'t>>> = vec![None; root.id + 1];
        pending[root.id] = Some(self.scalar(1.0));

        for id in (0..=root.id).rev() {
            let Some(g) = pending[id] else { continue };
            let (op, parents) = {
                let nodes = self.nodes.borrow();
                let n = &nodes[id];
                if !n.requires_grad {
                    continue;
                }
                (n.op.clone(), n.parents.clone())
            };
            adjoints.insert(id, g);
            let Some(op) = op else { continue };
            let needs: Vec<bool> = parents.iter().map(|&p| self.requires_grad_of(p)).collect();
            let contributions = self.vjp(&op, id, &parents, &needs, g, create_graph)?;
            for ((&p, c), need) in parents.iter().zip(contributions).zip(needs) {
                if !need {
                    continue;
                }
                let c = c.expect("backward rule produced no adjoint for a differentiable input");
                pending[p] = Some(match pending[p] {
                    None => c,
                    Some(acc) => acc.add(c)?,
                });
            }
        }
        Ok(GradientMap { adjoints })
    }

    fn vjp<'t>(
        &'t self,
        op: &OpKind,
        id: NodeId,
        parents: &[NodeId],
        needs: &[bool],
        g: Var<'t>,
        create_graph: bool,
    ) -> Result<Vec<Option<Var<'t>>>> {
        // In first-order mode rules see detached inputs, so nothing they build
        // is recorded as differentiable.
        let input = |k: usize| -> Var<'t> {
            let v = Var { tape: self, id: parents[k] };
            if create_graph { v } else { self.detach(v) }
        };
        let output = || -> Var<'t> {
            let v = Var { tape: self, id };
            if create_graph { v } else { self.detach(v) }
        };
        let g = if create_graph { g } else { self.detach(g) };
        let need = |k: usize| needs.get(k).copied().unwrap_or(false);
        let one = |r: Result<Var<'t>>| -> Result<Vec<Option<Var<'t>>>> { Ok(vec![Some(r?)]) };

        match op {
            OpKind::Add => Ok(vec![Some(g), Some(g)]),
            OpKind::Sub => Ok(vec![Some(g), if need(1) { Some(g.neg()?) } else { None }]),
            OpKind::Mul => {
                let ga = if need(0) { Some(g.mul(input(1))?) } else { None };
                let gb = if need(1) { Some(g.mul(input(0))?) } else { None };
                Ok(vec![ga, gb])
            }
            OpKind::Div => {
                let b = input(1);
                let ga = if need(0) { Some(g.div(b)?) } else { None };
                let gb = if need(1) { Some(g.mul(output())?.div(b)?.neg()?) } else { None };
                Ok(vec![ga, gb])
            }
            OpKind::Neg => one(g.neg()),
            OpKind::Scale(c) => one(g.scale(*c)),
            OpKind::MatMul => {
                let ga = if need(0) { Some(g.matmul(input(1).t()?)?) } else { None };
                let gb = if need(1) { Some(input(0).t()?.matmul(g)?) } else { None };
                Ok(vec![ga, gb])
            }
            OpKind::Transpose => one(g.t()),
            OpKind::Reshape(_) => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                one(g.reshape(&shape))
            }
            OpKind::Relu => {
                let mask = self.value_of(parents[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                one(g.mul(self.constant(mask)))
            }
            OpKind::Exp => one(g.mul(output())),
            OpKind::Log => one(g.div(input(0))),
            OpKind::Sqrt => one(g.div(output())?.scale(0.5)),
            OpKind::Abs => {
                // Subgradient 0 at exactly 0.
                let sign = self.value_of(parents[0]).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                one(g.mul(self.constant(sign)))
            }
            OpKind::Square => one(g.mul(input(0))?.scale(2.0)),
            OpKind::Sum => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                one(g.broadcast_scalar(&shape))
            }
            OpKind::Mean => {
                let x = self.value_of(parents[0]);
                let n = x.numel() as f64;
                one(g.broadcast_scalar(x.shape())?.scale(1.0 / n))
            }
            OpKind::SumAxis(axis) => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                one(g.broadcast_axis(&shape, *axis))
            }
            OpKind::MaxOverAxis(axis) => {
                let x = self.value_of(parents[0]);
                let (_, _, sl, se) = x.lanes(*axis, "max_over_axis")?;
                let mut hot = vec![0.0; x.numel()];
                for (lane, e) in x.argmax_axis(*axis)?.into_iter().enumerate() {
                    hot[lane * sl + e * se] = 1.0;
                }
                let hot = Tensor::new(x.shape().to_vec(), hot)?;
                one(g.broadcast_axis(x.shape(), *axis)?.mul(self.constant(hot)))
            }
            OpKind::LogSoftmax => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                let softmax = output().exp()?;
                let total = if shape.len() == 1 {
                    g.sum()?.broadcast_scalar(&shape)?
                } else {
                    g.sum_axis(1)?.broadcast_axis(&shape, 1)?
                };
                one(g.sub(softmax.mul(total)?))
            }
            OpKind::Concat => {
                let mut out = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for (k, &p) in parents.iter().enumerate() {
                    let rows = self.value_of(p).shape()[0];
                    out.push(if need(k) { Some(g.slice_rows(offset, offset + rows)?) } else { None });
                    offset += rows;
                }
                Ok(out)
            }
            OpKind::SliceRows { start, end } => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                let mut before = shape.clone();
                before[0] = *start;
                let mut after = shape.clone();
                after[0] = shape[0] - end;
                let parts = [
                    self.constant(Tensor::zeros(&before)),
                    g,
                    self.constant(Tensor::zeros(&after)),
                ];
                one(self.build(OpKind::Concat, &parts))
            }
        }
    }
}

// Fallible, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    fn unary(self, op: OpKind) -> Result<Var<'t>> {
        self.tape.build(op, &[self])
    }

    fn binary(self, op: OpKind, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.build(op, &[self, other])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Add, other)
    }
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Sub, other)
    }
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Mul, other)
    }
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::Div, other)
    }
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(OpKind::MatMul, other)
    }
    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(OpKind::Neg)
    }
    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(OpKind::Scale(c))
    }
    pub fn t(self) -> Result<Var<'t>> {
        self.unary(OpKind::Transpose)
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(OpKind::Reshape(shape.to_vec()))
    }
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(OpKind::Relu)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(OpKind::Exp)
    }
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(OpKind::Log)
    }
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sqrt)
    }
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(OpKind::Abs)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.unary(OpKind::Square)
    }
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(OpKind::Sum)
    }
    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(OpKind::Mean)
    }
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(OpKind::SumAxis(axis))
    }
    pub fn max_over_axis(self, axis: usize) -> Result<Var<'t>> {
        self.unary(OpKind::MaxOverAxis(axis))
    }
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.unary(OpKind::LogSoftmax)
    }
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(OpKind::SliceRows { start, end })
    }

    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        first.tape.build(OpKind::Concat, parts)
    }

    /// Expands a scalar to `shape` (a product with a constant column of ones).
    pub fn broadcast_scalar(self, shape: &[usize]) -> Result<Var<'t>> {
        let n: usize = shape.iter().product();
        let ones = self.tape.constant(Tensor::ones(&[n, 1]));
        ones.matmul(self.reshape(&[1, 1])?)?.reshape(shape)
    }

    /// Inverse of `sum_axis(axis)` for a tensor of `shape`: repeats `self`
    /// along the reduced axis.
    pub fn broadcast_axis(self, shape: &[usize], axis: usize) -> Result<Var<'t>> {
        match (shape.len(), axis) {
            (1, 0) => self.broadcast_scalar(shape),
            (2, 0) => {
                let ones = self.tape.constant(Tensor::ones(&[shape[0], 1]));
                ones.matmul(self.reshape(&[1, shape[1]])?)
            }
            (2, 1) => {
                let ones = self.tape.constant(Tensor::ones(&[1, shape[1]]));
                self.reshape(&[shape[0], 1])?.matmul(ones)
            }
            (r, a) => Err(Error::shape("broadcast_axis", format!("axis {a} on rank-{r} shape"))),
        }
    }

    /// Adds a length-`c` row vector to every row of an `r x c` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape("add_row", format!("expected a matrix, got {shape:?}")));
        }
        self.add(row.broadcast_axis(&shape, 0)?)
    }
}

/// Adjoints keyed by node. Missing entries are zero.
#[derive(Debug, Default)]
pub struct GradientMap<'t> {
    adjoints: BTreeMap<NodeId, Var<'t>>,
}

impl<'t> GradientMap<'t> {
    pub fn get(&self, v: Var<'t>) -> Option<Var<'t>> {
        self.adjoints.get(&v.id).copied()
    }

    /// Adjoint value for `v`, zeros of `v`'s shape when absent.
    pub fn tensor(&self, v: Var<'t>) -> Tensor {
        match self.adjoints.get(&v.id) {
            Some(g) => g.value(),
            None => Tensor::zeros(&v.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.adjoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjoints.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Var<'t>)> + '_ {
        self.adjoints.iter().map(|(&k, &v)| (k, v))
    }
}

/// Central-difference estimate of the gradient of `f` at `params`.
pub fn finite_difference_gradient<F>(mut f: F, params: &ParameterSet, step: f64) -> Result<ParamGrads>
where
    F: FnMut(&ParameterSet) -> Result<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::domain("finite_difference_gradient", format!("step must be > 0, got {step}")));
    }
    let base = params.flatten();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let up = f(&params.with_flat(&probe)?)?;
        probe[i] = base[i] - step;
        let down = f(&params.with_flat(&probe)?)?;
        probe[i] = base[i];
        grad[i] = (up - down) / (2.0 * step);
    }
    ParamGrads::from_flat(params, &grad)
}
