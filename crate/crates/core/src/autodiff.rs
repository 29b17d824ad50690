//! Scalar computation graph with reverse-mode differentiation.
//!
//! Nodes are recorded eagerly on an append-only [`Tape`], so tape order is a
//! topological order (parents always precede children). Gradients come in two
//! flavors:
//!
//! * [`Tape::grad`] sweeps plain `f64` adjoints — fast, detached.
//! * [`Tape::grad_vars`] records the adjoint computation itself as new graph
//!   nodes, so the resulting gradient is differentiable again. That is what
//!   makes an exact meta-gradient through an inner update step possible:
//!   build the inner loss, take a tracked gradient step, build the outer
//!   loss on the adapted parameters, then run a plain `grad` back to the
//!   original leaves.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Probabilities inside loss graphs are clamped to `[CLAMP, 1 - CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    /// A leaf reachable from the evaluation root was not given a value.
    #[error("leaf node {0} has no binding")]
    UnboundLeaf(usize),
    /// Exact meta-gradient requested, but the inner step was detached.
    #[error("exact meta-gradient requires a tracked inner step; this one was detached")]
    DetachedInnerStep,
}

type NodeId = u32;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// a*b + c, the workhorse of dot products.
    MulAdd(NodeId, NodeId, NodeId),
    Neg(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Clamp to `[PROB_CLAMP, 1 - PROB_CLAMP]`; derivative 1 inside, 0 outside.
    ClampProb(NodeId),
}

impl Op {
    fn parents(self) -> ([NodeId; 3], usize) {
        match self {
            Op::Leaf | Op::Const => ([0; 3], 0),
            Op::Neg(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::ClampProb(a) => ([a, 0, 0], 1),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => ([a, b, 0], 2),
            Op::MulAdd(a, b, c) => ([a, b, c], 3),
        }
    }
}

struct Node {
    op: Op,
    value: f64,
}

/// Handle to one node on a [`Tape`]. Cheap to copy; arithmetic operators and
/// the nonlinearity methods append new nodes.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

/// Position marker for truncating the tape back to an earlier length.
#[derive(Clone, Copy, Debug)]
pub struct TapeMark(usize);

/// Append-only storage for one computation graph.
///
/// One tape per client per round; tapes are single-threaded and independent.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
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

    /// A differentiable input. `grad` reports derivatives w.r.t. leaves.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    /// One leaf per element, in order.
    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// A non-differentiable input (derivatives w.r.t. it are never requested).
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, value)
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.len())
    }

    /// Drop every node recorded after `mark`. Handles created after the mark
    /// must not be used afterwards.
    pub fn truncate(&self, mark: TapeMark) {
        self.nodes.borrow_mut().truncate(mark.0);
    }

    fn push(&self, op: Op, value: f64) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = NodeId::try_from(nodes.len()).expect("tape overflow");
        nodes.push(Node { op, value });
        Var { tape: self, id }
    }

    fn val(&self, id: NodeId) -> f64 {
        self.nodes.borrow()[id as usize].value
    }

    /// d(root)/d(wrt[i]) for every requested node, as plain values.
    ///
    /// Nodes the root does not depend on get gradient 0. Accumulation order
    /// is fixed by tape order, so results are bit-reproducible.
    pub fn grad(&self, root: Var<'_>, wrt: &[Var<'_>]) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let last = root.id as usize;
        let mut adj = vec![0.0f64; last + 1];
        adj[last] = 1.0;
        for i in (0..=last).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            match nodes[i].op {
                Op::Leaf | Op::Const => {}
                Op::Add(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] += a;
                }
                Op::Sub(x, y) => {
                    adj[x as usize] += a;
                    adj[y as usize] -= a;
                }
                Op::Mul(x, y) => {
                    adj[x as usize] += a * nodes[y as usize].value;
                    adj[y as usize] += a * nodes[x as usize].value;
                }
                Op::Div(x, y) => {
                    let vy = nodes[y as usize].value;
                    adj[x as usize] += a / vy;
                    adj[y as usize] -= a * nodes[i].value / vy;
                }
                Op::MulAdd(x, y, c) => {
                    adj[x as usize] += a * nodes[y as usize].value;
                    adj[y as usize] += a * nodes[x as usize].value;
                    adj[c as usize] += a;
                }
                Op::Neg(x) => adj[x as usize] -= a,
                Op::Log(x) => adj[x as usize] += a / nodes[x as usize].value,
                Op::Sigmoid(x) => {
                    let s = nodes[i].value;
                    adj[x as usize] += a * s * (1.0 - s);
                }
                Op::Tanh(x) => {
                    let t = nodes[i].value;
                    adj[x as usize] += a * (1.0 - t * t);
                }
                Op::Relu(x) => {
                    if nodes[x as usize].value > 0.0 {
                        adj[x as usize] += a;
                    }
                }
                Op::ClampProb(x) => {
                    let v = nodes[x as usize].value;
                    if v > PROB_CLAMP && v < 1.0 - PROB_CLAMP {
                        adj[x as usize] += a;
                    }
                }
            }
        }
        wrt.iter()
            .map(|v| adj.get(v.id as usize).copied().unwrap_or(0.0))
            .collect()
    }

    /// Like [`Tape::grad`], but the adjoints are recorded as graph nodes, so
    /// each returned gradient is itself differentiable.
    pub fn grad_vars<'t>(&'t self, root: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let last = root.id as usize;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; last + 1];
        adj[last] = Some(self.constant(1.0));

        fn acc<'t>(slot: &mut Option<Var<'t>>, contribution: Var<'t>) {
            *slot = Some(match *slot {
                None => contribution,
                Some(prev) => prev + contribution,
            });
        }

        for i in (0..=last).rev() {
            let Some(u) = adj[i] else { continue };
            // Copy out before pushing: pushes re-borrow the node storage.
            let op = self.nodes.borrow()[i].op;
            let out = Var {
                tape: self,
                id: i as NodeId,
            };
            match op {
                Op::Leaf | Op::Const => {}
                Op::Add(x, y) => {
                    acc(&mut adj[x as usize], u);
                    acc(&mut adj[y as usize], u);
                }
                Op::Sub(x, y) => {
                    acc(&mut adj[x as usize], u);
                    acc(&mut adj[y as usize], -u);
                }
                Op::Mul(x, y) => {
                    let vx = Var { tape: self, id: x };
                    let vy = Var { tape: self, id: y };
                    acc(&mut adj[x as usize], u * vy);
                    acc(&mut adj[y as usize], u * vx);
                }
                Op::Div(x, y) => {
                    let vy = Var { tape: self, id: y };
                    acc(&mut adj[x as usize], u / vy);
                    // d/dy (x/y) = -(x/y)/y
                    acc(&mut adj[y as usize], -(u * out / vy));
                }
                Op::MulAdd(x, y, c) => {
                    let vx = Var { tape: self, id: x };
                    let vy = Var { tape: self, id: y };
                    acc(&mut adj[x as usize], u * vy);
                    acc(&mut adj[y as usize], u * vx);
                    acc(&mut adj[c as usize], u);
                }
                Op::Neg(x) => acc(&mut adj[x as usize], -u),
                Op::Log(x) => {
                    let vx = Var { tape: self, id: x };
                    acc(&mut adj[x as usize], u / vx);
                }
                Op::Sigmoid(x) => {
                    // s' = s - s^2
                    let gate = out - out * out;
                    acc(&mut adj[x as usize], u * gate);
                }
                Op::Tanh(x) => {
                    acc(&mut adj[x as usize], u - u * out * out);
                }
                Op::Relu(x) => {
                    // Derivative is a 0/1 constant of the forward values.
                    if self.val(x) > 0.0 {
                        acc(&mut adj[x as usize], u);
                    }
                }
                Op::ClampProb(x) => {
                    let v = self.val(x);
                    if v > PROB_CLAMP && v < 1.0 - PROB_CLAMP {
                        acc(&mut adj[x as usize], u);
                    }
                }
            }
        }

        wrt.iter()
            .map(|v| match adj.get(v.id as usize).copied().flatten() {
                Some(g) => g,
                None => self.constant(0.0),
            })
            .collect()
    }

    /// Replay the subgraph under `root` with leaves rebound to new values.
    ///
    /// Does not modify stored node values. Every leaf reachable from `root`
    /// must appear in `bindings`, otherwise [`AutodiffError::UnboundLeaf`].
    pub fn eval_with(
        &self,
        root: Var<'_>,
        bindings: &[(Var<'_>, f64)],
    ) -> Result<f64, AutodiffError> {
        let nodes = self.nodes.borrow();
        let last = root.id as usize;

        let mut bound: Vec<Option<f64>> = vec![None; last + 1];
        for (var, value) in bindings {
            if (var.id as usize) <= last {
                bound[var.id as usize] = Some(*value);
            }
        }

        // Reachability sweep so unrelated leaves need no binding.
        let mut reachable = vec![false; last + 1];
        let mut stack = vec![root.id];
        while let Some(id) = stack.pop() {
            let idx = id as usize;
            if reachable[idx] {
                continue;
            }
            reachable[idx] = true;
            let (parents, n) = nodes[idx].op.parents();
            stack.extend_from_slice(&parents[..n]);
        }

        let mut values = vec![0.0f64; last + 1];
        for i in 0..=last {
            if !reachable[i] {
                continue;
            }
            values[i] = match nodes[i].op {
                Op::Leaf => bound[i].ok_or(AutodiffError::UnboundLeaf(i))?,
                Op::Const => nodes[i].value,
                Op::Add(x, y) => values[x as usize] + values[y as usize],
                Op::Sub(x, y) => values[x as usize] - values[y as usize],
                Op::Mul(x, y) => values[x as usize] * values[y as usize],
                Op::Div(x, y) => values[x as usize] / values[y as usize],
                Op::MulAdd(x, y, c) => {
                    values[x as usize] * values[y as usize] + values[c as usize]
                }
                Op::Neg(x) => -values[x as usize],
                Op::Log(x) => values[x as usize].ln(),
                Op::Sigmoid(x) => sigmoid(values[x as usize]),
                Op::Tanh(x) => values[x as usize].tanh(),
                Op::Relu(x) => values[x as usize].max(0.0),
                Op::ClampProb(x) => clamp_prob(values[x as usize]),
            };
        }
        Ok(values[last])
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.tape.val(self.id)
    }

    /// `self * b + c` as a single node.
    pub fn mul_add(self, b: Var<'t>, c: Var<'t>) -> Var<'t> {
        debug_assert!(same_tape(self, b) && same_tape(self, c));
        let v = self.value().mul_add(b.value(), c.value());
        self.tape.push(Op::MulAdd(self.id, b.id, c.id), v)
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().ln();
        self.tape.push(Op::Log(self.id), v)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = sigmoid(self.value());
        self.tape.push(Op::Sigmoid(self.id), v)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().tanh();
        self.tape.push(Op::Tanh(self.id), v)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().max(0.0);
        self.tape.push(Op::Relu(self.id), v)
    }

    pub fn clamp_prob(self) -> Var<'t> {
        let v = clamp_prob(self.value());
        self.tape.push(Op::ClampProb(self.id), v)
    }
}

fn same_tape(a: Var<'_>, b: Var<'_>) -> bool {
    std::ptr::eq(a.tape, b.tape)
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} = {})", self.id, self.value())
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $op:ident, $apply:expr) => {
        impl<'t> $trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                debug_assert!(same_tape(self, rhs), "vars from different tapes");
                let apply: fn(f64, f64) -> f64 = $apply;
                let v = apply(self.value(), rhs.value());
                self.tape.push(Op::$op(self.id, rhs.id), v)
            }
        }
    };
}

binary_op!(Add, add, Add, |a, b| a + b);
binary_op!(Sub, sub, Sub, |a, b| a - b);
binary_op!(Mul, mul, Mul, |a, b| a * b);
binary_op!(Div, div, Div, |a, b| a / b);

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        let v = -self.value();
        self.tape.push(Op::Neg(self.id), v)
    }
}

/// Parameters after an inner gradient step, plus whether the step was
/// recorded on the tape (tracked) or taken with detached gradient values.
pub struct AdaptedParams<'t> {
    pub vars: Vec<Var<'t>>,
    tracked: bool,
}

impl AdaptedParams<'_> {
    pub fn values(&self) -> Vec<f64> {
        self.vars.iter().map(|v| v.value()).collect()
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }
}

/// `params - rate * d(loss)/d(params)`, recorded on the tape so the result
/// stays differentiable w.r.t. the original parameters.
pub fn gradient_step_tracked<'t>(
    tape: &'t Tape,
    loss: Var<'t>,
    params: &[Var<'t>],
    rate: f64,
) -> AdaptedParams<'t> {
    let grads = tape.grad_vars(loss, params);
    let rate = tape.constant(rate);
    let vars = params
        .iter()
        .zip(grads)
        .map(|(&p, g)| p - rate * g)
        .collect();
    AdaptedParams {
        vars,
        tracked: true,
    }
}

/// Same update with the gradient treated as a constant (detached).
pub fn gradient_step_detached<'t>(
    tape: &'t Tape,
    loss: Var<'t>,
    params: &[Var<'t>],
    rate: f64,
) -> AdaptedParams<'t> {
    let grads = tape.grad(loss, params);
    let vars = params
        .iter()
        .zip(grads)
        .map(|(&p, g)| p - tape.constant(rate * g))
        .collect();
    AdaptedParams {
        vars,
        tracked: false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaMode {
    /// Differentiate through the inner gradient step (second order).
    Exact,
    /// Treat the inner gradient as a constant.
    FirstOrder,
}

/// Gradient of an outer loss that was built on [`AdaptedParams`].
///
/// In [`MetaMode::Exact`] the derivative is taken w.r.t. `outer_leaves`
/// (the pre-adaptation parameters) and flows through the inner step, which
/// must therefore have been tracked. In [`MetaMode::FirstOrder`] it is taken
/// w.r.t. the adapted parameters themselves.
pub fn meta_gradient<'t>(
    tape: &'t Tape,
    outer_loss: Var<'t>,
    outer_leaves: &[Var<'t>],
    adapted: &AdaptedParams<'t>,
    mode: MetaMode,
) -> Result<Vec<f64>, AutodiffError> {
    match mode {
        MetaMode::Exact => {
            if !adapted.tracked {
                return Err(AutodiffError::DetachedInnerStep);
            }
            Ok(tape.grad(outer_loss, outer_leaves))
        }
        MetaMode::FirstOrder => Ok(tape.grad(outer_loss, &adapted.vars)),
    }
}
