use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(pub(crate) u32);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Op {
    Leaf { bound: bool },
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    /// `max(a, b)`; ties go to `a`.
    Max(u32, u32),
    Neg(u32),
    Exp(u32),
    Log(u32),
    Tanh(u32),
    Sigmoid(u32),
    Relu(u32),
    Square(u32),
    Sqrt(u32),
    Scale(u32, f64),
    Offset(u32, f64),
    /// `1` if the input is strictly positive, else `0`. Zero derivative.
    Step(u32),
    /// `1` if `a >= b`, else `0`. Zero derivative.
    Ge(u32, u32),
    /// `sum_k x_k * y_k`; `args[start..start+len]` are the `x`, the next `len` the `y`.
    Dot { start: u32, len: u32 },
    /// `sum_k c_k * x_k` with constant coefficients stored in `coefs`.
    Weighted { start: u32, len: u32, coef: u32 },
    Sum { start: u32, len: u32 },
}

impl Op {
    /// Calls `f` with every input index of the op.
    #[inline]
    pub(crate) fn for_each_input(&self, args: &[u32], mut f: impl FnMut(u32)) {
        match *self {
            Op::Leaf { .. } | Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Max(a, b) | Op::Ge(a, b) => {
                f(a);
                f(b);
            }
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Step(a) => f(a),
            Op::Dot { start, len } => {
                for &i in &args[start as usize..(start + 2 * len) as usize] {
                    f(i);
                }
            }
            Op::Weighted { start, len, .. } | Op::Sum { start, len } => {
                for &i in &args[start as usize..(start + len) as usize] {
                    f(i);
                }
            }
        }
    }
}

/// Append-only reverse-mode tape of scalar operations.
///
/// Values are computed eagerly when a node is appended. Gradients requested
/// through [`Graph::grad`] are appended to the same tape, so they can be
/// differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) ops: Vec<Op>,
    pub(crate) vals: Vec<f64>,
    pub(crate) args: Vec<u32>,
    pub(crate) coefs: Vec<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            ops: Vec::with_capacity(nodes),
            vals: Vec::with_capacity(nodes),
            args: Vec::with_capacity(nodes * 4),
            coefs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    #[inline]
    pub fn value(&self, node: NodeRef) -> f64 {
        self.vals[node.index()]
    }

    pub fn values(&self, nodes: &[NodeRef]) -> Vec<f64> {
        nodes.iter().map(|&n| self.value(n)).collect()
    }

    pub fn is_constant(&self, node: NodeRef) -> bool {
        matches!(self.ops[node.index()], Op::Const)
    }

    pub fn is_leaf(&self, node: NodeRef) -> bool {
        matches!(self.ops[node.index()], Op::Leaf { .. })
    }

    fn push(&mut self, op: Op) -> NodeRef {
        let idx = self.ops.len();
        assert!(idx < u32::MAX as usize, "tape exceeds u32 node capacity");
        let v = self.compute(&op);
        self.ops.push(op);
        self.vals.push(v);
        NodeRef(idx as u32)
    }

    /// A bound input variable.
    pub fn leaf(&mut self, value: f64) -> NodeRef {
        let n = self.push(Op::Leaf { bound: true });
        self.vals[n.index()] = value;
        n
    }

    pub fn leaves(&mut self, values: &[f64]) -> Vec<NodeRef> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    /// An input variable without a value; [`Graph::eval`] fails until it is bound.
    pub fn unbound_leaf(&mut self) -> NodeRef {
        let n = self.push(Op::Leaf { bound: false });
        self.vals[n.index()] = f64::NAN;
        n
    }

    /// Set a leaf's value. Dependent values are refreshed by the next [`Graph::eval`].
    pub fn bind(&mut self, node: NodeRef, value: f64) {
        match &mut self.ops[node.index()] {
            Op::Leaf { bound } => *bound = true,
            op => panic!("bind on non-leaf node {} ({op:?})", node.index()),
        }
        self.vals[node.index()] = value;
    }

    pub fn constant(&mut self, value: f64) -> NodeRef {
        let n = self.push(Op::Const);
        self.vals[n.index()] = value;
        n
    }

    pub fn constants(&mut self, values: &[f64]) -> Vec<NodeRef> {
        values.iter().map(|&v| self.constant(v)).collect()
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Div(a.0, b.0))
    }

    pub fn max(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Max(a.0, b.0))
    }

    pub fn neg(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Neg(a.0))
    }

    pub fn exp(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Exp(a.0))
    }

    pub fn log(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Relu(a.0))
    }

    pub fn square(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Sqrt(a.0))
    }

    pub fn scale(&mut self, a: NodeRef, c: f64) -> NodeRef {
        self.push(Op::Scale(a.0, c))
    }

    pub fn offset(&mut self, a: NodeRef, c: f64) -> NodeRef {
        self.push(Op::Offset(a.0, c))
    }

    pub(crate) fn step(&mut self, a: NodeRef) -> NodeRef {
        self.push(Op::Step(a.0))
    }

    pub(crate) fn ge(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.push(Op::Ge(a.0, b.0))
    }

    pub fn dot(&mut self, xs: &[NodeRef], ys: &[NodeRef]) -> NodeRef {
        assert_eq!(xs.len(), ys.len(), "dot operands differ in length");
        let start = self.args.len() as u32;
        self.args.extend(xs.iter().map(|n| n.0));
        self.args.extend(ys.iter().map(|n| n.0));
        self.push(Op::Dot { start, len: xs.len() as u32 })
    }

    /// `sum_k coefs[k] * xs[k]` with constant coefficients.
    pub fn weighted_sum(&mut self, xs: &[NodeRef], coefs: &[f64]) -> NodeRef {
        assert_eq!(xs.len(), coefs.len(), "weighted_sum operands differ in length");
        let start = self.args.len() as u32;
        let coef = self.coefs.len() as u32;
        self.args.extend(xs.iter().map(|n| n.0));
        self.coefs.extend_from_slice(coefs);
        self.push(Op::Weighted { start, len: xs.len() as u32, coef })
    }

    pub fn sum(&mut self, xs: &[NodeRef]) -> NodeRef {
        let start = self.args.len() as u32;
        self.args.extend(xs.iter().map(|n| n.0));
        self.push(Op::Sum { start, len: xs.len() as u32 })
    }

    pub fn mean(&mut self, xs: &[NodeRef]) -> NodeRef {
        let s = self.sum(xs);
        self.scale(s, 1.0 / xs.len() as f64)
    }

    /// Row-wise dot products of `rows` with `x`.
    pub fn matvec(&mut self, rows: &[Vec<NodeRef>], x: &[NodeRef]) -> Vec<NodeRef> {
        rows.iter().map(|r| self.dot(r, x)).collect()
    }

    #[inline]
    pub(crate) fn compute(&self, op: &Op) -> f64 {
        let v = |i: u32| self.vals[i as usize];
        match *op {
            Op::Leaf { .. } | Op::Const => 0.0,
            Op::Add(a, b) => v(a) + v(b),
            Op::Sub(a, b) => v(a) - v(b),
            Op::Mul(a, b) => v(a) * v(b),
            Op::Div(a, b) => v(a) / v(b),
            Op::Max(a, b) => {
                if v(a) >= v(b) {
                    v(a)
                } else {
                    v(b)
                }
            }
            Op::Neg(a) => -v(a),
            Op::Exp(a) => v(a).exp(),
            Op::Log(a) => v(a).ln(),
            Op::Tanh(a) => v(a).tanh(),
            Op::Sigmoid(a) => sigmoid(v(a)),
            Op::Relu(a) => {
                if v(a) > 0.0 {
                    v(a)
                } else {
                    0.0
                }
            }
            Op::Square(a) => v(a) * v(a),
            Op::Sqrt(a) => v(a).sqrt(),
            Op::Scale(a, c) => c * v(a),
            Op::Offset(a, c) => v(a) + c,
            Op::Step(a) => {
                if v(a) > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Op::Ge(a, b) => {
                if v(a) >= v(b) {
                    1.0
                } else {
                    0.0
                }
            }
            Op::Dot { start, len } => {
                let (s, n) = (start as usize, len as usize);
                let xs = &self.args[s..s + n];
                let ys = &self.args[s + n..s + 2 * n];
                xs.iter().zip(ys).fold(0.0, |acc, (&x, &y)| acc + v(x) * v(y))
            }
            Op::Weighted { start, len, coef } => {
                let (s, n, c) = (start as usize, len as usize, coef as usize);
                let xs = &self.args[s..s + n];
                xs.iter().zip(&self.coefs[c..c + n]).fold(0.0, |acc, (&x, &w)| acc + w * v(x))
            }
            Op::Sum { start, len } => {
                let (s, n) = (start as usize, len as usize);
                self.args[s..s + n].iter().fold(0.0, |acc, &x| acc + v(x))
            }
        }
    }

    /// Marks the ancestors of `root` (inclusive).
    pub(crate) fn ancestors(&self, root: NodeRef) -> Vec<bool> {
        let r = root.index();
        let mut mark = vec![false; r + 1];
        mark[r] = true;
        for i in (0..=r).rev() {
            if mark[i] {
                self.ops[i].for_each_input(&self.args, |j| mark[j as usize] = true);
            }
        }
        mark
    }

    /// Re-evaluates every ancestor of `root` from the current leaf bindings.
    pub fn eval(&mut self, root: NodeRef) -> Result<f64> {
        let mark = self.ancestors(root);
        for i in 0..=root.index() {
            if !mark[i] {
                continue;
            }
            let op = self.ops[i];
            match op {
                Op::Leaf { bound: false } => return Err(Error::UnboundLeaf(i)),
                Op::Leaf { bound: true } | Op::Const => {}
                _ => self.vals[i] = self.compute(&op),
            }
            if !self.vals[i].is_finite() {
                return Err(Error::NonFinite { node: i });
            }
        }
        Ok(self.vals[root.index()])
    }

    /// First non-finite value among the ancestors of `root`, if any.
    pub fn first_non_finite(&self, root: NodeRef) -> Option<usize> {
        let mark = self.ancestors(root);
        (0..=root.index()).find(|&i| mark[i] && !self.vals[i].is_finite())
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
