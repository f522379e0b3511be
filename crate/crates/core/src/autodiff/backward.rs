use nalgebra::DMatrix;

use super::graph::{Graph, NodeRef, Op};
use crate::error::{Error, Result};

const NONE: u32 = u32::MAX;

/// Gradient nodes of a root with respect to a list of nodes.
///
/// Every gradient lives on the same [`Graph`] and can be differentiated again.
#[derive(Clone, Debug)]
pub struct GradResult {
    wrt: Vec<NodeRef>,
    grads: Vec<NodeRef>,
}

impl GradResult {
    pub fn grads(&self) -> &[NodeRef] {
        &self.grads
    }

    pub fn into_grads(self) -> Vec<NodeRef> {
        self.grads
    }

    pub fn get(&self, node: NodeRef) -> Option<NodeRef> {
        self.wrt.iter().position(|&w| w == node).map(|i| self.grads[i])
    }

    pub fn values(&self, graph: &Graph) -> Vec<f64> {
        graph.values(&self.grads)
    }
}

/// The part of the tape between the lowest `wrt` node and the root that both
/// depends on some `wrt` node and feeds the root. `wrt` nodes act as cut
/// points: derivatives are partial with respect to them and do not flow into
/// their own inputs.
struct Region {
    lo: usize,
    is_wrt: Vec<bool>,
    active: Vec<bool>,
}

impl Region {
    fn new(g: &Graph, root: NodeRef, wrt: &[NodeRef]) -> Option<Self> {
        let lo = wrt.iter().map(|n| n.index()).min()?;
        let hi = root.index();
        if hi < lo {
            return None;
        }
        let n = hi - lo + 1;
        let mut is_wrt = vec![false; n];
        for w in wrt {
            if w.index() <= hi {
                is_wrt[w.index() - lo] = true;
            }
        }
        let mut depends = is_wrt.clone();
        for i in lo..=hi {
            if depends[i - lo] {
                continue;
            }
            let mut d = false;
            g.ops[i].for_each_input(&g.args, |j| {
                let j = j as usize;
                if j >= lo && depends[j - lo] {
                    d = true;
                }
            });
            depends[i - lo] = d;
        }
        let mut active = vec![false; n];
        if !depends[n - 1] {
            return Some(Self { lo, is_wrt, active });
        }
        active[n - 1] = true;
        for i in (lo..=hi).rev() {
            if !active[i - lo] || is_wrt[i - lo] {
                continue;
            }
            g.ops[i].for_each_input(&g.args, |j| {
                let j = j as usize;
                if j >= lo && depends[j - lo] {
                    active[j - lo] = true;
                }
            });
        }
        Some(Self { lo, is_wrt, active })
    }

    #[inline]
    fn is_active(&self, j: u32) -> bool {
        let j = j as usize;
        j >= self.lo && self.active[j - self.lo]
    }
}

impl Graph {
    /// Differentiable gradient of `root` with respect to `wrt`.
    ///
    /// Gradient nodes are appended to this tape. A node that does not
    /// influence `root` gets a constant zero gradient.
    pub fn grad(&mut self, root: NodeRef, wrt: &[NodeRef]) -> Result<GradResult> {
        if !self.value(root).is_finite() {
            return Err(Error::NonFinite { node: root.index() });
        }
        let region = Region::new(self, root, wrt);
        let mut adj: Vec<u32> = Vec::new();
        if let Some(r) = &region {
            adj = vec![NONE; r.active.len()];
            if r.active[root.index() - r.lo] {
                let one = self.constant(1.0);
                adj[root.index() - r.lo] = one.0;
                self.grow_adjoints(root, r, &mut adj);
            }
        }
        let mut zero = None;
        let mut grads = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let node = match &region {
                Some(r) if w.index() >= r.lo && w.index() <= root.index() && adj[w.index() - r.lo] != NONE => {
                    NodeRef(adj[w.index() - r.lo])
                }
                _ => *zero.get_or_insert_with(|| self.constant(0.0)),
            };
            if !self.value(node).is_finite() {
                return Err(Error::NonFinite { node: node.index() });
            }
            grads.push(node);
        }
        Ok(GradResult { wrt: wrt.to_vec(), grads })
    }

    fn grow_adjoints(&mut self, root: NodeRef, r: &Region, adj: &mut [u32]) {
        let lo = r.lo;
        let acc = |g: &mut Graph, adj: &mut [u32], j: u32, c: NodeRef| {
            let k = j as usize - lo;
            adj[k] = if adj[k] == NONE { c.0 } else { g.add(NodeRef(adj[k]), c).0 };
        };
        for i in (lo..=root.index()).rev() {
            let k = i - lo;
            if !r.active[k] || r.is_wrt[k] || adj[k] == NONE {
                continue;
            }
            let a = NodeRef(adj[k]);
            let z = NodeRef(i as u32);
            let op = self.ops[i];
            match op {
                Op::Leaf { .. } | Op::Const | Op::Step(_) | Op::Ge(..) => {}
                Op::Add(x, y) => {
                    if r.is_active(x) {
                        acc(self, adj, x, a);
                    }
                    if r.is_active(y) {
                        acc(self, adj, y, a);
                    }
                }
                Op::Sub(x, y) => {
                    if r.is_active(x) {
                        acc(self, adj, x, a);
                    }
                    if r.is_active(y) {
                        let c = self.neg(a);
                        acc(self, adj, y, c);
                    }
                }
                Op::Mul(x, y) => {
                    if r.is_active(x) {
                        let c = self.mul(a, NodeRef(y));
                        acc(self, adj, x, c);
                    }
                    if r.is_active(y) {
                        let c = self.mul(a, NodeRef(x));
                        acc(self, adj, y, c);
                    }
                }
                Op::Div(x, y) => {
                    if r.is_active(x) {
                        let c = self.div(a, NodeRef(y));
                        acc(self, adj, x, c);
                    }
                    if r.is_active(y) {
                        let q = self.div(z, NodeRef(y));
                        let t = self.mul(a, q);
                        let c = self.neg(t);
                        acc(self, adj, y, c);
                    }
                }
                Op::Max(x, y) => {
                    let ind = self.ge(NodeRef(x), NodeRef(y));
                    let t = self.mul(a, ind);
                    if r.is_active(x) {
                        acc(self, adj, x, t);
                    }
                    if r.is_active(y) {
                        let c = self.sub(a, t);
                        acc(self, adj, y, c);
                    }
                }
                Op::Neg(x) => {
                    let c = self.neg(a);
                    acc(self, adj, x, c);
                }
                Op::Exp(x) => {
                    let c = self.mul(a, z);
                    acc(self, adj, x, c);
                }
                Op::Log(x) => {
                    let c = self.div(a, NodeRef(x));
                    acc(self, adj, x, c);
                }
                Op::Tanh(x) => {
                    let sq = self.square(z);
                    let d = self.neg(sq);
                    let d = self.offset(d, 1.0);
                    let c = self.mul(a, d);
                    acc(self, adj, x, c);
                }
                Op::Sigmoid(x) => {
                    let nz = self.neg(z);
                    let om = self.offset(nz, 1.0);
                    let d = self.mul(z, om);
                    let c = self.mul(a, d);
                    acc(self, adj, x, c);
                }
                Op::Relu(x) => {
                    let s = self.step(NodeRef(x));
                    let c = self.mul(a, s);
                    acc(self, adj, x, c);
                }
                Op::Square(x) => {
                    let t = self.mul(a, NodeRef(x));
                    let c = self.scale(t, 2.0);
                    acc(self, adj, x, c);
                }
                Op::Sqrt(x) => {
                    let t = self.div(a, z);
                    let c = self.scale(t, 0.5);
                    acc(self, adj, x, c);
                }
                Op::Scale(x, s) => {
                    let c = self.scale(a, s);
                    acc(self, adj, x, c);
                }
                Op::Offset(x, _) => acc(self, adj, x, a),
                Op::Dot { start, len } => {
                    let (s, n) = (start as usize, len as usize);
                    for q in 0..n {
                        let x = self.args[s + q];
                        let y = self.args[s + n + q];
                        if r.is_active(x) {
                            let c = self.times_node(a, y);
                            acc(self, adj, x, c);
                        }
                        if r.is_active(y) {
                            let c = self.times_node(a, x);
                            acc(self, adj, y, c);
                        }
                    }
                }
                Op::Weighted { start, len, coef } => {
                    let (s, n, cf) = (start as usize, len as usize, coef as usize);
                    for q in 0..n {
                        let x = self.args[s + q];
                        if r.is_active(x) {
                            let c = self.scale(a, self.coefs[cf + q]);
                            acc(self, adj, x, c);
                        }
                    }
                }
                Op::Sum { start, len } => {
                    let (s, n) = (start as usize, len as usize);
                    for q in 0..n {
                        let x = self.args[s + q];
                        if r.is_active(x) {
                            acc(self, adj, x, a);
                        }
                    }
                }
            }
        }
    }

    /// `a * node`, folding constant `node` into a scale.
    fn times_node(&mut self, a: NodeRef, node: u32) -> NodeRef {
        let n = NodeRef(node);
        if self.is_constant(n) {
            self.scale(a, self.value(n))
        } else {
            self.mul(a, n)
        }
    }

    /// Numeric gradient of `root` with respect to `wrt` (no tape growth).
    ///
    /// Agrees with `grad(...).values()` up to floating-point summation order;
    /// used where only the numbers are needed, such as meta-gradients.
    pub fn backward_values(&self, root: NodeRef, wrt: &[NodeRef]) -> Result<Vec<f64>> {
        if !self.value(root).is_finite() {
            return Err(Error::NonFinite { node: root.index() });
        }
        let Some(r) = Region::new(self, root, wrt) else {
            return Ok(vec![0.0; wrt.len()]);
        };
        let lo = r.lo;
        let mut adj = vec![0.0f64; r.active.len()];
        adj[root.index() - lo] = 1.0;
        let v = |i: u32| self.vals[i as usize];
        for i in (lo..=root.index()).rev() {
            let k = i - lo;
            if !r.active[k] || r.is_wrt[k] {
                continue;
            }
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let z = self.vals[i];
            let mut put = |j: u32, c: f64| {
                if r.is_active(j) {
                    adj[j as usize - lo] += c;
                }
            };
            match self.ops[i] {
                Op::Leaf { .. } | Op::Const | Op::Step(_) | Op::Ge(..) => {}
                Op::Add(x, y) => {
                    put(x, a);
                    put(y, a);
                }
                Op::Sub(x, y) => {
                    put(x, a);
                    put(y, -a);
                }
                Op::Mul(x, y) => {
                    put(x, a * v(y));
                    put(y, a * v(x));
                }
                Op::Div(x, y) => {
                    put(x, a / v(y));
                    put(y, -(a * (z / v(y))));
                }
                Op::Max(x, y) => {
                    if v(x) >= v(y) {
                        put(x, a);
                    } else {
                        put(y, a);
                    }
                }
                Op::Neg(x) => put(x, -a),
                Op::Exp(x) => put(x, a * z),
                Op::Log(x) => put(x, a / v(x)),
                Op::Tanh(x) => put(x, a * (1.0 - z * z)),
                Op::Sigmoid(x) => put(x, a * (z * (1.0 - z))),
                Op::Relu(x) => {
                    if v(x) > 0.0 {
                        put(x, a);
                    }
                }
                Op::Square(x) => put(x, 2.0 * (a * v(x))),
                Op::Sqrt(x) => put(x, 0.5 * (a / z)),
                Op::Scale(x, s) => put(x, s * a),
                Op::Offset(x, _) => put(x, a),
                Op::Dot { start, len } => {
                    let (s, n) = (start as usize, len as usize);
                    for q in 0..n {
                        let x = self.args[s + q];
                        let y = self.args[s + n + q];
                        put(x, a * v(y));
                        put(y, a * v(x));
                    }
                }
                Op::Weighted { start, len, coef } => {
                    let (s, n, cf) = (start as usize, len as usize, coef as usize);
                    for q in 0..n {
                        put(self.args[s + q], self.coefs[cf + q] * a);
                    }
                }
                Op::Sum { start, len } => {
                    let (s, n) = (start as usize, len as usize);
                    for q in 0..n {
                        put(self.args[s + q], a);
                    }
                }
            }
        }
        let out: Vec<f64> = wrt
            .iter()
            .map(|w| {
                let i = w.index();
                if i >= lo && i <= root.index() && r.active[i - lo] {
                    adj[i - lo]
                } else {
                    0.0
                }
            })
            .collect();
        if let Some(bad) = wrt.iter().zip(&out).find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { node: bad.0.index() });
        }
        Ok(out)
    }

    /// Hessian-vector product nodes `H v`, given already-built gradient nodes of the root.
    pub fn hvp_from_grad(&mut self, grads: &[NodeRef], theta: &[NodeRef], v: &[f64]) -> Result<Vec<NodeRef>> {
        if v.len() != theta.len() {
            return Err(Error::DimMismatch { expected: theta.len(), found: v.len() });
        }
        let gv = self.weighted_sum(grads, v);
        Ok(self.grad(gv, theta)?.into_grads())
    }

    /// Differentiable nodes of `∇²root · v`.
    pub fn hvp_nodes(&mut self, root: NodeRef, theta: &[NodeRef], v: &[f64]) -> Result<Vec<NodeRef>> {
        if v.len() != theta.len() {
            return Err(Error::DimMismatch { expected: theta.len(), found: v.len() });
        }
        let g = self.grad(root, theta)?.into_grads();
        self.hvp_from_grad(&g, theta, v)
    }

    pub fn hvp(&mut self, root: NodeRef, theta: &[NodeRef], v: &[f64]) -> Result<Vec<f64>> {
        let nodes = self.hvp_nodes(root, theta, v)?;
        Ok(self.values(&nodes))
    }

    /// Dense symmetrized Hessian from `p` basis-vector HVPs. Limited to `p <= 64`.
    pub fn dense_hessian(&mut self, root: NodeRef, theta: &[NodeRef]) -> Result<DMatrix<f64>> {
        let p = theta.len();
        if p > 64 {
            return Err(Error::TooLarge(p));
        }
        let g = self.grad(root, theta)?.into_grads();
        let mut h = DMatrix::zeros(p, p);
        let mut e = vec![0.0; p];
        for i in 0..p {
            e[i] = 1.0;
            let col = self.hvp_from_grad(&g, theta, &e)?;
            for (r, n) in col.iter().enumerate() {
                h[(r, i)] = self.value(*n);
            }
            e[i] = 0.0;
        }
        Ok((&h + h.transpose()) * 0.5)
    }
}
