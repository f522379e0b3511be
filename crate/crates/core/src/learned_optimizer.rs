//! Coordinate-wise learned update rules `m(z; φ)`.
//!
//! Every rule is applied independently to each coordinate of `θ` with shared
//! parameters `φ`. Rules have two forward paths that produce bit-identical
//! values: one recorded on a [`Graph`] (for meta-gradients) and one on plain
//! floats (for meta-testing).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::autodiff::{Graph, NodeRef};
use crate::error::{Error, Result};
use crate::rng;

pub const HIDDEN: usize = 20;
pub const INPUT: usize = 2;
pub const DEFAULT_P_TILDE: f64 = 3.0;
pub const DEFAULT_OUTPUT_SCALE: f64 = 0.1;

/// Gradient preprocessing: `(log|g|/p̃, sign g)` for `|g| ≥ e^{−p̃}`, else `(−1, e^{p̃} g)`.
pub fn preprocess(g: f64, p_tilde: f64) -> (f64, f64) {
    if g.abs() >= (-p_tilde).exp() {
        ((g * g).ln() * (0.5 / p_tilde), if g > 0.0 { 1.0 } else { -1.0 })
    } else {
        (-1.0, p_tilde.exp() * g)
    }
}

/// [`preprocess`] on the tape. The branch is chosen by the current value.
pub fn preprocess_node(graph: &mut Graph, g: NodeRef, p_tilde: f64) -> (NodeRef, NodeRef) {
    let v = graph.value(g);
    if graph.is_constant(g) {
        let (a, b) = preprocess(v, p_tilde);
        return (graph.constant(a), graph.constant(b));
    }
    if v.abs() >= (-p_tilde).exp() {
        let sq = graph.square(g);
        let l = graph.log(sq);
        (graph.scale(l, 0.5 / p_tilde), graph.constant(if v > 0.0 { 1.0 } else { -1.0 }))
    } else {
        (graph.constant(-1.0), graph.scale(g, p_tilde.exp()))
    }
}

/// A parameterized, coordinate-wise update rule.
pub trait UpdateRule: Send + Sync {
    fn name(&self) -> &'static str;

    fn param_count(&self) -> usize;

    fn init_phi(&self, seed: u64) -> Vec<f64>;

    /// Recurrent state length per coordinate (zero-initialized at unroll start).
    fn state_len(&self) -> usize;

    /// Updates for every coordinate, recorded on `g`. `state` holds
    /// `p * state_len()` nodes, coordinate-major.
    fn step_tape(&self, g: &mut Graph, phi: &[NodeRef], grads: &[NodeRef], state: &[NodeRef]) -> (Vec<NodeRef>, Vec<NodeRef>);

    /// Same computation on plain floats; `state` is updated in place.
    fn step_values(&self, phi: &[f64], grads: &[f64], state: &mut [f64]) -> Vec<f64>;
}

/// Two stacked LSTM cells (hidden 20, input = preprocessed gradient pair)
/// followed by a linear head and a fixed output scale.
///
/// `φ` layout: for each layer, `W` (`4H × (in + H)`, row-major, gate order
/// i, f, g, o) then `b` (`4H`); then head weights (`H`) and head bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmRule {
    pub p_tilde: f64,
    pub scale: f64,
    pub forget_bias: f64,
    /// Cell weights start uniform in `±init_range`.
    pub init_range: f64,
}

impl Default for LstmRule {
    fn default() -> Self {
        Self { p_tilde: DEFAULT_P_TILDE, scale: DEFAULT_OUTPUT_SCALE, forget_bias: 0.0, init_range: 1.0 }
    }
}

const LAYER_IN: [usize; 2] = [INPUT, HIDDEN];
const STATE: usize = 4 * HIDDEN;

fn layer_len(l: usize) -> usize {
    4 * HIDDEN * (LAYER_IN[l] + HIDDEN) + 4 * HIDDEN
}

/// Offsets into `φ`: `(w, b)` per layer, then head.
fn offsets() -> ([(usize, usize); 2], usize) {
    let w0 = 0;
    let b0 = w0 + 4 * HIDDEN * (LAYER_IN[0] + HIDDEN);
    let w1 = b0 + 4 * HIDDEN;
    let b1 = w1 + 4 * HIDDEN * (LAYER_IN[1] + HIDDEN);
    let head = b1 + 4 * HIDDEN;
    ([(w0, b0), (w1, b1)], head)
}

impl LstmRule {
    pub const PARAM_COUNT: usize = 4 * HIDDEN * (INPUT + HIDDEN) + 4 * HIDDEN + 4 * HIDDEN * (2 * HIDDEN) + 4 * HIDDEN + HIDDEN + 1;

    pub fn head<'a>(&self, phi: &'a [f64]) -> (&'a [f64], f64) {
        let (_, h) = offsets();
        (&phi[h..h + HIDDEN], phi[h + HIDDEN])
    }

    /// Bound on `|update|` implied by the head, since `|h| ≤ 1` coordinate-wise.
    pub fn update_bound(&self, phi: &[f64]) -> f64 {
        let (w, b) = self.head(phi);
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        self.scale * (n * (HIDDEN as f64).sqrt() + b.abs())
    }

    /// Gate rows `[W_r..., b_r]` for one layer.
    fn rows(phi: &[NodeRef], l: usize) -> Vec<Vec<NodeRef>> {
        let ([(w0, b0), (w1, b1)], _) = offsets();
        let (w, b) = if l == 0 { (w0, b0) } else { (w1, b1) };
        let cols = LAYER_IN[l] + HIDDEN;
        (0..4 * HIDDEN)
            .map(|r| {
                let mut row = phi[w + r * cols..w + (r + 1) * cols].to_vec();
                row.push(phi[b + r]);
                row
            })
            .collect()
    }

    fn cell_tape(g: &mut Graph, rows: &[Vec<NodeRef>], input: &[NodeRef], h: &[NodeRef], c: &[NodeRef], one: NodeRef) -> (Vec<NodeRef>, Vec<NodeRef>) {
        let mut x = Vec::with_capacity(input.len() + HIDDEN + 1);
        x.extend_from_slice(input);
        x.extend_from_slice(h);
        x.push(one);
        let pre: Vec<NodeRef> = rows.iter().map(|r| g.dot(r, &x)).collect();
        let mut h2 = Vec::with_capacity(HIDDEN);
        let mut c2 = Vec::with_capacity(HIDDEN);
        for k in 0..HIDDEN {
            let i = g.sigmoid(pre[k]);
            let f = g.sigmoid(pre[HIDDEN + k]);
            let u = g.tanh(pre[2 * HIDDEN + k]);
            let o = g.sigmoid(pre[3 * HIDDEN + k]);
            let fc = g.mul(f, c[k]);
            let iu = g.mul(i, u);
            let cn = g.add(fc, iu);
            let tc = g.tanh(cn);
            h2.push(g.mul(o, tc));
            c2.push(cn);
        }
        (h2, c2)
    }

    fn cell_values(phi: &[f64], l: usize, input: &[f64], h: &mut [f64], c: &mut [f64]) {
        let ([(w0, b0), (w1, b1)], _) = offsets();
        let (w, b) = if l == 0 { (w0, b0) } else { (w1, b1) };
        let cols = LAYER_IN[l] + HIDDEN;
        let mut pre = [0.0; 4 * HIDDEN];
        for (r, p) in pre.iter_mut().enumerate() {
            let row = &phi[w + r * cols..w + (r + 1) * cols];
            let xs = input.iter().chain(h.iter());
            *p = row.iter().zip(xs).fold(0.0, |acc, (a, x)| acc + a * x) + phi[b + r] * 1.0;
        }
        for k in 0..HIDDEN {
            let i = crate::autodiff::sigmoid(pre[k]);
            let f = crate::autodiff::sigmoid(pre[HIDDEN + k]);
            let u = pre[2 * HIDDEN + k].tanh();
            let o = crate::autodiff::sigmoid(pre[3 * HIDDEN + k]);
            let cn = f * c[k] + i * u;
            h[k] = o * cn.tanh();
            c[k] = cn;
        }
    }
}

impl UpdateRule for LstmRule {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn param_count(&self) -> usize {
        Self::PARAM_COUNT
    }

    /// Cell weights uniform in `±init_range`, biases zero except the forget gate, head zero.
    fn init_phi(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, 0, rng::tag::PHI);
        let a = self.init_range;
        let mut phi = Vec::with_capacity(Self::PARAM_COUNT);
        for l in 0..2 {
            let w = 4 * HIDDEN * (LAYER_IN[l] + HIDDEN);
            phi.extend((0..w).map(|_| r.random_range(-a..a)));
            for gate in 0..4 {
                let v = if gate == 1 { self.forget_bias } else { 0.0 };
                phi.extend(std::iter::repeat_n(v, HIDDEN));
            }
            debug_assert_eq!(phi.len(), (0..=l).map(layer_len).sum::<usize>());
        }
        phi.extend(std::iter::repeat_n(0.0, HIDDEN + 1));
        phi
    }

    fn state_len(&self) -> usize {
        STATE
    }

    fn step_tape(&self, g: &mut Graph, phi: &[NodeRef], grads: &[NodeRef], state: &[NodeRef]) -> (Vec<NodeRef>, Vec<NodeRef>) {
        assert_eq!(phi.len(), Self::PARAM_COUNT, "phi has wrong length");
        assert_eq!(state.len(), grads.len() * STATE, "state has wrong length");
        let rows = [Self::rows(phi, 0), Self::rows(phi, 1)];
        let (_, h) = offsets();
        let head = &phi[h..h + HIDDEN + 1];
        let one = g.constant(1.0);
        let mut deltas = Vec::with_capacity(grads.len());
        let mut next = Vec::with_capacity(state.len());
        for (j, &gj) in grads.iter().enumerate() {
            let s = &state[j * STATE..(j + 1) * STATE];
            let (f1, f2) = preprocess_node(g, gj, self.p_tilde);
            let (h1, c1) = Self::cell_tape(g, &rows[0], &[f1, f2], &s[..HIDDEN], &s[HIDDEN..2 * HIDDEN], one);
            let (h2, c2) = Self::cell_tape(g, &rows[1], &h1, &s[2 * HIDDEN..3 * HIDDEN], &s[3 * HIDDEN..], one);
            let mut hx = h2.clone();
            hx.push(one);
            let out = g.dot(head, &hx);
            deltas.push(g.scale(out, self.scale));
            next.extend(h1);
            next.extend(c1);
            next.extend(h2);
            next.extend(c2);
        }
        (deltas, next)
    }

    fn step_values(&self, phi: &[f64], grads: &[f64], state: &mut [f64]) -> Vec<f64> {
        assert_eq!(phi.len(), Self::PARAM_COUNT, "phi has wrong length");
        let (_, h) = offsets();
        let head = &phi[h..h + HIDDEN + 1];
        grads
            .iter()
            .zip(state.chunks_exact_mut(STATE))
            .map(|(&gj, s)| {
                let (f1, f2) = preprocess(gj, self.p_tilde);
                let (l1, l2) = s.split_at_mut(2 * HIDDEN);
                let (h1, c1) = l1.split_at_mut(HIDDEN);
                Self::cell_values(phi, 0, &[f1, f2], h1, c1);
                let (h2, c2) = l2.split_at_mut(HIDDEN);
                Self::cell_values(phi, 1, h1, h2, c2);
                let out = h2.iter().chain(std::iter::once(&1.0)).zip(head).fold(0.0, |acc, (x, w)| acc + w * x);
                self.scale * out
            })
            .collect()
    }
}

/// `m(g; c) = −c·g`, one parameter, no state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearRule {
    pub init_c: f64,
}

impl UpdateRule for LinearRule {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn param_count(&self) -> usize {
        1
    }

    fn init_phi(&self, _seed: u64) -> Vec<f64> {
        vec![self.init_c]
    }

    fn state_len(&self) -> usize {
        0
    }

    fn step_tape(&self, g: &mut Graph, phi: &[NodeRef], grads: &[NodeRef], _state: &[NodeRef]) -> (Vec<NodeRef>, Vec<NodeRef>) {
        let d = grads
            .iter()
            .map(|&gj| {
                let m = g.mul(phi[0], gj);
                g.neg(m)
            })
            .collect();
        (d, Vec::new())
    }

    fn step_values(&self, phi: &[f64], grads: &[f64], _state: &mut [f64]) -> Vec<f64> {
        grads.iter().map(|gj| -(phi[0] * gj)).collect()
    }
}

/// Small stateful rule for derivative checks:
/// `v ← σ(φ₃)·v + g`, `m = −φ₀·v − φ₁·tanh(φ₂·g)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MomentumTanhRule;

impl UpdateRule for MomentumTanhRule {
    fn name(&self) -> &'static str {
        "momentum_tanh"
    }

    fn param_count(&self) -> usize {
        4
    }

    fn init_phi(&self, _seed: u64) -> Vec<f64> {
        vec![0.1, 0.05, 0.5, 0.0]
    }

    fn state_len(&self) -> usize {
        1
    }

    fn step_tape(&self, g: &mut Graph, phi: &[NodeRef], grads: &[NodeRef], state: &[NodeRef]) -> (Vec<NodeRef>, Vec<NodeRef>) {
        let beta = g.sigmoid(phi[3]);
        let mut d = Vec::with_capacity(grads.len());
        let mut next = Vec::with_capacity(grads.len());
        for (&gj, &vj) in grads.iter().zip(state) {
            let bv = g.mul(beta, vj);
            let v = g.add(bv, gj);
            let a = g.mul(phi[0], v);
            let sg = g.mul(phi[2], gj);
            let t = g.tanh(sg);
            let b = g.mul(phi[1], t);
            let s = g.add(a, b);
            d.push(g.neg(s));
            next.push(v);
        }
        (d, next)
    }

    fn step_values(&self, phi: &[f64], grads: &[f64], state: &mut [f64]) -> Vec<f64> {
        let beta = crate::autodiff::sigmoid(phi[3]);
        grads
            .iter()
            .zip(state.iter_mut())
            .map(|(&gj, vj)| {
                *vj = beta * *vj + gj;
                -(phi[0] * *vj + phi[1] * (phi[2] * gj).tanh())
            })
            .collect()
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FL2O";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `φ`: `"FL2O"`, `u32` version, `u64` count, then `f64` values, all little-endian.
pub fn save_phi(path: &Path, phi: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * phi.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(phi.len() as u64).to_le_bytes());
    for v in phi {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn decode_phi(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 {
        return Err(Error::BadCheckpoint(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("missing FL2O magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 8 * count {
        return Err(Error::BadCheckpoint(format!("header says {count} values, file holds {} bytes", bytes.len())));
    }
    Ok(bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn load_phi(path: &Path) -> Result<Vec<f64>> {
    decode_phi(&fs::read(path)?)
}
