use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::dataset::{Dataset, Label, LabelKind};
use crate::autodiff::{sigmoid, Graph, NodeRef};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizeeKind {
    QuadraticFamily,
    Rosenbrock,
    LogisticRegression,
    TinyMlp,
}

/// Distribution of the starting point `θ⁰`.
#[derive(Clone, Debug, PartialEq)]
pub enum InitSampler {
    /// i.i.d. standard normal coordinates.
    StandardNormal,
    /// Weights `N(0, 1/fan_in)`, biases zero, for the listed dense layers.
    FanIn { layers: Vec<usize> },
    /// Logistic regression on `dim` features: weights `N(0, 1/dim)`, bias zero.
    Linear { dim: usize },
}

#[derive(Clone, Debug)]
enum Model {
    /// Row-major `p × p` matrices; each one is a sample.
    Quadratic { p: usize, train: Vec<Vec<f64>>, test: Vec<Vec<f64>> },
    Rosenbrock,
    Logistic { data: Arc<Dataset> },
    Mlp { arch: Vec<usize>, activation: Activation, data: Arc<Dataset> },
}

/// A task: parameter dimension, per-sample loss, samples and `θ⁰` sampler.
///
/// Training loss over a batch is the mean of per-sample losses. All losses
/// are non-negative.
#[derive(Clone, Debug)]
pub struct Optimizee {
    model: Model,
    param_dim: usize,
    init: InitSampler,
}

pub fn make_quadratic_family(p: usize, eig_range: (f64, f64), seed: u64) -> Result<Optimizee> {
    make_quadratic_family_with(p, eig_range, 1, 0, seed)
}

/// `L(θ; A) = ½ θᵀAθ` with `samples` train and `test_samples` test matrices,
/// each `A = Q diag(λ) Qᵀ` with Haar-random `Q` and `λ ~ U[lo, hi]`.
pub fn make_quadratic_family_with(
    p: usize,
    (lo, hi): (f64, f64),
    samples: usize,
    test_samples: usize,
    seed: u64,
) -> Result<Optimizee> {
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidSpectrum { lo, hi });
    }
    if p == 0 {
        return Err(Error::ArchMismatch("quadratic needs p >= 1".into()));
    }
    if samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut r = rng::stream(seed, 0, rng::tag::TASK);
    let mut draw = || random_spd(p, lo, hi, &mut r);
    let train = (0..samples).map(|_| draw()).collect();
    let test = (0..test_samples).map(|_| draw()).collect();
    Ok(Optimizee { model: Model::Quadratic { p, train, test }, param_dim: p, init: InitSampler::StandardNormal })
}

fn random_spd(p: usize, lo: f64, hi: f64, r: &mut Rng) -> Vec<f64> {
    let eigs: Vec<f64> = (0..p).map(|_| lo + (hi - lo) * r.random::<f64>()).collect();
    if lo == hi {
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            a[i * p + i] = lo;
        }
        return a;
    }
    if p == 1 {
        return vec![eigs[0]];
    }
    let g = DMatrix::<f64>::from_fn(p, p, |_, _| StandardNormal.sample(r));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..p {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs)) * q.transpose();
    let mut out = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            out[i * p + j] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    out
}

pub fn make_rosenbrock(p: usize) -> Result<Optimizee> {
    if p < 2 {
        return Err(Error::ArchMismatch("rosenbrock needs p >= 2".into()));
    }
    Ok(Optimizee { model: Model::Rosenbrock, param_dim: p, init: InitSampler::StandardNormal })
}

/// Binary logistic regression with a bias; class 0 maps to `y = -1`, class 1 to `y = +1`.
pub fn make_logistic(data: Arc<Dataset>) -> Result<Optimizee> {
    if data.n_train() == 0 {
        return Err(Error::EmptyDataset);
    }
    if data.label_kind != (LabelKind::Class { classes: 2 }) {
        return Err(Error::ArchMismatch("logistic regression needs two classes".into()));
    }
    let d = data.feature_dim;
    Ok(Optimizee { model: Model::Logistic { data }, param_dim: d + 1, init: InitSampler::Linear { dim: d } })
}

/// Dense classifier with softmax cross-entropy. `θ` holds, per layer, the
/// row-major weight matrix followed by the bias vector.
pub fn make_tiny_mlp(arch: &[usize], activation: Activation, data: Arc<Dataset>) -> Result<Optimizee> {
    if arch.len() < 2 || arch.contains(&0) {
        return Err(Error::ArchMismatch(format!("invalid layer sizes {arch:?}")));
    }
    if arch[0] != data.feature_dim {
        return Err(Error::ArchMismatch(format!("input width {} but data has {} features", arch[0], data.feature_dim)));
    }
    match data.label_kind {
        LabelKind::Class { classes } if classes == *arch.last().unwrap() => {}
        k => return Err(Error::ArchMismatch(format!("output width {} incompatible with labels {k:?}", arch.last().unwrap()))),
    }
    if data.n_train() == 0 {
        return Err(Error::EmptyDataset);
    }
    let param_dim = arch.windows(2).map(|w| w[1] * (w[0] + 1)).sum();
    Ok(Optimizee {
        model: Model::Mlp { arch: arch.to_vec(), activation, data },
        param_dim,
        init: InitSampler::FanIn { layers: arch.to_vec() },
    })
}

fn softplus_node(g: &mut Graph, u: NodeRef) -> NodeRef {
    if g.value(u) <= 0.0 {
        let e = g.exp(u);
        let o = g.offset(e, 1.0);
        g.log(o)
    } else {
        let n = g.neg(u);
        let e = g.exp(n);
        let o = g.offset(e, 1.0);
        let l = g.log(o);
        g.add(u, l)
    }
}

fn softplus(u: f64) -> f64 {
    if u <= 0.0 {
        u.exp().ln_1p()
    } else {
        u + (-u).exp().ln_1p()
    }
}

fn class_of(label: Label) -> usize {
    match label {
        Label::Class(c) => c,
        Label::Real(v) => v as usize,
    }
}

impl Optimizee {
    pub fn kind(&self) -> OptimizeeKind {
        match self.model {
            Model::Quadratic { .. } => OptimizeeKind::QuadraticFamily,
            Model::Rosenbrock => OptimizeeKind::Rosenbrock,
            Model::Logistic { .. } => OptimizeeKind::LogisticRegression,
            Model::Mlp { .. } => OptimizeeKind::TinyMlp,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn init_sampler(&self) -> &InitSampler {
        &self.init
    }

    pub fn n_train(&self) -> usize {
        match &self.model {
            Model::Quadratic { train, .. } => train.len(),
            Model::Rosenbrock => 1,
            Model::Logistic { data } | Model::Mlp { data, .. } => data.n_train(),
        }
    }

    pub fn n_test(&self) -> usize {
        match &self.model {
            Model::Quadratic { test, .. } => test.len(),
            Model::Rosenbrock => 0,
            Model::Logistic { data } | Model::Mlp { data, .. } => data.n_test(),
        }
    }

    pub fn dataset(&self) -> Option<&Arc<Dataset>> {
        match &self.model {
            Model::Logistic { data } | Model::Mlp { data, .. } => Some(data),
            _ => None,
        }
    }

    pub fn full_batch(&self) -> Batch {
        Batch::full(self.n_train())
    }

    pub fn init_theta(&self, r: &mut Rng) -> Vec<f64> {
        let mut normal = |sd: f64| -> f64 { let z: f64 = StandardNormal.sample(&mut *r); sd * z };
        match &self.init {
            InitSampler::StandardNormal => (0..self.param_dim).map(|_| normal(1.0)).collect(),
            InitSampler::Linear { dim } => {
                let sd = 1.0 / (*dim as f64).sqrt();
                let mut th: Vec<f64> = (0..*dim).map(|_| normal(sd)).collect();
                th.push(0.0);
                th
            }
            InitSampler::FanIn { layers } => {
                let mut th = Vec::with_capacity(self.param_dim);
                for w in layers.windows(2) {
                    let sd = 1.0 / (w[0] as f64).sqrt();
                    th.extend((0..w[0] * w[1]).map(|_| normal(sd)));
                    th.extend(std::iter::repeat_n(0.0, w[1]));
                }
                th
            }
        }
    }

    /// Per-sample loss `l(θ; ξ_i)` on the training split.
    pub fn build_sample_loss(&self, g: &mut Graph, theta: &[NodeRef], i: usize) -> NodeRef {
        assert_eq!(theta.len(), self.param_dim, "theta has wrong dimension");
        match &self.model {
            Model::Quadratic { p, train, .. } => quad_node(g, theta, &train[i], *p),
            Model::Rosenbrock => rosen_node(g, theta),
            Model::Logistic { data } => {
                let s = &data.train[i];
                logistic_node(g, theta, &s.features, class_of(s.label))
            }
            Model::Mlp { arch, activation, data } => {
                let s = &data.train[i];
                mlp_ce_node(g, theta, arch, *activation, &s.features, class_of(s.label))
            }
        }
    }

    /// Mean training loss over `batch`, recorded on `g`.
    pub fn build_loss(&self, g: &mut Graph, theta: &[NodeRef], batch: &Batch) -> NodeRef {
        if let Model::Rosenbrock = self.model {
            return rosen_node(g, theta);
        }
        let losses: Vec<NodeRef> = batch.indices.iter().map(|&i| self.build_sample_loss(g, theta, i)).collect();
        g.mean(&losses)
    }

    pub fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let th = g.leaves(theta);
        let l = self.build_loss(&mut g, &th, batch);
        let v = g.value(l);
        if !v.is_finite() {
            return Err(Error::NonFinite { node: l.index() });
        }
        Ok(v)
    }

    pub fn loss_and_grad(&self, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let th = g.leaves(theta);
        let l = self.build_loss(&mut g, &th, batch);
        let grad = g.backward_values(l, &th)?;
        Ok((g.value(l), grad))
    }

    /// Mean loss on the test split, if there is one.
    pub fn test_loss(&self, theta: &[f64]) -> Option<f64> {
        match &self.model {
            Model::Quadratic { p, test, .. } if !test.is_empty() => {
                let tot: f64 = test.iter().map(|a| quad_value(theta, a, *p)).sum();
                Some(tot / test.len() as f64)
            }
            Model::Logistic { data } if data.n_test() > 0 => {
                let tot: f64 = data
                    .test
                    .iter()
                    .map(|s| {
                        let y = if class_of(s.label) == 1 { 1.0 } else { -1.0 };
                        softplus(-y * logistic_score(theta, &s.features))
                    })
                    .sum();
                Some(tot / data.n_test() as f64)
            }
            Model::Mlp { arch, activation, data } if data.n_test() > 0 => {
                let tot: f64 = data
                    .test
                    .iter()
                    .map(|s| {
                        let z = mlp_logits(theta, arch, *activation, &s.features);
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                        lse - z[class_of(s.label)]
                    })
                    .sum();
                Some(tot / data.n_test() as f64)
            }
            _ => None,
        }
    }

    /// Classification accuracy in `[0, 1]` on the test split.
    pub fn test_accuracy(&self, theta: &[f64]) -> Option<f64> {
        let data = self.dataset()?;
        if data.n_test() == 0 {
            return None;
        }
        Some(self.accuracy_on(theta, &data.test))
    }

    pub fn train_accuracy(&self, theta: &[f64]) -> Option<f64> {
        let data = self.dataset()?;
        Some(self.accuracy_on(theta, &data.train))
    }

    fn accuracy_on(&self, theta: &[f64], samples: &[super::dataset::Sample]) -> f64 {
        let correct = samples
            .iter()
            .filter(|s| {
                let pred = match &self.model {
                    Model::Logistic { .. } => usize::from(logistic_score(theta, &s.features) > 0.0),
                    Model::Mlp { arch, activation, .. } => {
                        let z = mlp_logits(theta, arch, *activation, &s.features);
                        z.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0
                    }
                    _ => unreachable!(),
                };
                pred == class_of(s.label)
            })
            .count();
        correct as f64 / samples.len().max(1) as f64
    }
}

fn quad_node(g: &mut Graph, th: &[NodeRef], a: &[f64], p: usize) -> NodeRef {
    let rows: Vec<NodeRef> = a.chunks_exact(p).map(|row| g.weighted_sum(th, row)).collect();
    let q = g.dot(th, &rows);
    g.scale(q, 0.5)
}

fn quad_value(th: &[f64], a: &[f64], p: usize) -> f64 {
    let q: f64 = a.chunks_exact(p).zip(th).map(|(row, t)| t * row.iter().zip(th).map(|(x, y)| x * y).sum::<f64>()).sum();
    0.5 * q
}

fn rosen_node(g: &mut Graph, th: &[NodeRef]) -> NodeRef {
    let mut terms = Vec::with_capacity(2 * th.len());
    for w in th.windows(2) {
        let n = g.neg(w[0]);
        let om = g.offset(n, 1.0);
        terms.push(g.square(om));
        let x2 = g.square(w[0]);
        let d = g.sub(w[1], x2);
        let d2 = g.square(d);
        terms.push(g.scale(d2, 100.0));
    }
    g.sum(&terms)
}

fn logistic_score(th: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    th[..d].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + th[d]
}

fn logistic_node(g: &mut Graph, th: &[NodeRef], x: &[f64], class: usize) -> NodeRef {
    let y = if class == 1 { 1.0 } else { -1.0 };
    let d = x.len();
    let coefs: Vec<f64> = x.iter().map(|v| -y * v).collect();
    let wx = g.weighted_sum(&th[..d], &coefs);
    let b = g.scale(th[d], -y);
    let u = g.add(wx, b);
    softplus_node(g, u)
}

fn mlp_ce_node(g: &mut Graph, th: &[NodeRef], arch: &[usize], act: Activation, x: &[f64], class: usize) -> NodeRef {
    let mut offset = 0;
    let mut h: Vec<NodeRef> = Vec::new();
    let layers = arch.len() - 1;
    for (l, w) in arch.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &th[offset..offset + n_in * n_out];
        let bias = &th[offset + n_in * n_out..offset + n_in * n_out + n_out];
        offset += n_out * (n_in + 1);
        let mut next = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let row = &weights[j * n_in..(j + 1) * n_in];
            let pre = if l == 0 { g.weighted_sum(row, x) } else { g.dot(row, &h) };
            let pre = g.add(pre, bias[j]);
            next.push(if l + 1 == layers {
                pre
            } else {
                match act {
                    Activation::Sigmoid => g.sigmoid(pre),
                    Activation::Relu => g.relu(pre),
                }
            });
        }
        h = next;
    }
    // log-sum-exp shifted by the current max logit; the shift is a constant
    let m = h.iter().map(|&z| g.value(z)).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<NodeRef> = h
        .iter()
        .map(|&z| {
            let s = g.offset(z, -m);
            g.exp(s)
        })
        .collect();
    let s = g.sum(&exps);
    let l = g.log(s);
    let lse = g.offset(l, m);
    g.sub(lse, h[class])
}

fn mlp_logits(th: &[f64], arch: &[usize], act: Activation, x: &[f64]) -> Vec<f64> {
    let mut offset = 0;
    let mut h = x.to_vec();
    let layers = arch.len() - 1;
    for (l, w) in arch.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &th[offset..offset + n_in * n_out];
        let bias = &th[offset + n_in * n_out..offset + n_out * (n_in + 1)];
        offset += n_out * (n_in + 1);
        h = (0..n_out)
            .map(|j| {
                let pre = weights[j * n_in..(j + 1) * n_in].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + bias[j];
                if l + 1 == layers {
                    pre
                } else {
                    match act {
                        Activation::Sigmoid => sigmoid(pre),
                        Activation::Relu => pre.max(0.0),
                    }
                }
            })
            .collect();
    }
    h
}
