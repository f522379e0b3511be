//! Scalar reverse-mode automatic differentiation.
//!
//! The tape records every primitive as a node with a cached `f64` value.
//! Gradients are themselves recorded as nodes ("tape growth"), which makes
//! Hessian-vector products and meta-gradients through them ordinary `grad`
//! calls. Derivative conventions: `relu'(0) = 0`, and `max` sends the whole
//! adjoint to its first argument on ties.

mod backward;
mod graph;

pub use backward::GradResult;
pub use graph::{Graph, NodeRef};

pub(crate) use graph::sigmoid;

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + eps;
            let up = f(&xp);
            xp[i] = orig - eps;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Max over components of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn quadratic(g: &mut Graph, a: &[[f64; 2]; 2], th: &[NodeRef]) -> NodeRef {
        let rows: Vec<NodeRef> = a.iter().map(|r| g.weighted_sum(th, r)).collect();
        let q = g.dot(th, &rows);
        g.scale(q, 0.5)
    }

    fn rosenbrock(g: &mut Graph, th: &[NodeRef]) -> NodeRef {
        let one_minus = g.neg(th[0]);
        let one_minus = g.offset(one_minus, 1.0);
        let t1 = g.square(one_minus);
        let x2 = g.square(th[0]);
        let d = g.sub(th[1], x2);
        let d2 = g.square(d);
        let t2 = g.scale(d2, 100.0);
        g.add(t1, t2)
    }

    /// 2-3-1 tanh/sigmoid network with a squared-error loss on two points.
    fn tiny_mlp(g: &mut Graph, th: &[NodeRef]) -> NodeRef {
        let data = [([0.5, -1.0], 1.0), ([-0.3, 0.8], 0.0)];
        let mut losses = Vec::new();
        for (x, y) in data {
            let mut hidden = Vec::new();
            for j in 0..3 {
                let w = &th[2 * j..2 * j + 2];
                let pre = g.weighted_sum(w, &x);
                let pre = g.add(pre, th[6 + j]);
                hidden.push(g.tanh(pre));
            }
            let out = g.dot(&th[9..12], &hidden);
            let out = g.add(out, th[12]);
            let p = g.sigmoid(out);
            let e = g.offset(p, -y);
            losses.push(g.square(e));
        }
        g.mean(&losses)
    }

    fn mlp_value(x: &[f64]) -> f64 {
        let mut g = Graph::new();
        let th = g.leaves(x);
        let l = tiny_mlp(&mut g, &th);
        g.value(l)
    }

    const MLP_THETA: [f64; 13] = [0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.05, -0.1, 0.2, 0.6, -0.8, 0.4, 0.1];

    #[test]
    fn eval_examples() {
        let mut g = Graph::new();
        let t = g.leaf(2.0);
        let sq = g.square(t);
        let l = g.scale(sq, 0.5);
        assert_eq!(g.eval(l).unwrap(), 2.0);

        let mut g = Graph::new();
        let th = g.leaves(&[1.0, 1.0]);
        let r = rosenbrock(&mut g, &th);
        assert_eq!(g.eval(r).unwrap(), 0.0);
    }

    #[test]
    fn eval_reports_unbound_and_non_finite() {
        let mut g = Graph::new();
        let a = g.unbound_leaf();
        let b = g.exp(a);
        assert!(matches!(g.eval(b), Err(Error::UnboundLeaf(0))));
        g.bind(a, 1000.0);
        assert!(matches!(g.eval(b), Err(Error::NonFinite { node: 1 })));
        g.bind(a, 0.0);
        assert_eq!(g.eval(b).unwrap(), 1.0);
    }

    #[test]
    fn eval_after_rebinding_matches_fresh_build() {
        let mut g = Graph::new();
        let th = g.leaves(&MLP_THETA);
        let l = tiny_mlp(&mut g, &th);
        let first = g.value(l);
        for (n, v) in th.iter().zip([0.0; 13]) {
            g.bind(*n, v);
        }
        let zero = g.eval(l).unwrap();
        assert_eq!(zero.to_bits(), mlp_value(&[0.0; 13]).to_bits());
        for (n, v) in th.iter().zip(MLP_THETA) {
            g.bind(*n, v);
        }
        assert_eq!(g.eval(l).unwrap().to_bits(), first.to_bits());
    }

    #[test]
    fn grad_examples() {
        let mut g = Graph::new();
        let t = g.leaf(2.0);
        let sq = g.square(t);
        let l = g.scale(sq, 0.5);
        let gr = g.grad(l, &[t]).unwrap();
        assert_eq!(gr.values(&g), vec![2.0]);

        let mut g = Graph::new();
        let th = g.leaves(&[1.0, 1.0]);
        let r = rosenbrock(&mut g, &th);
        assert_eq!(g.grad(r, &th).unwrap().values(&g), vec![0.0, 0.0]);
    }

    #[test]
    fn grad_of_unrelated_leaf_is_zero() {
        let mut g = Graph::new();
        let a = g.leaf(3.0);
        let b = g.leaf(4.0);
        let l = g.square(a);
        let gr = g.grad(l, &[a, b]).unwrap();
        assert_eq!(gr.values(&g), vec![6.0, 0.0]);
        assert_eq!(g.value(gr.get(b).unwrap()), 0.0);
    }

    #[test]
    fn tiny_mlp_grad_matches_finite_differences() {
        let mut g = Graph::new();
        let th = g.leaves(&MLP_THETA);
        let l = tiny_mlp(&mut g, &th);
        let ad = g.grad(l, &th).unwrap().values(&g);
        let fd = finite_difference_grad(mlp_value, &MLP_THETA, 1e-5);
        assert!(max_relative_error(&ad, &fd, 1e-8) <= 1e-5);
        let num = g.backward_values(l, &th).unwrap();
        assert!(max_relative_error(&ad, &num, 1e-300) <= 1e-13);
    }

    #[test]
    fn hvp_examples() {
        let a = [[2.0, 1.0], [1.0, 2.0]];
        let mut g = Graph::new();
        let th = g.leaves(&[0.3, -0.7]);
        let l = quadratic(&mut g, &a, &th);
        assert_eq!(g.hvp(l, &th, &[1.0, 0.0]).unwrap(), vec![2.0, 1.0]);
        assert_eq!(g.hvp(l, &th, &[1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        assert!(matches!(g.hvp(l, &th, &[1.0]), Err(Error::DimMismatch { expected: 2, found: 1 })));
    }

    #[test]
    fn tiny_mlp_hvp_matches_finite_differences() {
        let v: Vec<f64> = (0..13).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let mut g = Graph::new();
        let th = g.leaves(&MLP_THETA);
        let l = tiny_mlp(&mut g, &th);
        let hv = g.hvp(l, &th, &v).unwrap();
        let grad_at = |x: &[f64]| {
            let mut g = Graph::new();
            let th = g.leaves(x);
            let l = tiny_mlp(&mut g, &th);
            g.backward_values(l, &th).unwrap()
        };
        let eps = 1e-4;
        let plus: Vec<f64> = MLP_THETA.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
        let minus: Vec<f64> = MLP_THETA.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
        let fd: Vec<f64> = grad_at(&plus).iter().zip(grad_at(&minus)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
        assert!(max_relative_error(&hv, &fd, 1e-8) <= 1e-4);
    }

    #[test]
    fn dense_hessian_examples() {
        let a = [[2.0, 1.0], [1.0, 2.0]];
        let mut g = Graph::new();
        let th = g.leaves(&[1.0, 2.0]);
        let l = quadratic(&mut g, &a, &th);
        let h = g.dense_hessian(l, &th).unwrap();
        assert_eq!(h, nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));

        let mut g = Graph::new();
        let th = g.leaves(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let sq: Vec<NodeRef> = th.iter().map(|&t| g.square(t)).collect();
        let s = g.sum(&sq);
        let l = g.scale(s, 0.5);
        assert_eq!(g.dense_hessian(l, &th).unwrap(), nalgebra::DMatrix::identity(5, 5));

        let mut g = Graph::new();
        let th = g.leaves(&[0.0; 65]);
        let l = g.sum(&th);
        assert!(matches!(g.dense_hessian(l, &th), Err(Error::TooLarge(65))));
    }

    #[test]
    fn hvp_with_basis_vector_is_hessian_column() {
        let mut g = Graph::new();
        let th = g.leaves(&MLP_THETA);
        let l = tiny_mlp(&mut g, &th);
        let h = g.dense_hessian(l, &th).unwrap();
        for i in [0, 4, 12] {
            let mut e = vec![0.0; 13];
            e[i] = 1.0;
            let col = g.hvp(l, &th, &e).unwrap();
            for r in 0..13 {
                assert!((col[r] - h[(r, i)]).abs() <= 1e-12 * (1.0 + h[(r, i)].abs()));
            }
        }
    }

    #[test]
    fn third_derivative_through_tape_growth() {
        let mut g = Graph::new();
        let t = g.leaf(2.0);
        let sq = g.square(t);
        let cube = g.mul(sq, t);
        let d1 = g.grad(cube, &[t]).unwrap().grads()[0];
        assert!((g.value(d1) - 12.0).abs() <= 1e-12);
        let d2 = g.grad(d1, &[t]).unwrap().grads()[0];
        assert!((g.value(d2) - 12.0).abs() <= 1e-12);
        let d3 = g.grad(d2, &[t]).unwrap().grads()[0];
        assert!((g.value(d3) - 6.0).abs() <= 1e-12);
    }

    #[test]
    fn conventions_relu_and_max() {
        let mut g = Graph::new();
        let x = g.leaf(0.0);
        let r = g.relu(x);
        assert_eq!(g.grad(r, &[x]).unwrap().values(&g), vec![0.0]);
        let y = g.leaf(0.0);
        let m = g.max(x, y);
        assert_eq!(g.grad(m, &[x, y]).unwrap().values(&g), vec![1.0, 0.0]);
        assert_eq!(g.backward_values(m, &[x, y]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn grad_wrt_intermediate_nodes_is_partial() {
        // y = 3x; L = y^2 + x. dL/dy treating y as an input is 2y.
        let mut g = Graph::new();
        let x = g.leaf(1.5);
        let y = g.scale(x, 3.0);
        let y2 = g.square(y);
        let l = g.add(y2, x);
        let gr = g.grad(l, &[y]).unwrap().values(&g);
        assert_eq!(gr, vec![9.0]);
        assert_eq!(g.backward_values(l, &[y]).unwrap(), vec![9.0]);
        assert_eq!(g.backward_values(l, &[x]).unwrap(), vec![28.0]);
    }

    #[test]
    fn grad_propagates_non_finite() {
        let mut g = Graph::new();
        let x = g.leaf(0.0);
        let l = g.log(x);
        assert!(matches!(g.grad(l, &[x]), Err(Error::NonFinite { .. })));
        let y = g.leaf(0.0);
        let s = g.sqrt(y);
        assert!(matches!(g.grad(s, &[y]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One expression exercising every differentiable primitive.
        fn build(g: &mut Graph, th: &[NodeRef]) -> NodeRef {
            let (a, b, c) = (th[0], th[1], th[2]);
            let e = g.exp(a);
            let lg = g.log(e);
            let sq = g.square(b);
            let sp = g.offset(sq, 1.0);
            let sr = g.sqrt(sp);
            let d = g.div(lg, sr);
            let t = g.tanh(c);
            let s = g.sigmoid(b);
            let m = g.max(t, s);
            let r = g.relu(a);
            let n = g.neg(r);
            let dt = g.dot(&[d, m, n], &[a, b, c]);
            let w = g.weighted_sum(&[d, m], &[0.3, -1.2]);
            let su = g.sum(&[dt, w]);
            let mu = g.mul(su, c);
            g.sub(mu, s)
        }
        let x = [0.7, -0.4, 0.9];
        let f = |x: &[f64]| {
            let mut g = Graph::new();
            let th = g.leaves(x);
            let l = build(&mut g, &th);
            g.value(l)
        };
        let mut g = Graph::new();
        let th = g.leaves(&x);
        let l = build(&mut g, &th);
        let grads = g.grad(l, &th).unwrap().into_grads();
        let ad = g.values(&grads);
        let fd = finite_difference_grad(f, &x, 1e-6);
        assert!(max_relative_error(&ad, &fd, 1e-8) <= 1e-7, "{ad:?} vs {fd:?}");
        // second derivatives: compare the tape-grown Hessian against FD of gradients
        let h = g.dense_hessian(l, &th).unwrap();
        for i in 0..3 {
            let gi = |x: &[f64]| {
                let mut g = Graph::new();
                let th = g.leaves(x);
                let l = build(&mut g, &th);
                g.backward_values(l, &th).unwrap()[i]
            };
            let fd = finite_difference_grad(gi, &x, 1e-5);
            let row: Vec<f64> = (0..3).map(|j| h[(i, j)]).collect();
            assert!(max_relative_error(&row, &fd, 1e-6) <= 1e-5, "{row:?} vs {fd:?}");
        }
    }

    proptest! {
        #[test]
        fn grad_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, x in proptest::collection::vec(-1.0f64..1.0, 13)) {
            let mut g = Graph::new();
            let th = g.leaves(&x);
            let l1 = tiny_mlp(&mut g, &th);
            let l2 = rosenbrock(&mut g, &th[..2]);
            let s1 = g.scale(l1, a);
            let s2 = g.scale(l2, b);
            let comb = g.add(s1, s2);
            let gc = g.grad(comb, &th).unwrap().values(&g);
            let g1 = g.grad(l1, &th).unwrap().values(&g);
            let g2 = g.grad(l2, &th).unwrap().values(&g);
            for i in 0..13 {
                let expect = a * g1[i] + b * g2[i];
                prop_assert!((gc[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }

        #[test]
        fn hvp_matches_finite_differences_on_random_points(x in proptest::collection::vec(-1.0f64..1.0, 13),
                                                            v in proptest::collection::vec(-1.0f64..1.0, 13)) {
            let mut g = Graph::new();
            let th = g.leaves(&x);
            let l = tiny_mlp(&mut g, &th);
            let hv = g.hvp(l, &th, &v).unwrap();
            let grad_at = |p: &[f64]| {
                let mut g = Graph::new();
                let th = g.leaves(p);
                let l = tiny_mlp(&mut g, &th);
                g.backward_values(l, &th).unwrap()
            };
            let eps = 1e-4;
            let plus: Vec<f64> = x.iter().zip(&v).map(|(t, d)| t + eps * d).collect();
            let minus: Vec<f64> = x.iter().zip(&v).map(|(t, d)| t - eps * d).collect();
            let fd: Vec<f64> = grad_at(&plus).iter().zip(grad_at(&minus)).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            prop_assert!(max_relative_error(&hv, &fd, 1e-6) <= 1e-4);
        }

        #[test]
        fn deterministic_outputs(x in proptest::collection::vec(-1.0f64..1.0, 13)) {
            let run = || {
                let mut g = Graph::new();
                let th = g.leaves(&x);
                let l = tiny_mlp(&mut g, &th);
                let gr = g.grad(l, &th).unwrap().values(&g);
                let hv = g.hvp(l, &th, &x).unwrap();
                (g.value(l).to_bits(), gr.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                 hv.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
