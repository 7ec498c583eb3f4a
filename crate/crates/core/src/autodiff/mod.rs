//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Inputs enter
//! either as [`Graph::leaf`] (differentiable) or [`Graph::constant`];
//! [`Graph::backward`] then walks the tape in reverse from a scalar root and
//! adds ∂root/∂node into each differentiable node's gradient buffer.
//! Gradients accumulate across calls until [`Graph::zero_grad`].
//!
//! ```
//! use tailforge::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.mean(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x), &[1.0, 2.0]);
//! ```
//!
//! A graph is single-threaded; build one per thread.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_gradient, grad_check, numerical_gradient, DEFAULT_EPSILON};
pub use graph::{Graph, NodeRecord, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    /// Random values with magnitude at least `gap`, so ReLU kinks are avoided.
    fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.random_range(gap..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect::<Vec<_>>();
        t(shape, &data)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let n = g.l2_normalize(x).unwrap();
        let v = g.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        assert!(matches!(
            g.l2_normalize(x),
            Err(Error::ZeroNorm { row: 1, .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 3], &mut rng);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.7));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mean_square() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x), &[1.0, 2.0]);
    }

    #[test]
    fn relu_gates_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0, 1.0]);

        // Subgradient at exactly zero is zero.
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[0.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[0.0]);
    }

    #[test]
    fn backward_twice_doubles() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -3.0]));
        let e = g.exp(x);
        let y = g.mul(e, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let once = g.grad(x).to_vec();
        g.backward(s).unwrap();
        for (a, b) in g.grad(x).iter().zip(&once) {
            assert_eq!(*a, 2.0 * b);
        }
        g.zero_grad();
        assert!(g.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn fresh_nodes_have_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[4], 2.0));
        let y = g.scale(x, 3.0);
        assert!(g.grad(x).iter().chain(g.grad(y)).all(|&v| v == 0.0));
        assert_eq!(g.grad(y).len(), g.value(y).numel());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 3.0));
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(c), &[0.0, 0.0]);
        assert_eq!(g.grad(x), &[3.0, 3.0]);
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 2], 1.0));
        let b = g.matmul(a, a).unwrap();
        let c = g.relu(b);
        let _ = g.sum(c);
        for rec in g.records() {
            assert!(rec.inputs.iter().all(|i| i.id() < rec.output.id()));
        }
        assert_eq!(g.records()[1].op, "matmul");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(t(
            &[4, 5],
            &random(&[4, 5], &mut rng)
                .data()
                .iter()
                .map(|v| v * 30.0)
                .collect::<Vec<_>>(),
        ));
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        for r in 0..4 {
            let row = g.value(s).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (p, lp) in row.iter().zip(g.value(ls).row(r)) {
                assert!((p.ln() - lp).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pairwise_distance_matches_direct_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[4, 3], &mut rng);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let d = g.pairwise_sq_dist(av, av).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let direct: f64 = a
                    .row(i)
                    .iter()
                    .zip(a.row(j))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum();
                assert!((g.value(d).get2(i, j) - direct).abs() < 1e-12);
                assert!(g.value(d).get2(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn concat_along_both_axes() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = g.concat(&[b, b], 0).unwrap();
        assert_eq!(g.shape(d), &[4, 2]);
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn conv2d_matches_hand_computation() {
        // 1×1×3×3 input, single 2×2 kernel of ones, no padding: each output
        // is the sum of a 2×2 window.
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, Some(b), 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[12.5, 16.5, 24.5, 28.5]);
        let same = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.shape(same), &[1, 1, 4, 4]);
        assert_eq!(g.value(same).data()[0], 1.0);
    }

    fn check(f: impl Fn(&mut Graph, Var) -> crate::Result<Var>, x: &Tensor) {
        let err = grad_check(f, x, DEFAULT_EPSILON).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn sum_grad_check_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4], &mut rng);
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, DEFAULT_EPSILON).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let x = t(&[1], &[-1.0]);
        let r = grad_check(
            |g, v| {
                let l = g.log(v);
                Ok(g.sum(l))
            },
            &x,
            DEFAULT_EPSILON,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 0.0).is_err());
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let other = random(&[3, 4], &mut rng);
            let weights = random(&[3, 4], &mut rng);
            // Weighted sum gives every output coordinate a distinct upstream grad.
            let reduce = move |g: &mut Graph, y: Var| -> crate::Result<Var> {
                let w = g.constant(Tensor::new(
                    g.shape(y).to_vec(),
                    weights.data()[..g.value(y).numel()].to_vec(),
                )?);
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            };
            let x = random(&[3, 4], &mut rng);
            let o = other.clone();
            check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let y = g.add(v, c)?;
                    reduce(g, y)
                },
                &x,
            );
            let o = other.clone();
            check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let y = g.sub(c, v)?;
                    reduce(g, y)
                },
                &x,
            );
            let o = other.clone();
            check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let y = g.mul(v, c)?;
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.mul(v, v)?;
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.scale(v, -2.5);
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.add_scalar(v, 0.3);
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.exp(v);
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let a = g.mul(v, v)?;
                    let b = g.add_scalar(a, 0.5);
                    let y = g.log(b);
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let a = g.mul(v, v)?;
                    let b = g.add_scalar(a, 0.5);
                    let y = g.powf(b, 2.5);
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.softmax(v)?;
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.log_softmax(v)?;
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.l2_normalize(v)?;
                    reduce(g, y)
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.transpose(v)?;
                    let y = g.transpose(y)?;
                    reduce(g, y)
                },
                &x,
            );
            let o = other.clone();
            check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let d = g.pairwise_sq_dist(v, c)?;
                    let s = g.mul(d, d)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            check(
                |g, v| {
                    let d = g.pairwise_sq_dist(v, v)?;
                    let s = g.mul(d, d)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.gather_rows(v, &[2, 0, 2])?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.sum_rows(v)?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.mean(v);
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            let o = other.clone();
            check(
                |g, v| {
                    let c = g.constant(o.clone());
                    let y = g.concat(&[v, c, v], 1)?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            check(
                |g, v| {
                    let y = g.reshape(v, &[4, 3])?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );

            let rhs = random(&[4, 2], &mut rng);
            let r2 = rhs.clone();
            check(
                |g, v| {
                    let c = g.constant(r2.clone());
                    let y = g.matmul(v, c)?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &x,
            );
            let lhs = x.clone();
            check(
                |g, v| {
                    let c = g.constant(lhs.clone());
                    let y = g.matmul(c, v)?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &rhs,
            );
            let bias = random(&[4], &mut rng);
            let xx = x.clone();
            check(
                |g, v| {
                    let c = g.constant(xx.clone());
                    let y = g.add_row(c, v)?;
                    let s = g.mul(y, y)?;
                    Ok(g.sum(s))
                },
                &bias,
            );

            let gapped = away_from_zero(&[3, 4], 1e-3, &mut rng);
            check(
                |g, v| {
                    let y = g.relu(v);
                    reduce(g, y)
                },
                &gapped,
            );

            let img = random(&[2, 2, 4, 4], &mut rng);
            let kern = random(&[3, 2, 3, 3], &mut rng);
            let cb = random(&[3], &mut rng);
            let (k1, b1) = (kern.clone(), cb.clone());
            let sq = |g: &mut Graph, y: Var| -> crate::Result<Var> {
                let s = g.mul(y, y)?;
                Ok(g.sum(s))
            };
            check(
                |g, v| {
                    let w = g.constant(k1.clone());
                    let b = g.constant(b1.clone());
                    let y = g.conv2d(v, w, Some(b), 1)?;
                    sq(g, y)
                },
                &img,
            );
            let (i2, b2) = (img.clone(), cb.clone());
            check(
                |g, v| {
                    let x = g.constant(i2.clone());
                    let b = g.constant(b2.clone());
                    let y = g.conv2d(x, v, Some(b), 0)?;
                    sq(g, y)
                },
                &kern,
            );
            let (i3, k3) = (img.clone(), kern.clone());
            check(
                |g, v| {
                    let x = g.constant(i3.clone());
                    let w = g.constant(k3.clone());
                    let y = g.conv2d(x, w, Some(v), 1)?;
                    sq(g, y)
                },
                &cb,
            );
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x = random(&[3, 3], &mut rng);
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let f = |g: &mut Graph, v: Var| -> crate::Result<Var> {
                let s = g.softmax(v)?;
                let l = g.log_softmax(v)?;
                let p = g.mul(s, l)?;
                Ok(g.sum(p))
            };
            let h = |g: &mut Graph, v: Var| -> crate::Result<Var> {
                let m = g.matmul(v, v)?;
                let e = g.exp(m);
                Ok(g.mean(e))
            };
            let gf = analytic_gradient(&f, &x).unwrap();
            let gh = analytic_gradient(&h, &x).unwrap();
            let combined = analytic_gradient(
                &|g: &mut Graph, v: Var| {
                    let fv = f(g, v)?;
                    let hv = h(g, v)?;
                    let fa = g.scale(fv, a);
                    let hb = g.scale(hv, b);
                    g.add(fa, hb)
                },
                &x,
            )
            .unwrap();
            for i in 0..9 {
                assert!((combined[i] - (a * gf[i] + b * gh[i])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[5, 4], &mut rng);
        let run = || {
            analytic_gradient(
                &|g: &mut Graph, v: Var| {
                    let n = g.l2_normalize(v)?;
                    let t = g.transpose(n)?;
                    let s = g.matmul(n, t)?;
                    let l = g.log_softmax(s)?;
                    Ok(g.mean(l))
                },
                &x,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
