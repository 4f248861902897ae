//! Minimal reverse-mode automatic differentiation over dense rank-0/1/2
//! `f64` arrays.
//!
//! A [`Graph`] is a tape: each op evaluates eagerly, appends a node, and
//! returns a [`Var`] handle. [`Graph::backward`] walks the tape once in
//! reverse. Broadcasting is limited to scalar-with-tensor.
//!
//! Subgradients at kinks are zero: `relu'(0) = 0`, `|x|'(0) = 0`,
//! `max(0, x)'(0) = 0`.
//!
//! A graph is single-threaded. Build one graph per worker and move the
//! resulting [`Tensor`]s between threads.

mod conv;
mod graph;
mod tensor;

pub use graph::{BinaryOp, CustomOp, Graph, KinkLog, UnaryOp, Var};
pub use tensor::{Shape, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::gradcheck::{check_gradients, FdSettings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Direct sliding-window evaluation with explicit 3-D kernel indexing.
    fn conv_oracle(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64]) -> Vec<Vec<f64>> {
        let len = x.len();
        let k = w.len();
        let c_in = x[0].len();
        let c_out = b.len();
        let pad = (k as isize - 1) / 2;
        let mut out = vec![vec![0.0; c_out]; len];
        for (t, row) in out.iter_mut().enumerate() {
            for (co, o) in row.iter_mut().enumerate() {
                let mut acc = b[co];
                for (j, wj) in w.iter().enumerate() {
                    let s = t as isize + j as isize - pad;
                    if s < 0 || s >= len as isize {
                        continue;
                    }
                    for ci in 0..c_in {
                        acc += x[s as usize][ci] * wj[ci][co];
                    }
                }
                *o = acc;
            }
        }
        out
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = g.constant(Tensor::matrix(4, 3, data.clone()).unwrap());
        let mut eye = vec![0.0; 9];
        for c in 0..3 {
            eye[c * 3 + c] = 1.0;
        }
        let w = g.constant(Tensor::matrix(3, 3, eye).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0; 3]));
        let y = g.conv1d(x, w, b, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv1d_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (len, c_in, c_out, k) = (8, 3, 2, 3);
        let x = random(&mut rng, len * c_in, -2.0, 2.0);
        let w = random(&mut rng, k * c_in * c_out, -2.0, 2.0);
        let b = random(&mut rng, c_out, -2.0, 2.0);

        let mut g = Graph::new();
        let xv = g.constant(Tensor::matrix(len, c_in, x.clone()).unwrap());
        let wv = g.constant(Tensor::matrix(k * c_in, c_out, w.clone()).unwrap());
        let bv = g.constant(Tensor::vector(b.clone()));
        let y = g.conv1d(xv, wv, bv, k).unwrap();

        let x3: Vec<Vec<f64>> = x.chunks(c_in).map(|r| r.to_vec()).collect();
        let w3: Vec<Vec<Vec<f64>>> = w
            .chunks(c_in * c_out)
            .map(|tap| tap.chunks(c_out).map(|r| r.to_vec()).collect())
            .collect();
        let expected = conv_oracle(&x3, &w3, &b);
        for t in 0..len {
            for co in 0..c_out {
                let got = g.value(y).data()[t * c_out + co];
                assert!((got - expected[t][co]).abs() <= 1e-12, "t={t} co={co}");
            }
        }
    }

    #[test]
    fn conv1d_preserves_length_for_odd_kernels() {
        for k in [1, 3, 5, 9, 13] {
            for len in [1, 2, 7, 16] {
                let mut g = Graph::new();
                let x = g.constant(Tensor::zeros(Shape::Matrix(len, 2)));
                let w = g.constant(Tensor::zeros(Shape::Matrix(k * 2, 3)));
                let b = g.constant(Tensor::zeros(Shape::Vector(3)));
                let y = g.conv1d(x, w, b, k).unwrap();
                assert_eq!(g.value(y).shape(), Shape::Matrix(len, 3));
            }
        }
    }

    #[test]
    fn conv1d_rejects_channel_mismatch_and_even_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::Matrix(5, 2)));
        let w = g.constant(Tensor::zeros(Shape::Matrix(9, 4)));
        let b = g.constant(Tensor::zeros(Shape::Vector(4)));
        assert!(matches!(g.conv1d(x, w, b, 3), Err(Error::Shape(_))));
        let w2 = g.constant(Tensor::zeros(Shape::Matrix(4, 4)));
        assert!(matches!(g.conv1d(x, w2, b, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn conv1d_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, c_in, c_out, k) = (8, 3, 2, 3);
        let inputs = vec![
            Tensor::matrix(len, c_in, random(&mut rng, len * c_in, -2.0, 2.0)).unwrap(),
            Tensor::matrix(k * c_in, c_out, random(&mut rng, k * c_in * c_out, -2.0, 2.0)).unwrap(),
            Tensor::vector(random(&mut rng, c_out, -2.0, 2.0)),
        ];
        let outcome = check_gradients(&inputs, &FdSettings::default(), None, |g, v| {
            let y = g.conv1d(v[0], v[1], v[2], k)?;
            g.sum(y)
        })
        .unwrap();
        assert_eq!(outcome.checked, len * c_in + k * c_in * c_out + c_out);
        assert!(outcome.max_rel_error <= 1e-4, "{outcome:?}");
    }

    #[test]
    fn kink_ops_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let p = g.max_with_zero(x).unwrap();
        let m = g.neg_min_with_zero(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(g.value(m).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn subgradients_at_kinks_are_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]));
        let a = g.relu(x).unwrap();
        let b = g.abs(x).unwrap();
        let c = g.max_with_zero(x).unwrap();
        let d = g.neg_min_with_zero(x).unwrap();
        let s1 = g.add(a, b).unwrap();
        let s2 = g.add(c, d).unwrap();
        let s = g.add(s1, s2).unwrap();
        let loss = g.sum(s).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unary = [
            UnaryOp::Relu,
            UnaryOp::Sigmoid,
            UnaryOp::Abs,
            UnaryOp::MaxWithZero,
            UnaryOp::NegMinWithZero,
            UnaryOp::SmoothL1,
        ];
        for op in unary {
            let t = Tensor::vector(random(&mut rng, 16, -2.0, 2.0));
            let out = check_gradients(&[t], &FdSettings::default(), None, |g, v| {
                let y = g.unary(op, v[0])?;
                let w = g.constant(Tensor::vector((0..16).map(|i| 0.3 + i as f64 * 0.1).collect()));
                let z = g.mul(y, w)?;
                g.sum(z)
            })
            .unwrap();
            assert!(out.max_rel_error <= 1e-4, "{op:?}: {out:?}");
        }
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            let a = Tensor::vector(random(&mut rng, 6, -2.0, 2.0));
            let b = Tensor::vector(random(&mut rng, 6, -2.0, 2.0));
            let s = Tensor::scalar(rng.random_range(-2.0..2.0));
            let out = check_gradients(&[a, b, s], &FdSettings::default(), None, |g, v| {
                let y = g.binary(op, v[0], v[1])?;
                let y = g.binary(op, y, v[2])?;
                let y = g.binary(op, v[2], y)?;
                let y = g.sigmoid(y)?;
                g.sum(y)
            })
            .unwrap();
            assert!(out.max_rel_error <= 1e-4, "{op:?}: {out:?}");
        }
    }

    #[test]
    fn binary_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let m = g.constant(Tensor::zeros(Shape::Matrix(1, 2)));
        assert!(matches!(g.mul(a, m), Err(Error::Shape(_))));
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item(), Some(2.0));
        let z = g.constant(Tensor::zeros(Shape::Vector(4)));
        let s = g.sum(z).unwrap();
        assert_eq!(g.value(s).item(), Some(0.0));
        let e = g.constant(Tensor::vector(vec![]));
        assert!(matches!(g.sum(e), Err(Error::EmptyReduction)));
        assert!(matches!(g.mean(e), Err(Error::EmptyReduction)));

        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn mean_gradient_matches_finite_differences() {
        let t = Tensor::vector(vec![0.3, -1.2, 0.7, 1.9, -0.4]);
        let out = check_gradients(&[t], &FdSettings::default(), None, |g, v| g.mean(v[0])).unwrap();
        assert!(out.max_rel_error <= 1e-4);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.5));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

        // A second pass without zero_grad accumulates.
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_and_skips_constants() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::vector(vec![5.0, 6.0]));
        let y = g.mul(x, c).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.0, 6.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.ln(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn slice_flatten_pairwise_gradients() {
        let t = Tensor::vector(vec![0.2, -0.7, 1.3, 0.9, -1.6]);
        let out = check_gradients(&[t], &FdSettings::default(), None, |g, v| {
            let s = g.slice(v[0], 1, 3)?;
            let d = g.pairwise_diff(s)?;
            let f = g.flatten(d);
            let sq = g.mul(f, f)?;
            let a = g.sum(sq)?;
            let b = g.sigmoid(v[0])?;
            let b = g.sum(b)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(out.max_rel_error <= 1e-4, "{out:?}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(16, 4, random(&mut rng, 64, -2.0, 2.0)).unwrap());
            let w = g.constant(Tensor::matrix(20, 3, random(&mut rng, 60, -1.0, 1.0)).unwrap());
            let b = g.constant(Tensor::vector(random(&mut rng, 3, -1.0, 1.0)));
            let y = g.conv1d(x, w, b, 5).unwrap();
            let y = g.sigmoid(y).unwrap();
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
