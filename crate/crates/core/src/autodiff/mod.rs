//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Covers what small MLP classifiers and their losses need: matmul with bias
//! broadcasting, ReLU, exp/log, row softmax, reductions, clamping and column
//! selection. [`finite_diff_grad`] is the numerical oracle used to audit every
//! analytic gradient in the crate.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, grad_mismatch};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::DadaError;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(close(tape.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn softmax_of_log_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2f64.ln(), 0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert!(close(tape.value(y).data(), &[0.5, 0.25, 0.25], 1e-15));
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3, -2.0, 7.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn softmax_mean_matches_finite_differences() {
        let logits = Tensor::new(vec![2, 4], vec![0.3, -1.2, 2.0, 0.5, 1.0, 0.0, -0.7, 0.25]).unwrap();
        let f = |t: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.param(t.clone());
            let p = tape.softmax_rows(x)?;
            let first = tape.select_cols(p, &[0])?;
            let m = tape.mean(first)?;
            tape.backward(m)?;
            Ok((tape.value(m).item(), tape.grad(x).unwrap().to_vec()))
        };
        let (_, analytic) = f(&logits).unwrap();
        let numeric = finite_diff_grad(|t| f(t).map(|r| r.0), &logits, 1e-5).unwrap();
        assert!(grad_mismatch(&analytic, numeric.data(), 1e-5, 1e-10) <= 1.0);
    }

    #[test]
    fn finite_diff_of_linear_and_quadratic() {
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &Tensor::vector(vec![5.0]), 1e-5).unwrap();
        assert!((g.item() - 1.0).abs() < 1e-8);
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &Tensor::vector(vec![3.0]), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_step() {
        let r = finite_diff_grad(|t| Ok(t.item()), &Tensor::vector(vec![1.0]), 0.0);
        assert!(matches!(r, Err(DadaError::InvalidArgument(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            DadaError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn log_of_non_positive_is_a_domain_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(DadaError::Domain { .. })));
        let c = tape.clamp(x, 1e-12, 1.0).unwrap();
        let l = tape.log(c).unwrap();
        assert!(tape.value(l).all_finite());
    }

    #[test]
    fn backward_rejects_non_scalar_repeat_and_foreign_roots() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(DadaError::Backward(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        tape.reset_grads();
        tape.backward(s).unwrap();

        let mut other = Tape::new();
        let y = other.param(Tensor::vector(vec![1.0]));
        let t = other.sum(y).unwrap();
        assert!(matches!(tape.backward(t), Err(DadaError::Backward(_))));
    }

    #[test]
    fn broadcast_column_and_row() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let col = tape.param(Tensor::new(vec![2, 1], vec![10.0, 20.0]).unwrap());
        let row = tape.param(Tensor::vector(vec![1.0, 0.5, 0.25]));
        let a = tape.div(m, col).unwrap();
        let b = tape.mul(a, row).unwrap();
        assert!(close(tape.value(b).data(), &[0.1, 0.1, 0.075, 0.2, 0.125, 0.075], 1e-15));
        let s = tape.sum(b).unwrap();
        tape.backward(s).unwrap();
        // d/dcol_r sum_c m[r,c] row[c] / col_r = -sum_c m[r,c] row[c] / col_r^2
        let gc = tape.grad(col).unwrap();
        assert!((gc[0] - (-(1.0 + 1.0 + 0.75) / 100.0)).abs() < 1e-15);
        assert!((gc[1] - (-(4.0 + 2.5 + 1.5) / 400.0)).abs() < 1e-15);
        let gr = tape.grad(row).unwrap();
        assert!(close(gr, &[0.1 + 0.2, 0.2 + 0.25, 0.3 + 0.3], 1e-15));
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a0 = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.5, 0.2, -0.3]).unwrap();
        let b0 = Tensor::new(vec![3, 2], vec![0.7, -1.1, 0.05, 0.4, -0.6, 0.3]).unwrap();
        let run = |a: &Tensor, b: &Tensor| -> (f64, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let va = tape.param(a.clone());
            let vb = tape.param(b.clone());
            let c = tape.matmul(va, vb).unwrap();
            let e = tape.exp(c).unwrap();
            let s = tape.sum(e).unwrap();
            tape.backward(s).unwrap();
            (tape.value(s).item(), tape.grad(va).unwrap().to_vec(), tape.grad(vb).unwrap().to_vec())
        };
        let (_, ga, gb) = run(&a0, &b0);
        let na = finite_diff_grad(|t| Ok(run(t, &b0).0), &a0, 1e-5).unwrap();
        let nb = finite_diff_grad(|t| Ok(run(&a0, t).0), &b0, 1e-5).unwrap();
        assert!(grad_mismatch(&ga, na.data(), 1e-6, 1e-9) <= 1.0);
        assert!(grad_mismatch(&gb, nb.data(), 1e-6, 1e-9) <= 1.0);
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.5, 2.0]));
        let c = tape.clamp(x, 0.0, 1.0).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gather_select_and_row_sums() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather(x, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0]);
        let sel = tape.select_cols(x, &[1, 2]).unwrap();
        assert_eq!(tape.value(sel).shape(), &[2, 2]);
        let rs = tape.sum_rows(sel).unwrap();
        assert_eq!(tape.value(rs).data(), &[5.0, 11.0]);
        let both = tape.add(rs, g).unwrap();
        let s = tape.sum(both).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 2.0, 1.0, 1.0, 1.0]);
        assert!(tape.gather(x, &[3, 0]).is_err());
    }

    #[test]
    fn repeated_graphs_give_identical_gradients() {
        let build = || {
            let mut tape = Tape::new();
            let w = tape.param(Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.45]).unwrap());
            let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let p = tape.softmax_rows(h).unwrap();
            let c = tape.clamp(p, 1e-12, 1.0).unwrap();
            let l = tape.log(c).unwrap();
            let m = tape.mean(l).unwrap();
            tape.backward(m).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            // Spreads beyond ~36 round the largest entry to exactly 1.0 in f64.
            fn softmax_rows_are_distributions(logits in proptest::collection::vec(-15.0f64..15.0, 2..12)) {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::vector(logits));
                let p = tape.softmax_rows(x).unwrap();
                let data = tape.value(p).data();
                let total: f64 = data.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(data.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
