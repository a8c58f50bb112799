//! Reverse-mode automatic differentiation over dense rank-0/1/2 tensors.
//!
//! The op set is deliberately small: matrix product, elementwise add, sub and
//! product, scaling by a constant, transpose, relu, sum of squares, and the
//! quadratic form `eps^T pi eps`. That is exactly what precision-weighted
//! squared-error objectives need, and a small closed set keeps every op's
//! adjoint hand-verifiable against finite differences.

mod check;
mod ops;
mod tape;
mod tensor;

pub use check::{finite_diff_check, FdFailure, FdReport, FD_STEP, FD_TOL};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Shape, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::GpcError;

    #[test]
    fn matmul_identity_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let eye = Tensor::identity(3);
        let y = tape.matmul(&eye, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(&x);
        let root = tape.sum_of_squares(&r);
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 0.0, 4.0]);
    }

    #[test]
    fn quadratic_form_with_identity_precision() {
        let mut tape = Tape::new();
        let eps = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let pi = Tensor::identity(2);
        let e = tape.quadratic_form(&eps, &pi).unwrap();
        assert_eq!(e.scalar_value(), 5.0);

        let grads = tape.backward(&e).unwrap();
        assert_eq!(grads.wrt(&eps).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![3.0]));
        let s = tape.sum_of_squares(&x);
        assert_eq!(s.scalar_value(), 9.0);
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn quadratic_form_precision_gradient_is_outer_product() {
        let mut tape = Tape::new();
        let eps = Tensor::vector(vec![1.0, 2.0]);
        let pi = tape.leaf(Tensor::matrix(2, 2, vec![2.0, 0.5, 0.5, 1.0]));
        let e = tape.quadratic_form(&eps, &pi).unwrap();
        let grads = tape.backward(&e).unwrap();
        assert_eq!(grads.wrt(&pi).unwrap().data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn untaped_inputs_evaluate_without_recording() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::vector(vec![1.0, 1.0]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
        assert!(y.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_mix_with_taped_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = Tensor::vector(vec![10.0, 20.0]);
        let y = tape.add(&x, &c).unwrap();
        let root = tape.sum_of_squares(&y);
        let grads = tape.backward(&root).unwrap();
        // d/dx sum (x + c)^2 = 2 (x + c)
        assert_eq!(grads.wrt(&x).unwrap().data(), &[22.0, 44.0]);
        assert!(grads.wrt(&c).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // root = sum_sq(x) + sum_sq(2x) so d/dx = 2x + 8x = 10x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -3.0]));
        let a = tape.sum_of_squares(&x);
        let two_x = tape.scale(&x, 2.0);
        let b = tape.sum_of_squares(&two_x);
        let root = tape.add(&a, &b).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[10.0, -30.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.scale(&x, 3.0);
        assert!(matches!(tape.backward(&y), Err(GpcError::NonScalarRoot(_))));
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn composite_expression_matches_finite_differences() {
        // E = qf(relu(W x) - b, pi) + sum_sq(W^T u), a stand-in for the kind
        // of expression the layer objective builds.
        let w = Tensor::matrix(3, 2, vec![0.4, -0.7, 1.2, 0.3, -0.5, 0.9]);
        let x = Tensor::vector(vec![0.8, -0.6]);
        let b = Tensor::vector(vec![0.1, -0.2, 0.3]);
        let pi = Tensor::matrix(3, 3, vec![2.0, 0.3, 0.0, 0.3, 1.5, 0.1, 0.0, 0.1, 1.0]);
        let u = Tensor::vector(vec![0.5, -1.1, 0.2]);

        let report = finite_diff_check(
            |tape, leaves| {
                let (w, x, b, pi, u) = (&leaves[0], &leaves[1], &leaves[2], &leaves[3], &leaves[4]);
                let wx = tape.matmul(w, x)?;
                let act = tape.relu(&wx);
                let eps = tape.sub(&act, b)?;
                let e1 = tape.quadratic_form(&eps, pi)?;
                let wt = tape.transpose(w)?;
                let wu = tape.matmul(&wt, u)?;
                let e2 = tape.sum_of_squares(&wu);
                tape.add(&e1, &e2)
            },
            &[w, x, b, pi, u],
            FD_TOL,
        )
        .unwrap();

        assert!(
            report.passed(),
            "max rel err {} failures {:?}",
            report.max_rel_err,
            report.failures
        );
        assert_eq!(report.checks, 6 + 2 + 3 + 9 + 3);
    }

    #[test]
    fn gradient_of_unreached_leaf_reads_back_as_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(Tensor::vector(vec![3.0]));
        let root = tape.sum_of_squares(&x);
        let grads = tape.backward(&root).unwrap();
        assert!(grads.wrt(&y).is_none());
        assert_eq!(grads.wrt_or_zero(&y).data(), &[0.0]);
    }
}
