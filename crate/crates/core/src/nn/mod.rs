//! Hand-differentiated convolutional network with domain-specific batch
//! normalisation and a softmax rating head.

mod dsbn;
mod layers;
mod network;
mod real;
mod tensor;

pub use dsbn::{BnState, DomainBranch, DomainId, DEFAULT_EMA_ALPHA, DEFAULT_EPSILON};
pub use layers::{Conv2d, Linear};
pub use network::{
    Architecture, ForwardTrace, Gradients, Layer, Mask, Mode, Network, ParamId, Phase,
};
pub use real::Real;
pub use tensor::{Matrix, Tensor4};

use crate::distmath::RatingDistribution;

/// Row-wise softmax in the logits' own precision, max-shifted.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax of each row as a rating distribution, computed in `f64`.
pub fn softmax<T: Real>(logits: &Matrix<T>) -> Vec<RatingDistribution> {
    softmax_rows(&logits.cast::<f64>())
        .iter_rows()
        .map(|r| RatingDistribution::new(r.to_vec()).expect("softmax rows are simplices"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_logits_are_uniform() {
        let q = softmax(&Matrix::<f64>::zeros(1, 5));
        for p in q[0].probs() {
            assert_abs_diff_eq!(*p, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn shift_invariance() {
        let a = Matrix::new(1, 5, vec![0.3, -1.0, 2.0, 0.0, 1.5]).unwrap();
        let b = Matrix::new(1, 5, a.data().iter().map(|v| v + 1000.0).collect()).unwrap();
        for (x, y) in softmax(&a)[0].probs().iter().zip(softmax(&b)[0].probs()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_reference() {
        // mpmath, tests/oracles/reference_values.py
        let want = [
            0.011_656_230_956_039_607,
            0.031_684_920_796_124_27,
            0.086_128_544_436_268_7,
            0.234_121_657_252_736_62,
            0.636_408_646_558_830_8,
        ];
        let q = softmax(&Matrix::new(1, 5, vec![1.0f64, 2.0, 3.0, 4.0, 5.0]).unwrap());
        for (g, w) in q[0].probs().iter().zip(want) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-15);
        }
    }

    proptest! {
        #[test]
        fn f32_rows_sum_to_one(v in proptest::collection::vec(-60.0f32..60.0, 5 * 4)) {
            let q = softmax_rows(&Matrix::new(4, 5, v).unwrap());
            for r in q.iter_rows() {
                let s: f32 = r.iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6);
            }
        }
    }
}
