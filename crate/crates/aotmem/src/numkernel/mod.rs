//! Minimal dense numerical kernel: matrices, SVD, least squares, stable
//! softmax, polynomial fitting, and seeded randomness.
//!
//! Everything is 64-bit floats over immutable inputs; all randomness flows
//! through explicit [`Rng`] values.

mod lstsq;
mod matrix;
mod polyfit;
mod rng;
mod softmax;
mod svd;

pub use lstsq::lstsq_min_norm;
pub use matrix::Matrix;
pub use polyfit::{polyfit_ls, FitResult, ModelForm};
pub use rng::Rng;
pub use softmax::{log_softmax, softmax, softmax_inplace};
pub use svd::{singular_values, svd, SvdResult};

/// Default relative tolerance for numeric-rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[cfg(test)]
mod proptests {
    use super::Rng as KernelRng;
    use super::*;
    use proptest::prelude::*;

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..8, 1usize..8, any::<u64>()).prop_map(|(r, c, seed)| {
            let mut rng = KernelRng::seed_from(seed);
            Matrix::random_normal(r, c, 1.0, &mut rng)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn svd_reconstructs(m in small_matrix()) {
            let f = svd(&m, 1e-10).unwrap();
            let err = f.reconstruct().sub(&m).frobenius_norm();
            prop_assert!(err <= 1e-8 * f.sigma_max().max(1.0));
        }

        #[test]
        fn lstsq_recovers_consistent(seed in any::<u64>()) {
            let mut rng = KernelRng::seed_from(seed);
            let a = Matrix::random_normal(5, 3, 1.0, &mut rng);
            let x0 = Matrix::random_normal(3, 2, 1.0, &mut rng);
            let b = a.matmul(&x0);
            let x = lstsq_min_norm(&a, &b, 1e-10).unwrap();
            let err = a.matmul(&x).sub(&b).frobenius_norm();
            prop_assert!(err <= 1e-8);
        }

        #[test]
        fn softmax_normalizes_and_shifts(v in prop::collection::vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
            let p = softmax(&v);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
