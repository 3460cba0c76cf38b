//! Least-squares curve fitting for the scaling-law analyses.

use serde::{Deserialize, Serialize};

use crate::numkernel::{lstsq_min_norm, svd, Matrix};
use crate::{Error, Result};

/// The model forms used by the figure fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelForm {
    /// y = c1 x (through the origin)
    Proportional,
    /// y = c0 + c1 x
    Linear,
    /// y = c0 + c1 x + c2 x^2
    QuadraticInX,
    /// y = c0 + c1 x + c2 x^2 + c3 x^3
    Cubic,
    /// y = b + a x^2, coefficients reported as [b, a]
    AffineQuadratic,
}

impl ModelForm {
    pub fn coeff_count(self) -> usize {
        match self {
            ModelForm::Proportional => 1,
            ModelForm::Linear => 2,
            ModelForm::QuadraticInX => 3,
            ModelForm::Cubic => 4,
            ModelForm::AffineQuadratic => 2,
        }
    }

    fn basis(self, x: f64) -> Vec<f64> {
        match self {
            ModelForm::Proportional => vec![x],
            ModelForm::Linear => vec![1.0, x],
            ModelForm::QuadraticInX => vec![1.0, x, x * x],
            ModelForm::Cubic => vec![1.0, x, x * x, x * x * x],
            ModelForm::AffineQuadratic => vec![1.0, x * x],
        }
    }

    pub fn eval(self, coeffs: &[f64], x: f64) -> f64 {
        self.basis(x)
            .iter()
            .zip(coeffs)
            .map(|(b, c)| b * c)
            .sum()
    }
}

/// Fit coefficients in the order of the model basis (constant term first),
/// with the residual norm and coefficient of determination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub form: ModelForm,
    pub coefficients: Vec<f64>,
    pub residual_norm: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `ys` on `xs` under the requested model form.
pub fn polyfit_ls(xs: &[f64], ys: &[f64], form: ModelForm) -> Result<FitResult> {
    let p = form.coeff_count();
    if xs.len() != ys.len() {
        return Err(Error::DimMismatch(format!(
            "polyfit: {} xs vs {} ys",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < p {
        return Err(Error::InvalidArg(format!(
            "polyfit: {} points for {} coefficients",
            xs.len(),
            p
        )));
    }

    let mut design = Matrix::zeros(xs.len(), p);
    for (i, &x) in xs.iter().enumerate() {
        let row = form.basis(x);
        design.row_mut(i).copy_from_slice(&row);
    }
    let rank = svd(&design, 1e-10)?.numeric_rank;
    if rank < p {
        return Err(Error::DegenerateDesign(format!(
            "design matrix rank {rank} < {p} (are all xs equal?)"
        )));
    }

    let b = Matrix::from_vec(ys.len(), 1, ys.to_vec());
    let sol = lstsq_min_norm(&design, &b, 1e-10)?;
    let coefficients: Vec<f64> = sol.data.clone();

    let residual_norm = design.matmul(&sol).sub(&b).frobenius_norm();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean) * (y - mean)).sum();
    let ss_res = residual_norm * residual_norm;
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };

    Ok(FitResult {
        form,
        coefficients,
        residual_norm,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    #[test]
    fn exact_line() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = polyfit_ls(&xs, &ys, ModelForm::Linear).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-8);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-8);
        assert!(fit.residual_norm < 1e-8);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proportional_through_origin() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        // Data with an offset: the through-origin fit is Sxy/Sxx, not the
        // affine slope.
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let fit = polyfit_ls(&xs, &ys, ModelForm::Proportional).unwrap();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        assert!((fit.coefficients[0] - sxy / sxx).abs() < 1e-12);
        // Pure proportional data comes back exactly.
        let ys2: Vec<f64> = xs.iter().map(|x| -0.5 * x).collect();
        let fit2 = polyfit_ls(&xs, &ys2, ModelForm::Proportional).unwrap();
        assert!((fit2.coefficients[0] + 0.5).abs() < 1e-12);
        assert!(fit2.residual_norm < 1e-12);
    }

    #[test]
    fn exact_affine_quadratic() {
        let xs: Vec<f64> = (1..7).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let fit = polyfit_ls(&xs, &ys, ModelForm::AffineQuadratic).unwrap();
        // coefficients are [b, a] for y = a x^2 + b
        assert!(fit.coefficients[0].abs() < 1e-8);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn noisy_linear_matches_normal_equations() {
        // Independent oracle: solve the 2x2 normal equations directly.
        let mut rng = Rng::seed_from(5);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 4.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x - 2.0 + 0.05 * rng.normal())
            .collect();

        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let det = n * sxx - sx * sx;
        let c0 = (sxx * sy - sx * sxy) / det;
        let c1 = (n * sxy - sx * sy) / det;

        let fit = polyfit_ls(&xs, &ys, ModelForm::Linear).unwrap();
        assert!((fit.coefficients[0] - c0).abs() < 1e-8);
        assert!((fit.coefficients[1] - c1).abs() < 1e-8);
        assert!(fit.r_squared > 0.9 && fit.r_squared <= 1.0);
    }

    #[test]
    fn degenerate_design_rejected() {
        let xs = vec![2.0; 5];
        let ys = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        match polyfit_ls(&xs, &ys, ModelForm::Linear) {
            Err(Error::DegenerateDesign(_)) => {}
            other => panic!("expected degenerate design error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_points_rejected() {
        let r = polyfit_ls(&[1.0, 2.0], &[1.0, 2.0], ModelForm::Cubic);
        assert!(r.is_err());
    }

    #[test]
    fn cubic_roundtrip() {
        let xs: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - x + 2.0 * x * x * x).collect();
        let fit = polyfit_ls(&xs, &ys, ModelForm::Cubic).unwrap();
        let want = [0.5, -1.0, 0.0, 2.0];
        for (c, w) in fit.coefficients.iter().zip(&want) {
            assert!((c - w).abs() < 1e-7, "{:?}", fit.coefficients);
        }
    }
}
