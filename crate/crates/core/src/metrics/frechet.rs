//! Frechet distance between Gaussian fits of patch features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are reported; those between it and zero are
/// treated as rounding noise.
pub const NEGATIVE_EIGEN_WARN: f64 = -1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Column means and unbiased covariance of `features` (rows are samples).
pub fn fit_stats(features: &DMatrix<f64>) -> Result<FeatureStats> {
    let (m, d) = features.shape();
    if m < 2 {
        return Err(Error::TooFew(format!("covariance needs at least 2 feature rows, got {m}")));
    }
    let mu = DVector::from_fn(d, |j, _| features.column(j).sum() / m as f64);
    let mut centered = features.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let mut sigma = centered.transpose() * &centered / (m as f64 - 1.0);
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(FeatureStats { mu, sigma })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrechetDistance {
    /// `raw` clipped at zero.
    pub value: f64,
    pub raw: f64,
    /// `||mu_x - mu_y||^2`
    pub mean_term: f64,
    /// `Tr(S_x + S_y - 2 (S_x S_y)^(1/2))`
    pub trace_term: f64,
    /// Smallest eigenvalue met while taking square roots.
    pub min_eigenvalue: f64,
    pub warnings: Vec<String>,
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
}

/// `Tr((S_x S_y)^(1/2))` computed as `Tr((A S_y A)^(1/2))` with `A = S_x^(1/2)`,
/// which is symmetric and similar to the product.
fn trace_sqrt_product(sx: &DMatrix<f64>, sy: &DMatrix<f64>, min_eig: &mut f64) -> f64 {
    let e = sym_eigen(sx);
    *min_eig = min_eig.min(e.eigenvalues.min());
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    let a = &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose();
    let inner = sym_eigen(&(&a * sy * &a));
    *min_eig = min_eig.min(inner.eigenvalues.min());
    inner.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

pub fn frechet_distance(x: &FeatureStats, y: &FeatureStats) -> Result<FrechetDistance> {
    let d = x.mu.len();
    if y.mu.len() != d || x.sigma.shape() != (d, d) || y.sigma.shape() != (d, d) {
        return Err(Error::shape("feature statistics", format!("dimension {d}"), format!("dimension {}", y.mu.len())));
    }
    let mean_term = (&x.mu - &y.mu).norm_squared();
    let mut min_eigenvalue = f64::INFINITY;
    let tr = trace_sqrt_product(&x.sigma, &y.sigma, &mut min_eigenvalue);
    let trace_term = x.sigma.trace() + y.sigma.trace() - 2.0 * tr;
    let raw = mean_term + trace_term;
    let mut warnings = Vec::new();
    if min_eigenvalue < NEGATIVE_EIGEN_WARN {
        warnings.push(format!("eigenvalue {min_eigenvalue:e} below {NEGATIVE_EIGEN_WARN:e} clipped to 0"));
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite {
            what: "frechet distance".into(),
            step: 0,
        });
    }
    Ok(FrechetDistance {
        value: raw.max(0.0),
        raw,
        mean_term,
        trace_term,
        min_eigenvalue,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_covariance() {
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let s = fit_stats(&f).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(s.sigma, DMatrix::from_element(2, 2, 2.0));
    }

    #[test]
    fn identical_rows_have_zero_covariance() {
        let f = DMatrix::from_fn(5, 3, |_, j| j as f64 * 0.3 + 1.0);
        assert!(fit_stats(&f).unwrap().sigma.iter().all(|&v| v == 0.0));
        assert!(matches!(fit_stats(&DMatrix::zeros(1, 3)), Err(Error::TooFew(_))));
    }

    #[test]
    fn identity_covariances_leave_the_mean_term() {
        let mut mu = DVector::zeros(4);
        mu[0] = 1.0;
        let a = FeatureStats {
            mu,
            sigma: DMatrix::identity(4, 4),
        };
        let b = FeatureStats {
            mu: DVector::zeros(4),
            sigma: DMatrix::identity(4, 4),
        };
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d.value - 1.0).abs() <= 1e-12, "{}", d.value);
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn singular_identical_stats_give_zero() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let s = FeatureStats {
            mu: DVector::from_element(3, 0.2),
            sigma: &v * v.transpose(),
        };
        assert!(frechet_distance(&s, &s).unwrap().value.abs() < 1e-7);
    }
}
