use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-9;
/// Negative eigenvalues down to `-PSD_TOL * max(1, largest |eigenvalue|)`
/// are treated as rounding noise and clamped to zero.
const PSD_TOL: f64 = 1e-8;

/// Mean and covariance of a set of activation vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl ActivationStats {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, count: usize) -> Result<Self> {
        let s = Self {
            mean,
            covariance,
            count,
        };
        s.validate()?;
        Ok(s)
    }

    /// Sample mean and unbiased covariance; needs at least two samples.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid(
                "activation statistics need at least two samples",
            ));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::invalid(
                "activation samples must share a nonzero dimension",
            ));
        }
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for s in samples {
            for i in 0..d {
                let di = s[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (s[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    /// Diagonal-covariance statistics.
    pub fn diagonal(mean: Vec<f64>, variances: &[f64], count: usize) -> Result<Self> {
        let d = variances.len();
        let mut cov = vec![0.0; d * d];
        for (i, v) in variances.iter().enumerate() {
            cov[i * d + i] = *v;
        }
        Self::new(mean, cov, count)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.covariance.len() != d * d {
            return Err(Error::invalid(format!(
                "covariance has {} entries, expected {}",
                self.covariance.len(),
                d * d
            )));
        }
        if self
            .mean
            .iter()
            .chain(&self.covariance)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("activation statistics must be finite"));
        }
        for i in 0..d {
            for j in i + 1..d {
                if (self.covariance[i * d + j] - self.covariance[j * d + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::invalid(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.covariance);
        (&m + m.transpose()) * 0.5
    }
}

/// Eigen-decomposition of a symmetric matrix with tiny negative eigenvalues
/// clamped; fails if any is clearly negative.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::NotPsd(format!("{what} has a non-finite eigenvalue")));
        }
        if *v < -PSD_TOL * scale {
            return Err(Error::NotPsd(format!("{what} has eigenvalue {v:e}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn psd_sqrt(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let root = eig.eigenvalues.map(f64::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// ‖μ_p − μ_q‖² + Tr(Σ_p + Σ_q − 2 (Σ_p Σ_q)^{1/2}).
///
/// The trace of the product root is evaluated as
/// `Tr((Σ_p^{1/2} Σ_q Σ_p^{1/2})^{1/2})`, whose argument is symmetric PSD.
pub fn frechet_distance(p: &ActivationStats, q: &ActivationStats) -> Result<f64> {
    p.validate()?;
    q.validate()?;
    if p.dim() != q.dim() {
        return Err(Error::invalid(format!(
            "statistics dimensions differ: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    let mean_term = DVector::from_column_slice(&p.mean)
        .metric_distance(&DVector::from_column_slice(&q.mean))
        .powi(2);
    let (sp, sq) = (p.cov_matrix(), q.cov_matrix());
    psd_eigen(sq.clone(), "second covariance")?;
    let root_p = psd_sqrt(sp.clone(), "first covariance")?;
    let inner = &root_p * &sq * &root_p;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = psd_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let d = mean_term + sp.trace() + sq.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
