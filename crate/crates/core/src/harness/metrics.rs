use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::ExperimentConfig;
use super::run::TrajectoryRecord;
use crate::error::{LabError, Result};
use crate::models::PromptSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mean_h: f64,
    /// Absent for a single sample.
    pub se_h: Option<f64>,
    /// Sampler timesteps in sampling order, aligned with `trace_mean_h`.
    pub trace_t: Vec<usize>,
    /// Mean `h(x̄₀)` per sampler step.
    pub trace_mean_h: Vec<f64>,
    pub sample_mean: Vec<f64>,
    pub sample_cov: Vec<Vec<f64>>,
    pub true_mean: Vec<f64>,
    pub true_cov: Vec<Vec<f64>>,
    pub frechet: f64,
    pub mean_updates: f64,
    pub config_hash: String,
}

pub fn mean_and_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, None);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Sample mean and unbiased covariance; zero covariance for one sample.
pub fn moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = xs.len();
    let d = xs[0].len();
    let mean: Vec<f64> = (0..d).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n as f64).collect();
    let denom = (n.max(2) - 1) as f64;
    let cov = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if n < 2 {
                        0.0
                    } else {
                        xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / denom
                    }
                })
                .collect()
        })
        .collect();
    (mean, cov)
}

fn to_matrix(s: &[Vec<f64>]) -> DMatrix<f64> {
    let n = s.len();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (s[i][j] + s[j][i]))
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| *v < -1e-10 * scale) {
        return Err(LabError::InvalidArgument(format!("{what} is not positive semidefinite")));
    }
    let root = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `‖μ₁−μ₂‖² + tr(S₁ + S₂ − 2 (S₁^{½} S₂ S₁^{½})^{½})`.
pub fn gaussian_frechet(mu1: &[f64], s1: &[Vec<f64>], mu2: &[f64], s2: &[Vec<f64>]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.len() != d || s2.len() != d || s1.iter().chain(s2).any(|r| r.len() != d) {
        return Err(LabError::DimensionMismatch {
            expected: d,
            got: mu2.len(),
            context: "frechet moments",
        });
    }
    let (a, b) = (to_matrix(s1), to_matrix(s2));
    let ra = psd_sqrt(&a, "first covariance")?;
    psd_sqrt(&b, "second covariance")?;
    let inner = &ra * &b * &ra;
    let cross: f64 = SymmetricEigen::new(0.5 * (&inner + inner.transpose()))
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let dmu: f64 = mu1.iter().zip(mu2).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((dmu + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// First 16 hex digits of the SHA-256 of the config's JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn compute_metrics(records: &[TrajectoryRecord], cfg: &ExperimentConfig, truth: &PromptSet) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(LabError::InvalidArgument("no records to summarize".into()));
    }
    let finals: Vec<f64> = records.iter().map(|r| r.h_final).collect();
    let (mean_h, se_h) = mean_and_se(&finals);
    let n_steps = records[0].steps.len();
    let trace_t = records[0].steps.iter().map(|s| s.t).collect();
    let trace_mean_h = (0..n_steps)
        .map(|i| records.iter().map(|r| r.steps[i].h).sum::<f64>() / records.len() as f64)
        .collect();
    let xs: Vec<Vec<f64>> = records.iter().map(|r| r.x0.clone()).collect();
    let (sample_mean, sample_cov) = moments(&xs);
    let (true_mean, true_cov) = truth.conditional_moments(cfg.prompt)?;
    let frechet = gaussian_frechet(&sample_mean, &sample_cov, &true_mean, &true_cov)?;
    Ok(MetricsReport {
        n: records.len(),
        mean_h,
        se_h,
        trace_t,
        trace_mean_h,
        sample_mean,
        sample_cov,
        true_mean,
        true_cov,
        frechet,
        mean_updates: records.iter().map(|r| r.updates as f64).sum::<f64>() / records.len() as f64,
        config_hash: config_hash(cfg),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    /// Mean of `a − b`.
    pub mean_diff: f64,
    pub se_diff: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p_two_sided: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p_greater: f64,
}

/// Paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(LabError::InvalidArgument("paired test needs two equal samples of size >= 2".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean_diff, se) = mean_and_se(&diffs);
    let se_diff = se.expect("n >= 2");
    let n = a.len();
    if se_diff == 0.0 {
        let p = if mean_diff == 0.0 { 1.0 } else { 0.0 };
        let p_greater = if mean_diff > 0.0 { 0.0 } else { 1.0 };
        return Ok(PairedTest {
            n,
            mean_diff,
            se_diff,
            t: if mean_diff == 0.0 { 0.0 } else { mean_diff.signum() * f64::INFINITY },
            p_two_sided: p,
            p_greater,
        });
    }
    let t = mean_diff / se_diff;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    Ok(PairedTest {
        n,
        mean_diff,
        se_diff,
        t,
        p_two_sided: 2.0 * dist.cdf(-t.abs()),
        p_greater: dist.sf(t),
    })
}
