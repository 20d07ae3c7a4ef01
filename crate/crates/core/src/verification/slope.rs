use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Log-log least-squares fit of residuals against a shrinking scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Absent when any residual is exactly zero.
    pub slope: Option<f64>,
    pub r2: Option<f64>,
}

impl SlopeFit {
    pub fn fit(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(LabError::InvalidArgument("slope fit needs at least two paired points".into()));
        }
        if xs.iter().any(|x| !(*x > 0.0)) || xs.windows(2).any(|w| w[1] >= w[0]) {
            return Err(LabError::InvalidArgument("scales must be positive and strictly decreasing".into()));
        }
        if ys.iter().any(|y| !(*y >= 0.0)) {
            return Err(LabError::InvalidArgument("residuals must be nonnegative".into()));
        }
        if ys.contains(&0.0) {
            return Ok(Self { xs, ys, slope: None, r2: None });
        }
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
        let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
        let slope = sxy / sxx;
        let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy / (sxx * syy)).min(1.0) };
        Ok(Self {
            xs,
            ys,
            slope: Some(slope),
            r2: Some(r2),
        })
    }

    /// Residuals shrink as the scale shrinks.
    pub fn monotone(&self) -> bool {
        self.ys.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        self.slope.is_some_and(|s| (lo..=hi).contains(&s))
    }
}

/// `n` halvings starting at `start`.
pub fn halving(start: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start / f64::powi(2.0, i as i32)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let xs = halving(0.4, 5);
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        let f = SlopeFit::fit(xs, ys).unwrap();
        assert!((f.slope.unwrap() - 2.0).abs() < 1e-12);
        assert!((f.r2.unwrap() - 1.0).abs() < 1e-12);
        assert!(f.monotone());
    }

    #[test]
    fn zero_residuals_have_no_slope() {
        let f = SlopeFit::fit(vec![1.0, 0.5], vec![0.0, 0.0]).unwrap();
        assert!(f.slope.is_none() && !f.slope_within(0.0, 10.0));
    }

    #[test]
    fn rejects_bad_scales() {
        assert!(SlopeFit::fit(vec![0.5, 1.0], vec![1.0, 1.0]).is_err());
        assert!(SlopeFit::fit(vec![1.0, 0.5], vec![-1.0, 1.0]).is_err());
        assert!(SlopeFit::fit(vec![1.0], vec![1.0]).is_err());
    }
}
