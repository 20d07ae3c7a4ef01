//! Noise schedules, forward perturbation, the Tweedie posterior mean and the
//! three reverse-step rules (deterministic drift step, ancestral DDPM, DDIM η=0).
//!
//! Timesteps run 1..=T; `ᾱ_0 = 1` is implicit.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds β (constant or affine ramp), the running product ᾱ and the DDPM
    /// posterior standard deviations `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn new(steps: usize, kind: ScheduleKind, beta_lo: f64, beta_hi: f64) -> Result<Self> {
        if steps == 0 {
            return Err(LabError::InvalidSchedule("T must be at least 1".into()));
        }
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta_lo) || !in_unit(beta_hi) || beta_lo > beta_hi {
            return Err(LabError::InvalidSchedule(format!(
                "need 0 < beta_lo <= beta_hi < 1, got {beta_lo}, {beta_hi}"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Constant => vec![beta_lo; steps],
            ScheduleKind::Linear if steps == 1 => vec![beta_lo],
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_lo + (beta_hi - beta_lo) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(LabError::InvalidSchedule("T must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(LabError::InvalidSchedule(format!("beta {b} outside (0,1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut sigmas = Vec::with_capacity(betas.len());
        let mut prev = 1.0;
        for &b in &betas {
            let ab = (1.0 - b) * prev;
            let var = if ab < 1.0 { b * (1.0 - prev) / (1.0 - ab) } else { 0.0 };
            sigmas.push(var.sqrt());
            alpha_bars.push(ab);
            prev = ab;
        }
        Ok(Self {
            betas,
            alpha_bars,
            sigmas,
        })
    }

    /// Desk default: T = 100, linear β from 1e-3 to 0.12.
    pub fn desk_default() -> Self {
        Self::new(100, ScheduleKind::Linear, 1e-3, 0.12).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(LabError::TimestepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

/// `√ᾱ_t x₀ + √(1−ᾱ_t) ε`
pub fn perturb(x0: &[f64], t: usize, noise: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim(x0.len(), noise.len(), "perturb noise")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + b * n).collect())
}

/// Tweedie posterior mean from a score value: `(x_t + (1−ᾱ_t) s) / √ᾱ_t`.
pub fn tweedie_from_score(x_t: &[f64], score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_dim(x_t.len(), score.len(), "tweedie score")?;
    let ab = sched.alpha_bar(t);
    let k = 1.0 - ab;
    let inv = 1.0 / ab.sqrt();
    Ok(x_t.iter().zip(score).map(|(x, s)| (x + k * s) * inv).collect())
}

/// x̄₀(x_t, c) using one score evaluation of `model`.
pub fn tweedie_mean<M: crate::models::ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let s = model.score(x_t, c, t, sched)?;
    tweedie_from_score(x_t, &s, t, sched)
}

/// The deterministic update written in the sampling algorithm:
/// `x_{t−1} = x_t + ½ β_t (x_t + s)`.
pub fn step_alg1(x_t: &[f64], score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim(x_t.len(), score.len(), "alg1 score")?;
    let hb = 0.5 * sched.beta(t);
    Ok(x_t.iter().zip(score).map(|(x, s)| x + hb * (x + s)).collect())
}

/// Ancestral step: `(x_t + β_t s) / √(1−β_t) + σ_t z`.
pub fn step_ddpm(
    x_t: &[f64],
    score: &[f64],
    t: usize,
    noise: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim(x_t.len(), score.len(), "ddpm score")?;
    check_dim(x_t.len(), noise.len(), "ddpm noise")?;
    let b = sched.beta(t);
    let inv = 1.0 / (1.0 - b).sqrt();
    let sig = sched.sigma(t);
    Ok(x_t
        .iter()
        .zip(score)
        .zip(noise)
        .map(|((x, s), z)| (x + b * s) * inv + sig * z)
        .collect())
}

/// DDIM with η = 0.
pub fn step_ddim(
    x_t: &[f64],
    x0_pred: &[f64],
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    check_dim(x_t.len(), x0_pred.len(), "ddim x0")?;
    if t_prev >= t {
        return Err(LabError::InvalidArgument(format!(
            "ddim needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let ab = sched.alpha_bar(t);
    if 1.0 - ab <= 0.0 {
        return Err(LabError::Degenerate(format!("alpha_bar({t}) = 1")));
    }
    let abp = sched.alpha_bar(t_prev);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pn) = (abp.sqrt(), (1.0 - abp).sqrt());
    Ok(x_t
        .iter()
        .zip(x0_pred)
        .map(|(x, x0)| {
            let eps = (x - sa * x0) / sn;
            pa * x0 + pn * eps
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constant_schedule_products() {
        let s = NoiseSchedule::new(3, ScheduleKind::Constant, 0.1, 0.1).unwrap();
        let want = [0.9, 0.81, 0.729];
        for (got, want) in s.alpha_bars().iter().zip(want) {
            assert!(close(*got, want, 1e-15));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::new(1, ScheduleKind::Constant, 0.37, 0.37).unwrap();
        assert!(close(s.alpha_bar(1), 0.63, 1e-15));
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn linear_schedule_two_steps() {
        let s = NoiseSchedule::new(2, ScheduleKind::Linear, 0.1, 0.3).unwrap();
        assert!(close(s.beta(1), 0.1, 1e-15) && close(s.beta(2), 0.3, 1e-15));
        assert!(close(s.alpha_bar(1), 0.9, 1e-15) && close(s.alpha_bar(2), 0.63, 1e-15));
    }

    #[test]
    fn schedule_rejects_bad_input() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Constant, 0.1, 0.1).is_err());
        assert!(NoiseSchedule::new(3, ScheduleKind::Constant, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::new(3, ScheduleKind::Linear, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::new(3, ScheduleKind::Linear, 0.3, 0.1).is_err());
    }

    #[test]
    fn desk_default_is_decreasing_and_near_prior() {
        let s = NoiseSchedule::desk_default();
        assert_eq!(s.steps(), 100);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100) < 2e-3);
        assert!(s.sigmas().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn perturb_examples() {
        let s = NoiseSchedule::new(2, ScheduleKind::Constant, 0.1, 0.1).unwrap();
        assert!(close(perturb(&[1.0], 2, &[0.0], &s).unwrap()[0], 0.9, 1e-15));
        let got = perturb(&[1.0], 2, &[1.0], &s).unwrap()[0];
        assert!(close(got, 0.9 + 0.19f64.sqrt(), 1e-15));
        let tiny = NoiseSchedule::new(1, ScheduleKind::Constant, 1e-15, 1e-15).unwrap();
        assert!(close(perturb(&[0.7], 1, &[5.0], &tiny).unwrap()[0], 0.7, 1e-6));
        assert!(perturb(&[1.0, 2.0], 1, &[0.0], &s).is_err());
        assert!(perturb(&[1.0], 3, &[0.0], &s).is_err());
    }

    #[test]
    fn tweedie_substitution() {
        // ᾱ = 0.25 at t = 2 with β = 0.5.
        let s = NoiseSchedule::new(2, ScheduleKind::Constant, 0.5, 0.5).unwrap();
        assert!(close(s.alpha_bar(2), 0.25, 1e-15));
        let got = tweedie_from_score(&[2.0], &[-1.0], 2, &s).unwrap();
        assert!(close(got[0], 2.5, 1e-15));
    }

    #[test]
    fn alg1_examples() {
        let s = NoiseSchedule::new(1, ScheduleKind::Constant, 0.2, 0.2).unwrap();
        assert_eq!(step_alg1(&[1.0], &[-1.0], 1, &s).unwrap(), vec![1.0]);
        assert_eq!(step_alg1(&[0.0], &[0.0], 1, &s).unwrap(), vec![0.0]);
        assert!(close(step_alg1(&[2.0], &[-1.0], 1, &s).unwrap()[0], 2.1, 1e-15));
    }

    #[test]
    fn ddpm_examples() {
        let s = NoiseSchedule::new(2, ScheduleKind::Constant, 0.19, 0.19).unwrap();
        assert_eq!(step_ddpm(&[0.0], &[0.0], 2, &[0.0], &s).unwrap(), vec![0.0]);
        assert!(close(step_ddpm(&[1.0], &[-1.0], 2, &[0.0], &s).unwrap()[0], 0.9, 1e-15));
        assert!(step_ddpm(&[1.0], &[-1.0], 2, &[0.0, 1.0], &s).is_err());
    }

    #[test]
    fn ddim_examples() {
        // t = 2 has ᾱ = 0.25; need ᾱ_{t_prev} = 0.81 at t_prev = 1.
        let s = NoiseSchedule::from_betas(vec![0.19, 1.0 - 0.25 / 0.81]).unwrap();
        assert!(close(s.alpha_bar(2), 0.25, 1e-15));
        let got = step_ddim(&[1.0], &[1.0], 2, 1, &s).unwrap()[0];
        let want = 0.9 + 0.19f64.sqrt() * (0.5 / 0.75f64.sqrt());
        assert!(close(got, want, 1e-14));

        // zero predicted noise
        let x0 = [0.3, -1.2];
        let xt: Vec<f64> = x0.iter().map(|v| v * 0.5).collect();
        let got = step_ddim(&xt, &x0, 2, 1, &s).unwrap();
        for (g, v) in got.iter().zip(x0) {
            assert!(close(*g, 0.9 * v, 1e-15));
        }
        // final step lands on x0_pred
        let got = step_ddim(&[0.4], &[1.7], 2, 0, &s).unwrap();
        assert!(close(got[0], 1.7, 1e-15));
        assert!(step_ddim(&[0.4], &[1.7], 1, 1, &s).is_err());
    }
}
