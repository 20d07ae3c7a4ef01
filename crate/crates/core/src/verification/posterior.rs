//! Checks that need samples of `x₀` given `(x_t, t)`, drawn by running the
//! stochastic reverse chain from `t` down to 0.

use serde::{Deserialize, Serialize};

use super::Estimate;
use crate::alignment::EvaluationFunction;
use crate::diffusion::{step_ddpm, tweedie_mean, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::harness::mean_and_se;
use crate::linalg;
use crate::models::ScoreModel;
use crate::par::{try_map_range, Execution};
use crate::rng::{normal_vec, stream, Stream};

/// `n` endpoints of the DDPM chain started at `x_t`; sample `i` uses the
/// verification stream `(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn posterior_samples<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    if t > sched.steps() {
        return Err(LabError::TimestepOutOfRange { t, max: sched.steps() });
    }
    try_map_range(exec, n, |i| {
        let mut rng = stream(seed, Stream::Verification, i as u64);
        let mut x = x_t.to_vec();
        for s in (1..=t).rev() {
            let score = model.score(&x, c, s, sched)?;
            let z = normal_vec(&mut rng, x.len());
            x = step_ddpm(&x, &score, s, &z, sched)?;
        }
        Ok(x)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    /// `h(x̄₀)`
    pub h_at_mean: f64,
    /// Monte-Carlo `E[h(x₀) | x_t]` and its standard error.
    pub mean_h: Estimate,
    /// `mean_h − h_at_mean`
    pub margin: f64,
    pub holds: bool,
}

/// Convex `h` satisfies `h(E[x₀|x_t]) ≤ E[h(x₀)|x_t]`; holds within 3 SE
/// plus a round-off floor of `1e-12·max(1, |h|)`.
#[allow(clippy::too_many_arguments)]
pub fn check_jensen<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<JensenReport> {
    if !h.is_convex() {
        return Err(LabError::InvalidArgument("jensen check needs a convex h".into()));
    }
    if n_mc < 2 {
        return Err(LabError::InvalidArgument("jensen check needs at least two samples".into()));
    }
    let h_at_mean = h.eval(&tweedie_mean(x_t, c, t, model, sched)?, y)?;
    let samples = posterior_samples(x_t, c, t, model, sched, n_mc, seed, exec)?;
    let values = samples.iter().map(|x| h.eval(x, y)).collect::<Result<Vec<f64>>>()?;
    let mean_h = Estimate::from_samples(&values);
    let margin = mean_h.value - h_at_mean;
    Ok(JensenReport {
        h_at_mean,
        mean_h,
        margin,
        holds: margin >= -3.0 * mean_h.se - 1e-12 * h_at_mean.abs().max(1.0),
    })
}

/// Monte-Carlo `E‖x₀ − x̄₀‖` under the reverse chain.
#[allow(clippy::too_many_arguments)]
pub fn estimate_m1<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<Estimate> {
    if n_mc == 0 {
        return Err(LabError::InvalidArgument("m1 needs at least one sample".into()));
    }
    if t == 0 {
        return Ok(Estimate { value: 0.0, se: 0.0 });
    }
    let mean = tweedie_mean(x_t, c, t, model, sched)?;
    let samples = posterior_samples(x_t, c, t, model, sched, n_mc, seed, exec)?;
    let d: Vec<f64> = samples.iter().map(|x| linalg::dist(x, &mean)).collect();
    Ok(Estimate::from_samples(&d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `|E_MC[h(x₀)] − h(x̄₀)|`
    pub gap: f64,
    /// Standard error of `E_MC[h(x₀)]`.
    pub gap_se: f64,
    pub bound: f64,
    pub k_lower: f64,
    pub op_norm: f64,
    pub m1: Estimate,
    pub holds: bool,
}

/// Evaluates the cosine approximation bound on given posterior samples and
/// posterior mean. `K_lower` is the smallest feature norm over the samples
/// and the mean. Holds within 3 SE plus a round-off floor of `1e-12`.
pub fn bound_from_samples(h: &EvaluationFunction, y: usize, samples: &[Vec<f64>], x0_bar: &[f64]) -> Result<BoundReport> {
    let EvaluationFunction::Cosine { features, .. } = h else {
        return Err(LabError::InvalidArgument("approximation bound applies to cosine h only".into()));
    };
    if samples.len() < 2 {
        return Err(LabError::InvalidArgument("bound needs at least two samples".into()));
    }
    let k_lower = samples
        .iter()
        .chain(std::iter::once(&x0_bar.to_vec()))
        .map(|x| linalg::norm(&features.matvec(x)))
        .fold(f64::INFINITY, f64::min);
    let op_norm = features.operator_norm();
    if !(k_lower > 1e-9 * op_norm) {
        return Err(LabError::Degenerate(format!("feature norm lower bound {k_lower} is too close to zero")));
    }
    let values = samples.iter().map(|x| h.eval(x, y)).collect::<Result<Vec<f64>>>()?;
    let (mean_h, se) = mean_and_se(&values);
    let gap = (mean_h - h.eval(x0_bar, y)?).abs();
    let dev: Vec<f64> = samples.iter().map(|x| linalg::dist(x, x0_bar)).collect();
    let m1 = Estimate::from_samples(&dev);
    let bound = crate::alignment::lipschitz_bound(
        h,
        &crate::alignment::AlignmentBoundInputs::new(k_lower, op_norm, m1.value)?,
    )?;
    let gap_se = se.unwrap_or(0.0);
    Ok(BoundReport {
        gap,
        gap_se,
        bound,
        k_lower,
        op_norm,
        m1,
        holds: gap <= bound + 3.0 * gap_se + 1e-12,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn check_approx_bound<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<BoundReport> {
    if !h.is_cosine() {
        return Err(LabError::InvalidArgument("approximation bound applies to cosine h only".into()));
    }
    let mean = tweedie_mean(x_t, c, t, model, sched)?;
    let samples = posterior_samples(x_t, c, t, model, sched, n_mc, seed, exec)?;
    bound_from_samples(h, y, &samples, &mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct M1Sweep {
    /// Decreasing timesteps.
    pub ts: Vec<usize>,
    /// `E_{x_t ~ q_t(·|c)}[m₁(x_t)]` at each timestep.
    pub m1: Vec<Estimate>,
    pub holds: bool,
}

/// `m₁` averaged over `n_states` draws of `x_t` from the forward marginal, at
/// decreasing `ts`, with `n_mc` reverse-chain samples per state. Each value may
/// exceed its predecessor by at most 2 combined SEs.
#[allow(clippy::too_many_arguments)]
pub fn check_m1_sweep(
    c: &[f64],
    model: &crate::models::AnalyticMixtureModel,
    sched: &NoiseSchedule,
    ts: &[usize],
    n_states: usize,
    n_mc: usize,
    seed: u64,
    exec: Execution,
) -> Result<M1Sweep> {
    if ts.is_empty() || ts.windows(2).any(|w| w[1] >= w[0]) || ts[0] > sched.steps() {
        return Err(LabError::InvalidArgument("m1 sweep needs strictly decreasing timesteps within the schedule".into()));
    }
    if n_states < 2 {
        return Err(LabError::InvalidArgument("m1 sweep needs at least two states per timestep".into()));
    }
    let m1 = ts
        .iter()
        .map(|&t| {
            let per_state = try_map_range(exec, n_states, |i| {
                let mut rng = stream(seed, Stream::Reference, (t * n_states + i) as u64);
                let x_t = model.sample(c, t, sched, &mut rng);
                let sub = crate::rng::derive_seed(seed, &format!("m1/{t}/{i}"));
                Ok::<f64, LabError>(estimate_m1(&x_t, c, t, model, sched, n_mc, sub, Execution::Sequential)?.value)
            })?;
            Ok(Estimate::from_samples(&per_state))
        })
        .collect::<Result<Vec<Estimate>>>()?;
    let holds = m1
        .windows(2)
        .all(|w| w[1].value <= w[0].value + 2.0 * w[0].se.hypot(w[1].se));
    Ok(M1Sweep {
        ts: ts.to_vec(),
        m1,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::models::AnalyticMixtureModel;
    use crate::task::DeskTask;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn gaussian_1d(s: f64) -> AnalyticMixtureModel {
        AnalyticMixtureModel::single_gaussian(Mat::from_rows(&[vec![1.0]]), vec![0.5], vec![s]).unwrap()
    }

    /// Mean and variance of the chain endpoint for Gaussian data: every step
    /// is affine in `x`.
    fn chain_moments(x_t: f64, c: f64, t: usize, s: f64, mu0: f64, sched: &NoiseSchedule) -> (f64, f64) {
        let (mut m, mut v) = (x_t, 0.0);
        for k in (1..=t).rev() {
            let ab = sched.alpha_bar(k);
            let b = sched.beta(k);
            let var_t = ab * s + 1.0 - ab;
            let a = (1.0 - b / var_t) / (1.0 - b).sqrt();
            let off = b * ab.sqrt() * (mu0 + c) / var_t / (1.0 - b).sqrt();
            m = a * m + off;
            v = a * a * v + sched.sigma(k).powi(2);
        }
        (m, v)
    }

    fn folded_normal_mean(mu: f64, var: f64) -> f64 {
        let sd = var.sqrt();
        let n = Normal::standard();
        sd * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * var)).exp() + mu * (1.0 - 2.0 * n.cdf(-mu / sd))
    }

    #[test]
    fn m1_matches_folded_normal() {
        let sched = NoiseSchedule::desk_default();
        let s = 0.3;
        let m = gaussian_1d(s);
        let (x_t, c, t) = (0.7, 0.2, 40);
        let (cm, cv) = chain_moments(x_t, c, t, s, 0.5, &sched);
        let tw = tweedie_mean(&[x_t], &[c], t, &m, &sched).unwrap()[0];
        let expected = folded_normal_mean(cm - tw, cv);
        let est = estimate_m1(&[x_t], &[c], t, &m, &sched, 20_000, 3, Execution::Parallel).unwrap();
        assert!((est.value - expected).abs() <= 3.0 * est.se, "{est:?} vs {expected}");
    }

    #[test]
    fn m1_vanishes_at_t_zero_and_rejects_empty() {
        let sched = NoiseSchedule::desk_default();
        let m = gaussian_1d(0.3);
        let est = estimate_m1(&[0.4], &[0.0], 0, &m, &sched, 10, 0, Execution::Sequential).unwrap();
        assert_eq!(est.value, 0.0);
        assert!(estimate_m1(&[0.4], &[0.0], 3, &m, &sched, 0, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn jensen_linear_h_is_tight() {
        let sched = NoiseSchedule::desk_default();
        let m = gaussian_1d(0.3);
        let h = EvaluationFunction::linear(vec![vec![1.0]], vec![vec![-1.0]]).unwrap();
        let r = check_jensen(&[0.4], &[0.1], 30, &m, &sched, &h, 0, 4000, 1, Execution::Parallel).unwrap();
        assert!(r.margin.abs() <= 3.0 * r.mean_h.se, "{r:?}");
    }

    #[test]
    fn jensen_at_first_step_is_exact() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        let h = task.quadratic_h(1.0);
        let c = &task.prompts.embeddings[0];
        let r = check_jensen(&[0.5, 1.0], c, 1, task.model().as_ref(), &sched, &h, 0, 50, 2, Execution::Sequential).unwrap();
        assert!(r.margin.abs() < 1e-12 && r.holds, "{r:?}");
    }

    #[test]
    fn jensen_rejects_concave_h() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        let c = &task.prompts.embeddings[0];
        let h = task.quadratic_h(-1.0);
        assert!(check_jensen(&[0.0, 0.0], c, 10, task.model().as_ref(), &sched, &h, 0, 50, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn bound_is_invariant_to_rescaling() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        let h = task.cosine_h();
        let c = &task.prompts.embeddings[1];
        let x_t = task.model().sample(c, 50, &sched, &mut stream(1, Stream::Verification, 99));
        let samples = posterior_samples(&x_t, c, 50, task.model().as_ref(), &sched, 500, 4, Execution::Parallel).unwrap();
        let mean = tweedie_mean(&x_t, c, 50, task.model().as_ref(), &sched).unwrap();
        let base = bound_from_samples(&h, 1, &samples, &mean).unwrap();
        assert!(base.holds && base.gap <= base.bound);
        let lam = 3.0;
        let scaled: Vec<Vec<f64>> = samples.iter().map(|x| linalg::scale(x, lam)).collect();
        let r = bound_from_samples(&h, 1, &scaled, &linalg::scale(&mean, lam)).unwrap();
        assert!((r.m1.value - lam * base.m1.value).abs() < 1e-9 * r.m1.value);
        assert!((r.k_lower - lam * base.k_lower).abs() < 1e-9 * r.k_lower);
        assert!((r.bound - base.bound).abs() < 1e-9 * base.bound);
        assert!((r.gap - base.gap).abs() < 1e-12 && r.holds);
    }

    #[test]
    fn m1_sweep_validates_timesteps() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        let c = &task.prompts.embeddings[0];
        assert!(check_m1_sweep(c, task.model(), &sched, &[10, 20], 4, 4, 0, Execution::Sequential).is_err());
        let r = check_m1_sweep(c, task.model(), &sched, &[20, 1, 0], 8, 8, 0, Execution::Sequential).unwrap();
        assert_eq!(r.m1[2].value, 0.0);
        assert!(r.m1[1].value < 1e-12);
    }

    #[test]
    fn point_mass_has_zero_gap() {
        let task = DeskTask::desk_default();
        let h = task.cosine_h();
        let x = vec![1.0, 0.5];
        let r = bound_from_samples(&h, 0, &[x.clone(), x.clone()], &x).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(r.bound, 0.0);
        assert!(r.holds);
    }
}
