//! First- and second-order checks on a single `(x_t, c, t)` instance.

use serde::{Deserialize, Serialize};

use super::SlopeFit;
use crate::alignment::{eval_h_t, EvaluationFunction};
use crate::autodiff::Graph;
use crate::date::{grad_h_t_wrt_c, h_t_and_grad_c};
use crate::diffusion::{tweedie_mean, NoiseSchedule};
use crate::error::{check_dim, LabError, Result};
use crate::linalg;
use crate::models::{AnalyticMixtureModel, ScoreModel};
use crate::rng::{normal_vec, stream, Stream};

/// A point at which to evaluate a check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub x_t: Vec<f64>,
    pub c: Vec<f64>,
    pub t: usize,
    /// Index of the center `c` was drawn around.
    pub y: usize,
}

/// `n` probes: `t` uniform on `1..=T`, `c` a jittered table embedding,
/// `x_t` drawn from `q_t(x | c)`.
pub fn random_probes(
    model: &AnalyticMixtureModel,
    sched: &NoiseSchedule,
    centers: &[Vec<f64>],
    jitter: f64,
    n: usize,
    seed: u64,
) -> Vec<Probe> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, Stream::Verification, i as u64);
            let t = rng.random_range(1..=sched.steps());
            let y = rng.random_range(0..centers.len());
            let c = linalg::axpy(&centers[y], jitter, &normal_vec(&mut rng, centers[y].len()));
            let x_t = model.sample(&c, t, sched, &mut rng);
            Probe { x_t, c, t, y }
        })
        .collect()
}

/// Unit ascent direction `g/‖g‖` of `h_t` in `c`, as a function of `x`.
fn direction<M: ScoreModel + ?Sized>(
    x: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
) -> Result<Vec<f64>> {
    let g = grad_h_t_wrt_c(x, c, t, model, sched, h, y)?;
    let n = linalg::norm(&g);
    if !(n > 0.0) {
        return Err(LabError::Degenerate("zero gradient of h_t in c".into()));
    }
    Ok(linalg::scale(&g, 1.0 / n))
}

/// Second-order check of the score expansion under a DATE update.
///
/// The updated embedding `ĉ(x) = c_org + ρ d(x)` depends on `x` through the
/// gradient direction, so `∇_x log p(x | ĉ(x))` is the total derivative
/// `s(x, ĉ) + ρ J_dᵀ ∇_c log p(x, ĉ)`. The first-order prediction is
/// `s(x, c_org) + ρ ∇_x{dᵀ ∇_c log p(x, c_org)}`, differentiating through
/// both factors; the mixed derivative of the frozen-direction product comes
/// from reverse mode, `J_d` from central differences of the direction.
#[allow(clippy::too_many_arguments)]
pub fn check_thm2_order(
    x_t: &[f64],
    c_org: &[f64],
    t: usize,
    model: &AnalyticMixtureModel,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    rhos: &[f64],
) -> Result<SlopeFit> {
    sched.check_t(t)?;
    check_dim(model.data_dim, x_t.len(), "thm2 x_t")?;
    check_dim(model.embed_dim, c_org.len(), "thm2 c_org")?;
    let d = direction(x_t, c_org, t, model, sched, h, y)?;

    let fd_step = 1e-5 * (1.0 + linalg::norm(x_t));
    let mut jac = vec![vec![0.0; model.data_dim]; model.embed_dim];
    for i in 0..model.data_dim {
        let mut xp = x_t.to_vec();
        let mut xm = x_t.to_vec();
        xp[i] += fd_step;
        xm[i] -= fd_step;
        let dp = direction(&xp, c_org, t, model, sched, h, y)?;
        let dm = direction(&xm, c_org, t, model, sched, h, y)?;
        for j in 0..model.embed_dim {
            jac[j][i] = (dp[j] - dm[j]) / (2.0 * fd_step);
        }
    }
    let jac_t_times = |v: &[f64]| -> Vec<f64> {
        (0..model.data_dim)
            .map(|i| (0..model.embed_dim).map(|j| jac[j][i] * v[j]).sum())
            .collect()
    };

    let mut g = Graph::new();
    let xn = g.input("x", model.data_dim);
    let cn = g.constant(c_org.to_vec());
    let gc = model.grad_c_log_likelihood_expr(&mut g, xn, cn, t, sched);
    let dn = g.constant(d.clone());
    let out = g.dot(gc, dn);
    g.set_output(out);
    g.evaluate(&[("x", x_t)])?;
    let frozen = g.gradient("x")?;
    let gc0 = model.grad_c_log_likelihood(x_t, c_org, t, sched)?;
    let mixed = linalg::add(&frozen, &jac_t_times(&gc0));
    let s0 = model.score(x_t, c_org, t, sched)?;

    let ys = rhos
        .iter()
        .map(|&rho| {
            let c_hat = linalg::axpy(c_org, rho, &d);
            let s = model.score(x_t, &c_hat, t, sched)?;
            let gc = model.grad_c_log_likelihood(x_t, &c_hat, t, sched)?;
            let total = linalg::axpy(&s, rho, &jac_t_times(&gc));
            let pred = linalg::axpy(&s0, rho, &mixed);
            Ok(linalg::dist(&total, &pred))
        })
        .collect::<Result<Vec<f64>>>()?;
    SlopeFit::fit(rhos.to_vec(), ys)
}

/// Remainder of the first-order expansion of `h_t` in `c` along
/// `direction`, at step lengths `scales`.
#[allow(clippy::too_many_arguments)]
pub fn check_taylor_order<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    direction: &[f64],
    scales: &[f64],
) -> Result<SlopeFit> {
    check_dim(c.len(), direction.len(), "taylor direction")?;
    let n = linalg::norm(direction);
    if !(n > 0.0) {
        return Err(LabError::InvalidArgument("taylor direction must be nonzero".into()));
    }
    let u = linalg::scale(direction, 1.0 / n);
    let (h0, g) = h_t_and_grad_c(x_t, c, t, model, sched, h, y)?;
    let slope = linalg::dot(&g, &u);
    let ys = scales
        .iter()
        .map(|&s| {
            let v = eval_h_t(h, x_t, &linalg::axpy(c, s, &u), t, model, sched, y)?;
            Ok((v - h0 - s * slope).abs())
        })
        .collect::<Result<Vec<f64>>>()?;
    SlopeFit::fit(scales.to_vec(), ys)
}

/// Max `|x̄₀ − E[x₀ | x_t]|` over probes on a single-Gaussian model, with the
/// posterior mean written out for the linear-Gaussian case.
pub fn check_tweedie_exact(model: &AnalyticMixtureModel, sched: &NoiseSchedule, probes: &[Probe]) -> Result<f64> {
    if model.num_components() != 1 {
        return Err(LabError::InvalidArgument(format!(
            "closed-form posterior needs K = 1, got {}",
            model.num_components()
        )));
    }
    let comp = &model.components[0];
    let mut worst: f64 = 0.0;
    for p in probes {
        let ab = sched.alpha_bar(p.t);
        let sa = ab.sqrt();
        let mu = model.component_mean(0, &p.c);
        let tw = tweedie_mean(&p.x_t, &p.c, p.t, model, sched)?;
        for i in 0..model.data_dim {
            let s = comp.var[i];
            let exact = mu[i] + sa * s / (ab * s + 1.0 - ab) * (p.x_t[i] - sa * mu[i]);
            worst = worst.max((tw[i] - exact).abs());
        }
    }
    Ok(worst)
}

/// Max `|x̄₀ − Σ_k r_k m_k|` over probes, against the responsibility-weighted
/// component posteriors.
pub fn check_tweedie_mixture(model: &AnalyticMixtureModel, sched: &NoiseSchedule, probes: &[Probe]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in probes {
        let tw = tweedie_mean(&p.x_t, &p.c, p.t, model, sched)?;
        let oracle = model.posterior_mean(&p.x_t, &p.c, p.t, sched)?;
        worst = worst.max(linalg::max_abs_diff(&tw, &oracle));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::models::MixtureComponent;
    use crate::task::DeskTask;
    use crate::verification::halving;

    fn gaussian() -> AnalyticMixtureModel {
        AnalyticMixtureModel::single_gaussian(
            Mat::from_rows(&[vec![1.0, 0.5], vec![-0.3, 0.8]]),
            vec![0.2, -0.1],
            vec![0.4, 0.9],
        )
        .unwrap()
    }

    #[test]
    fn tweedie_exact_on_gaussian() {
        let m = gaussian();
        let sched = NoiseSchedule::desk_default();
        let probes = random_probes(&m, &sched, &[vec![0.0, 0.0]], 1.0, 50, 1);
        assert!(check_tweedie_exact(&m, &sched, &probes).unwrap() <= 1e-12);
    }

    #[test]
    fn tweedie_rejects_mixture() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        assert!(check_tweedie_exact(task.model(), &sched, &[]).is_err());
    }

    #[test]
    fn update_residual_shrinks() {
        let task = DeskTask::desk_default();
        let sched = task.schedule();
        let p = &random_probes(task.model(), &sched, &task.prompts.embeddings[..1], 0.0, 1, 5)[0];
        let fit = check_thm2_order(&p.x_t, &p.c, 50.min(sched.steps()), task.model(), &sched, &task.cosine_h(), 0, &halving(0.2, 4)).unwrap();
        assert!(fit.monotone());
    }

    #[test]
    fn taylor_linear_case_is_exact() {
        let m = gaussian();
        let sched = NoiseSchedule::desk_default();
        let h = EvaluationFunction::linear(vec![vec![1.0, -2.0]], vec![vec![0.5, 0.5]]).unwrap();
        let fit = check_taylor_order(&[0.3, -0.4], &[0.1, 0.2], 30, &m, &sched, &h, 0, &[1.0, 1.0], &halving(1.0, 5)).unwrap();
        assert!(fit.ys.iter().all(|r| *r <= 1e-12), "{:?}", fit.ys);
    }

    #[test]
    fn taylor_quadratic_case_has_slope_two() {
        let m = gaussian();
        let sched = NoiseSchedule::desk_default();
        let h = EvaluationFunction::quadratic(-1.0, vec![vec![1.0, 1.0]]).unwrap();
        let fit = check_taylor_order(&[0.3, -0.4], &[0.1, 0.2], 30, &m, &sched, &h, 0, &[1.0, -0.5], &halving(1.0, 5)).unwrap();
        assert!(fit.slope_within(1.95, 2.05), "{fit:?}");
    }

    #[test]
    fn single_gaussian_update_residual_is_pure_quadratic() {
        let m = crate::verification::reference_gaussian();
        let sched = NoiseSchedule::desk_default();
        let h = DeskTask::desk_default().cosine_h();
        let rhos = halving(0.4, 5);
        let fit = check_thm2_order(&[0.6, -0.2], &[0.5, 1.0], 40, &m, &sched, &h, 0, &rhos).unwrap();
        let k0 = fit.ys[0] / (rhos[0] * rhos[0]);
        for (r, y) in rhos.iter().zip(&fit.ys) {
            assert!((y / (r * r) - k0).abs() <= 1e-6 * k0, "{fit:?}");
        }
        assert!(fit.slope_within(1.95, 2.05));
    }

    #[test]
    fn update_residual_rejects_zero_gradient() {
        let m = AnalyticMixtureModel::new(
            1,
            1,
            vec![MixtureComponent {
                mean_map: Mat::from_rows(&[vec![0.0]]),
                offset: vec![0.0],
                var: vec![1.0],
                logit: vec![0.0],
            }],
        )
        .unwrap();
        let sched = NoiseSchedule::desk_default();
        let h = EvaluationFunction::quadratic(-1.0, vec![vec![0.0]]).unwrap();
        assert!(check_thm2_order(&[0.1], &[0.0], 10, &m, &sched, &h, 0, &[0.1, 0.05]).is_err());
    }
}
