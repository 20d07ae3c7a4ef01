//! Fuzzed contracts: update norm, gradient agreement, guidance identities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{random_probes, Probe};
use crate::alignment::eval_h_t;
use crate::autodiff::finite_difference;
use crate::date::{date_update, grad_h_t_wrt_c, DateConfig, Origin};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::guidance::{cfg_score, cg_score};
use crate::linalg;
use crate::models::{LearnedScoreNet, ScoreModel};
use crate::rng::{stream, Stream};
use crate::task::DeskTask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub calls: usize,
    /// Calls skipped because the gradient vanished.
    pub zero_gradient: usize,
    pub max_rel_err: f64,
}

/// `‖ĉ − c_org‖ = ρ` over `n` fuzzed updates with random `ρ`, prompt and
/// probe point.
pub fn check_update_norm(task: &DeskTask, n: usize, seed: u64) -> Result<NormReport> {
    let sched = task.schedule();
    let h = task.cosine_h();
    let probes = random_probes(task.model(), &sched, &task.prompts.embeddings, 1.0, n, seed);
    let mut report = NormReport {
        calls: n,
        zero_gradient: 0,
        max_rel_err: 0.0,
    };
    for (i, p) in probes.iter().enumerate() {
        let mut rng = stream(seed, Stream::Ablation, i as u64);
        let cfg = DateConfig {
            rho: 10f64.powf(rng.random_range(-2.0..1.0)),
            origin: Origin::Fresh,
            ..DateConfig::default()
        };
        let (c_hat, dir) = date_update(&p.x_t, &p.c, p.t, &cfg, task.model().as_ref(), &sched, &h, p.y, &p.c)?;
        if dir.grad_norm == 0.0 {
            report.zero_gradient += 1;
            continue;
        }
        let err = (linalg::dist(&c_hat, &p.c) - cfg.rho).abs() / cfg.rho;
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub cases: usize,
    pub max_rel_err_analytic: f64,
    pub max_rel_err_learned: f64,
}

/// Relative error of reverse-mode `∇_c h_t` against central differences.
pub fn gradient_rel_err<M: ScoreModel + ?Sized>(
    p: &Probe,
    model: &M,
    sched: &NoiseSchedule,
    h: &crate::alignment::EvaluationFunction,
) -> Result<f64> {
    let ad = grad_h_t_wrt_c(&p.x_t, &p.c, p.t, model, sched, h, p.y)?;
    let step = 1e-5 * (1.0 + p.c.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let failure = std::cell::RefCell::new(None);
    let fd = finite_difference(
        |c| {
            eval_h_t(h, &p.x_t, c, p.t, model, sched, p.y).unwrap_or_else(|e| {
                *failure.borrow_mut() = Some(e);
                f64::NAN
            })
        },
        &p.c,
        step,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(linalg::dist(&ad, &fd) / linalg::norm(&fd).max(1e-12))
}

/// `n` probes each on the analytic model and on a freshly initialised
/// learned network.
pub fn check_gradients(task: &DeskTask, n: usize, seed: u64) -> Result<GradientReport> {
    let sched = task.schedule();
    let h = task.cosine_h();
    let probes = random_probes(task.model(), &sched, &task.prompts.embeddings, 1.0, n, seed);
    let net = LearnedScoreNet::desk_default(task.model().data_dim, task.model().embed_dim, seed);
    let mut report = GradientReport {
        cases: n,
        max_rel_err_analytic: 0.0,
        max_rel_err_learned: 0.0,
    };
    for p in &probes {
        report.max_rel_err_analytic = report.max_rel_err_analytic.max(gradient_rel_err(p, task.model().as_ref(), &sched, &h)?);
        report.max_rel_err_learned = report.max_rel_err_learned.max(gradient_rel_err(p, &net, &sched, &h)?);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceReport {
    pub probes: usize,
    /// Max `|s_uncond + ∇ log p(y|x) − s(x, c_y)|`.
    pub cg_max_err: f64,
    /// Max error of CFG at `w = 0` against the unconditional score.
    pub cfg_w0_max_err: f64,
    /// Max error of CFG at `w = 1` against the conditional score.
    pub cfg_w1_max_err: f64,
}

pub fn check_guidance_identities(task: &DeskTask, n: usize, seed: u64) -> Result<GuidanceReport> {
    let sched = task.schedule();
    let probes = random_probes(task.model(), &sched, &task.prompts.embeddings, 0.0, n, seed);
    let mut r = GuidanceReport {
        probes: n,
        cg_max_err: 0.0,
        cfg_w0_max_err: 0.0,
        cfg_w1_max_err: 0.0,
    };
    for p in &probes {
        let cond = task.model().analytic_score(&p.x_t, &p.c, p.t, &sched)?;
        let uncond = task.prompts.unconditional_score(&p.x_t, p.t, &sched)?;
        let grad = task.prompts.classifier_grad(&p.x_t, p.y, p.t, &sched)?;
        r.cg_max_err = r.cg_max_err.max(linalg::max_abs_diff(&cg_score(&uncond, &grad, 1.0)?, &cond));
        r.cfg_w0_max_err = r.cfg_w0_max_err.max(linalg::max_abs_diff(&cfg_score(&cond, &uncond, 0.0)?, &uncond));
        r.cfg_w1_max_err = r.cfg_w1_max_err.max(linalg::max_abs_diff(&cfg_score(&cond, &uncond, 1.0)?, &cond));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_meet_contracts() {
        let task = DeskTask::desk_default();
        let n = check_update_norm(&task, 50, 1).unwrap();
        assert!(n.max_rel_err <= 1e-9);
        let g = check_gradients(&task, 5, 1).unwrap();
        assert!(g.max_rel_err_analytic <= 1e-6 && g.max_rel_err_learned <= 1e-6, "{g:?}");
        let c = check_guidance_identities(&task, 10, 1).unwrap();
        assert!(c.cg_max_err <= 1e-8 && c.cfg_w0_max_err == 0.0 && c.cfg_w1_max_err == 0.0, "{c:?}");
    }
}
