//! Score-composition baselines (classifier-free, classifier, universal
//! guidance) and the embedding-space ablations of the DATE update.

use serde::{Deserialize, Serialize};

use crate::alignment::{h_t_expr, EvaluationFunction};
use crate::autodiff::Graph;
use crate::date::{grad_h_t_wrt_c, normalized_step};
use crate::diffusion::NoiseSchedule;
use crate::error::{check_dim, LabError, Result};
use crate::linalg;
use crate::models::{Embedding, ScoreModel};
use crate::rng::{unit_sphere, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceKind {
    None,
    Cfg,
    Cg,
    Ug,
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Uniform random direction on the ρ-sphere.
    Random,
    /// `c_org + ρ ∇_c h_t` without normalization.
    Unnormalized,
    /// Normalized gradient of `h` at the noisy one-step mean instead of the
    /// Tweedie mean.
    PerturbedH,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub kind: GuidanceKind,
    pub w: f64,
    pub ablation_kind: Option<AblationKind>,
    pub rho: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            kind: GuidanceKind::None,
            w: 2.0,
            ablation_kind: None,
            rho: 0.5,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() {
            return Err(LabError::InvalidArgument(format!("guidance w must be finite, got {}", self.w)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(LabError::InvalidArgument(format!("guidance rho must be positive, got {}", self.rho)));
        }
        if self.kind == GuidanceKind::Ablation && self.ablation_kind.is_none() {
            return Err(LabError::InvalidArgument("guidance kind ablation needs ablation_kind".into()));
        }
        Ok(())
    }
}

/// `s_∅ + w (s_c − s_∅)`, evaluated as `(1−w) s_∅ + w s_c` so both
/// endpoints are reproduced exactly.
pub fn cfg_score(s_cond: &[f64], s_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(s_cond.len(), s_uncond.len(), "cfg scores")?;
    Ok(s_uncond.iter().zip(s_cond).map(|(u, c)| (1.0 - w) * u + w * c).collect())
}

/// `s_∅ + w ∇_x log p(y | x_t)`.
pub fn cg_score(s_uncond: &[f64], grad_log_classifier: &[f64], w: f64) -> Result<Vec<f64>> {
    check_dim(s_uncond.len(), grad_log_classifier.len(), "cg gradient")?;
    Ok(linalg::axpy(s_uncond, w, grad_log_classifier))
}

/// `∇_{x_t} h(x̄₀(x_t, c, t); y)`.
pub fn grad_h_t_wrt_x<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
) -> Result<Vec<f64>> {
    check_dim(model.data_dim(), x_t.len(), "x_t")?;
    check_dim(model.embed_dim(), c.len(), "c")?;
    let mut g = Graph::new();
    let xn = g.input("x", x_t.len());
    let cn = g.input("c", c.len());
    let out = h_t_expr(h, &mut g, xn, cn, t, model, sched, y);
    g.set_output(out);
    g.evaluate(&[("x", x_t), ("c", c)])?;
    let grad = g.gradient("x")?;
    if !linalg::all_finite(&grad) {
        return Err(LabError::NonFinite {
            node: out.index(),
            op: "gradient",
        });
    }
    Ok(grad)
}

/// `s_base + w ∇_{x_t} h(x̄₀(x_t, c, t); y)`. Uses `∇h` rather than
/// `∇ log h` since cosine `h` can be negative.
#[allow(clippy::too_many_arguments)]
pub fn ug_score<M: ScoreModel + ?Sized>(
    s_base: &[f64],
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    w: f64,
) -> Result<Vec<f64>> {
    if w == 0.0 {
        return Ok(s_base.to_vec());
    }
    let g = grad_h_t_wrt_x(x_t, c, t, model, sched, h, y)?;
    check_dim(s_base.len(), g.len(), "ug base score")?;
    Ok(linalg::axpy(s_base, w, &g))
}

/// `∇_c h(μ_{t−1}(x_t, c); y)` where `μ_{t−1} = (x_t + β_t s) / √(1−β_t)` is
/// the noise-free ancestral step, i.e. `h` on still-perturbed data.
pub fn grad_perturbed_h_wrt_c<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    let beta = sched.beta(t);
    let mut g = Graph::new();
    let xn = g.input("x", x_t.len());
    let cn = g.input("c", c.len());
    let s = model.score_expr(&mut g, xn, cn, t, sched);
    let bs = g.scale(s, beta);
    let sum = g.add(xn, bs);
    let mean = g.scale(sum, 1.0 / (1.0 - beta).sqrt());
    let out = h.expr(&mut g, mean, y);
    g.set_output(out);
    g.evaluate(&[("x", x_t), ("c", c)])?;
    g.gradient("c")
}

/// Optional `−λ‖c − anchor‖²` term added to the gradient-based ablations,
/// matching the DATE objective under the previous-embedding origin.
#[derive(Clone, Copy, Debug)]
pub struct L2Pull<'a> {
    pub weight: f64,
    pub anchor: &'a [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn ablation_update<M: ScoreModel + ?Sized>(
    kind: AblationKind,
    x_t: &[f64],
    c_org: &[f64],
    t: usize,
    rho: f64,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    pull: Option<L2Pull<'_>>,
    rng: &mut LabRng,
) -> Result<Embedding> {
    let regularize = |g: Vec<f64>| -> Result<Vec<f64>> {
        match pull {
            Some(p) => {
                check_dim(c_org.len(), p.anchor.len(), "anchor embedding")?;
                Ok(linalg::axpy(&g, -2.0 * p.weight, &linalg::sub(c_org, p.anchor)))
            }
            None => Ok(g),
        }
    };
    let step = match kind {
        AblationKind::Random => Some(linalg::scale(&unit_sphere(rng, c_org.len()), rho)),
        AblationKind::Unnormalized => Some(linalg::scale(
            &regularize(grad_h_t_wrt_c(x_t, c_org, t, model, sched, h, y)?)?,
            rho,
        )),
        AblationKind::PerturbedH => normalized_step(
            &regularize(grad_perturbed_h_wrt_c(x_t, c_org, t, model, sched, h, y)?)?,
            rho,
        ),
    };
    Ok(match step {
        Some(eps) => linalg::add(c_org, &eps).into(),
        None => c_org.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{composite, eval_h_t};
    use crate::autodiff::finite_difference;
    use crate::rng::{stream, Stream};
    use crate::task::DeskTask;

    #[test]
    fn cfg_endpoints_and_example() {
        let (c, u) = ([1.3, -0.2], [0.4, 0.9]);
        assert_eq!(cfg_score(&c, &u, 1.0).unwrap(), c.to_vec());
        assert_eq!(cfg_score(&c, &u, 0.0).unwrap(), u.to_vec());
        assert_eq!(cfg_score(&[1.0, 0.0], &[0.0, 0.0], 8.0).unwrap(), vec![8.0, 0.0]);
        assert!(cfg_score(&[1.0], &u, 1.0).is_err());
    }

    #[test]
    fn cg_reduces_to_unconditional() {
        let u = [0.4, 0.9];
        assert_eq!(cg_score(&u, &[2.0, 3.0], 0.0).unwrap(), u.to_vec());
        assert_eq!(cg_score(&u, &[0.0, 0.0], 5.0).unwrap(), u.to_vec());
    }

    #[test]
    fn cg_with_bayes_classifier_is_conditional_score() {
        let task = DeskTask::desk_default();
        let sched = NoiseSchedule::desk_default();
        let x = [0.6, -1.4];
        for y in 0..4 {
            let t = 10 + 20 * y;
            let s_u = task.prompts.unconditional_score(&x, t, &sched).unwrap();
            let grad = task.prompts.classifier_grad(&x, y, t, &sched).unwrap();
            let got = cg_score(&s_u, &grad, 1.0).unwrap();
            let want = task.model().score(&x, &task.prompts.embeddings[y], t, &sched).unwrap();
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn ug_gradient_matches_finite_differences() {
        let task = DeskTask::desk_default();
        let sched = NoiseSchedule::desk_default();
        let h = task.cosine_h();
        let c = task.prompts.embeddings[1].clone();
        let x = [0.3, 0.8];
        let s0 = vec![0.0, 0.0];
        let got = ug_score(&s0, &x, &c, 40, task.model(), &sched, &h, 1, 1.0).unwrap();
        let fd = finite_difference(|p| eval_h_t(&h, p, &c, 40, task.model(), &sched, 1).unwrap(), &x, 1e-5);
        for (a, b) in got.iter().zip(fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-2));
        }
        assert_eq!(ug_score(&[1.0, 2.0], &x, &c, 40, task.model(), &sched, &h, 1, 0.0).unwrap(), vec![1.0, 2.0]);
        let flat = composite(vec![(h, 0.0)]).unwrap();
        assert_eq!(ug_score(&[1.0, 2.0], &x, &c, 40, task.model(), &sched, &flat, 1, 3.0).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn ablation_kinds() {
        let task = DeskTask::desk_default();
        let sched = NoiseSchedule::desk_default();
        let h = task.cosine_h();
        let c = task.prompts.embeddings[0].clone();
        let mut rng = stream(1, Stream::Ablation, 0);
        for _ in 0..20 {
            let r = ablation_update(AblationKind::Random, &[0.1, 0.2], &c, 30, 0.5, task.model(), &sched, &h, 0, None, &mut rng)
                .unwrap();
            assert!((linalg::dist(&r, &c) - 0.5).abs() < 1e-12);
        }
        let flat = composite(vec![(h.clone(), 0.0)]).unwrap();
        let u = ablation_update(AblationKind::Unnormalized, &[0.1, 0.2], &c, 30, 0.5, task.model(), &sched, &flat, 0, None, &mut rng)
            .unwrap();
        assert_eq!(u.0, c);
        let p = ablation_update(AblationKind::PerturbedH, &[0.1, 0.2], &c, 30, 0.5, task.model(), &sched, &h, 0, None, &mut rng)
            .unwrap();
        assert!((linalg::dist(&p, &c) - 0.5).abs() < 1e-12);
    }
}
