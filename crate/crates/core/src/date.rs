//! The DATE embedding update `ĉ_t = c_org + ρ ∇_c h_t / ‖∇_c h_t‖`, update
//! placement, origin strategies and repeated updates.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::alignment::{h_t_expr, EvaluationFunction};
use crate::autodiff::Graph;
use crate::diffusion::NoiseSchedule;
use crate::error::{check_dim, LabError, Result};
use crate::linalg;
use crate::models::{Embedding, ScoreModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    Uniform,
    Early,
    Mid,
    Late,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    /// Every update starts from the encoder embedding.
    Fresh,
    /// Every update starts from the previous updated embedding, with an L2
    /// pull back toward the encoder embedding.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DateConfig {
    pub rho: f64,
    pub fraction: f64,
    pub placement: Placement,
    pub origin: Origin,
    pub l2_weight: f64,
    pub iters_per_update: usize,
}

impl Default for DateConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            fraction: 0.1,
            placement: Placement::Uniform,
            origin: Origin::Previous,
            l2_weight: 0.1,
            iters_per_update: 1,
        }
    }
}

impl DateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(LabError::InvalidArgument(format!("rho must be finite and positive, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(LabError::InvalidArgument(format!("fraction must lie in [0,1], got {}", self.fraction)));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(LabError::InvalidArgument(format!("l2_weight must be >= 0, got {}", self.l2_weight)));
        }
        if self.iters_per_update == 0 {
            return Err(LabError::InvalidArgument("iters_per_update must be at least 1".into()));
        }
        Ok(())
    }

    pub fn update_steps(&self, steps: usize) -> Result<BTreeSet<usize>> {
        build_update_schedule(steps, self.fraction, self.placement)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateDirection {
    pub eps: Vec<f64>,
    /// `‖g‖₂` before normalization.
    pub grad_norm: f64,
}

/// `∇_c h(x̄₀(x_t, c, t); y)` by reverse mode through the score model.
pub fn grad_h_t_wrt_c<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
) -> Result<Vec<f64>> {
    Ok(h_t_and_grad_c(x_t, c, t, model, sched, h, y)?.1)
}

/// `(h_t, ∇_c h_t)` from one forward and one backward pass.
pub fn h_t_and_grad_c<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
) -> Result<(f64, Vec<f64>)> {
    check_dim(model.data_dim(), x_t.len(), "x_t")?;
    check_dim(model.embed_dim(), c.len(), "c")?;
    sched.check_t(t)?;
    let mut g = Graph::new();
    let xn = g.input("x", x_t.len());
    let cn = g.input("c", c.len());
    let out = h_t_expr(h, &mut g, xn, cn, t, model, sched, y);
    g.set_output(out);
    let v = g.evaluate(&[("x", x_t), ("c", c)])?[0];
    let grad = g.gradient("c")?;
    if !linalg::all_finite(&grad) {
        return Err(LabError::NonFinite {
            node: out.index(),
            op: "gradient",
        });
    }
    Ok((v, grad))
}

/// Scales `g` to length `rho`; `None` for a zero gradient.
pub fn normalized_step(g: &[f64], rho: f64) -> Option<Vec<f64>> {
    let n = linalg::norm(g);
    (n > 0.0).then(|| linalg::scale(g, rho / n))
}

/// One DATE update at `c_org`. Under [`Origin::Previous`] the objective
/// gains `−λ‖c − anchor‖²`, with `anchor` the encoder embedding. A zero
/// gradient leaves `c_org` unchanged.
#[allow(clippy::too_many_arguments)]
pub fn date_update<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c_org: &[f64],
    t: usize,
    cfg: &DateConfig,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    anchor: &[f64],
) -> Result<(Embedding, UpdateDirection)> {
    check_dim(c_org.len(), anchor.len(), "anchor embedding")?;
    let mut g = grad_h_t_wrt_c(x_t, c_org, t, model, sched, h, y)?;
    if cfg.origin == Origin::Previous && cfg.l2_weight > 0.0 {
        let pull = linalg::sub(c_org, anchor);
        g = linalg::axpy(&g, -2.0 * cfg.l2_weight, &pull);
    }
    let grad_norm = linalg::norm(&g);
    match normalized_step(&g, cfg.rho) {
        Some(eps) => Ok((linalg::add(c_org, &eps).into(), UpdateDirection { eps, grad_norm })),
        None => Ok((
            c_org.into(),
            UpdateDirection {
                eps: vec![0.0; c_org.len()],
                grad_norm,
            },
        )),
    }
}

/// Repeats [`date_update`] `iters_per_update` times, each from the last output.
#[allow(clippy::too_many_arguments)]
pub fn multi_iter_update<M: ScoreModel + ?Sized>(
    x_t: &[f64],
    c_org: &[f64],
    t: usize,
    cfg: &DateConfig,
    model: &M,
    sched: &NoiseSchedule,
    h: &EvaluationFunction,
    y: usize,
    anchor: &[f64],
) -> Result<Embedding> {
    let mut c: Embedding = c_org.into();
    for _ in 0..cfg.iters_per_update.max(1) {
        c = date_update(x_t, &c, t, cfg, model, sched, h, y, anchor)?.0;
    }
    Ok(c)
}

pub fn select_origin(strategy: Origin, c_prev: Option<&Embedding>, c_encoder: &Embedding) -> Embedding {
    match (strategy, c_prev) {
        (Origin::Previous, Some(prev)) => prev.clone(),
        _ => c_encoder.clone(),
    }
}

/// Sampler steps that receive an update. Steps are numbered `steps..=1` in
/// sampling order, so step `steps` is the first (noisiest) one.
pub fn build_update_schedule(steps: usize, fraction: f64, placement: Placement) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(LabError::InvalidArgument(format!("fraction must lie in [0,1], got {fraction}")));
    }
    if placement == Placement::All {
        return Ok((1..=steps).collect());
    }
    let n = ((fraction * steps as f64) - 1e-9).ceil().max(0.0) as usize;
    let n = n.min(steps);
    let positions: Vec<usize> = match placement {
        Placement::Uniform => (0..n).map(|j| j * steps / n.max(1)).collect(),
        Placement::Early | Placement::Mid | Placement::Late => {
            let third = match placement {
                Placement::Early => 0.0,
                Placement::Mid => 1.0,
                _ => 2.0,
            };
            let center = steps as f64 * (2.0 * third + 1.0) / 6.0;
            let start = (center - n as f64 / 2.0).round().max(0.0) as usize;
            let start = start.min(steps - n);
            (start..start + n).collect()
        }
        Placement::All => unreachable!(),
    };
    Ok(positions.into_iter().map(|p| steps - p).collect())
}
