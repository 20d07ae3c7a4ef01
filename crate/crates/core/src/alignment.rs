//! Data-space evaluation functions `h(x₀; y)` and their time-lifted form
//! `h_t(x_t, c) = h(x̄₀(x_t, c, t); y)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::{tweedie_mean, NoiseSchedule};
use crate::error::{check_dim, LabError, Result};
use crate::linalg::{self, Mat};
use crate::models::{tweedie_expr, ScoreModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaluationFunction {
    /// `cos(F_I x₀, f_T(y))`.
    Cosine { features: Mat, prototypes: Vec<Vec<f64>> },
    /// `sign · ‖x₀ − target_y‖²`; `sign = +1` is convex, `−1` concave.
    Quadratic { sign: f64, targets: Vec<Vec<f64>> },
    Composite { members: Vec<WeightedH> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedH {
    pub h: EvaluationFunction,
    pub weight: f64,
}

impl EvaluationFunction {
    pub fn cosine(features: Mat, prototypes: Vec<Vec<f64>>) -> Result<Self> {
        if prototypes.is_empty() {
            return Err(LabError::InvalidArgument("cosine h needs at least one prototype".into()));
        }
        for p in &prototypes {
            check_dim(features.rows, p.len(), "prototype")?;
            if linalg::norm(p) == 0.0 || !linalg::all_finite(p) {
                return Err(LabError::InvalidArgument("prototypes must be finite and nonzero".into()));
            }
        }
        Ok(Self::Cosine { features, prototypes })
    }

    pub fn quadratic(sign: f64, targets: Vec<Vec<f64>>) -> Result<Self> {
        if sign != 1.0 && sign != -1.0 {
            return Err(LabError::InvalidArgument(format!("quadratic sign must be ±1, got {sign}")));
        }
        if targets.is_empty() {
            return Err(LabError::InvalidArgument("quadratic h needs at least one target".into()));
        }
        Ok(Self::Quadratic { sign, targets })
    }

    /// Affine `h(x) = ‖x − a_y‖² − ‖x − b_y‖²`, built from two quadratics.
    pub fn linear(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        composite(vec![(Self::quadratic(1.0, a)?, 1.0), (Self::quadratic(1.0, b)?, -1.0)])
    }

    pub fn num_prompts(&self) -> usize {
        match self {
            Self::Cosine { prototypes, .. } => prototypes.len(),
            Self::Quadratic { targets, .. } => targets.len(),
            Self::Composite { members } => members.iter().map(|m| m.h.num_prompts()).min().unwrap_or(0),
        }
    }

    pub fn is_cosine(&self) -> bool {
        matches!(self, Self::Cosine { .. })
    }

    /// Hessian of a purely quadratic `h` is `2κI`; returns κ, or `None` when
    /// any cosine member is present.
    pub fn curvature(&self) -> Option<f64> {
        match self {
            Self::Cosine { .. } => None,
            Self::Quadratic { sign, .. } => Some(*sign),
            Self::Composite { members } => members
                .iter()
                .map(|m| m.h.curvature().map(|k| k * m.weight))
                .sum(),
        }
    }

    pub fn is_convex(&self) -> bool {
        self.curvature().is_some_and(|k| k >= 0.0)
    }

    fn check_prompt(&self, y: usize) -> Result<()> {
        if y >= self.num_prompts() {
            return Err(LabError::InvalidArgument(format!(
                "prompt id {y} out of range for h with {} prompts",
                self.num_prompts()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x0: &[f64], y: usize) -> Result<f64> {
        self.check_prompt(y)?;
        match self {
            Self::Cosine { features, prototypes } => {
                check_dim(features.cols, x0.len(), "cosine h input")?;
                let f = features.matvec(x0);
                if linalg::norm(&f) == 0.0 {
                    return Err(LabError::Degenerate("zero feature vector in cosine h".into()));
                }
                Ok(linalg::cosine(&f, &prototypes[y]))
            }
            Self::Quadratic { sign, targets } => {
                check_dim(targets[y].len(), x0.len(), "quadratic h input")?;
                let d = linalg::dist(x0, &targets[y]);
                Ok(sign * d * d)
            }
            Self::Composite { members } => members
                .iter()
                .map(|m| Ok(m.weight * m.h.eval(x0, y)?))
                .sum(),
        }
    }

    /// Records `h(x₀; y)` on `g`.
    pub fn expr(&self, g: &mut Graph, x0: NodeId, y: usize) -> NodeId {
        match self {
            Self::Cosine { features, prototypes } => {
                let f = g.affine(Arc::new(features.clone()), None, x0);
                let p = g.constant(prototypes[y].clone());
                g.cosine(f, p)
            }
            Self::Quadratic { sign, targets } => {
                let target = g.constant(targets[y].clone());
                let d = g.sub(x0, target);
                let sq = g.dot(d, d);
                g.scale(sq, *sign)
            }
            Self::Composite { members } => {
                let mut acc: Option<NodeId> = None;
                for m in members {
                    let v = m.h.expr(g, x0, y);
                    let v = g.scale(v, m.weight);
                    acc = Some(match acc {
                        Some(a) => g.add(a, v),
                        None => v,
                    });
                }
                acc.expect("composite is nonempty")
            }
        }
    }

    /// `∇_{x₀} h(x₀; y)`.
    pub fn grad(&self, x0: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_prompt(y)?;
        let mut g = Graph::new();
        let x = g.input("x", x0.len());
        let out = self.expr(&mut g, x, y);
        g.set_output(out);
        g.evaluate(&[("x", x0)])?;
        g.gradient("x")
    }
}

pub fn eval_h(h: &EvaluationFunction, x0: &[f64], y: usize) -> Result<f64> {
    h.eval(x0, y)
}

pub fn eval_h_t<M: ScoreModel + ?Sized>(
    h: &EvaluationFunction,
    x_t: &[f64],
    c: &[f64],
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    y: usize,
) -> Result<f64> {
    h.eval(&tweedie_mean(x_t, c, t, model, sched)?, y)
}

/// Records `h_t(x, c) = h(x̄₀(x, c, t); y)` on `g`.
#[allow(clippy::too_many_arguments)]
pub fn h_t_expr<M: ScoreModel + ?Sized>(
    h: &EvaluationFunction,
    g: &mut Graph,
    x: NodeId,
    c: NodeId,
    t: usize,
    model: &M,
    sched: &NoiseSchedule,
    y: usize,
) -> NodeId {
    let x0 = tweedie_expr(model, g, x, c, t, sched);
    h.expr(g, x0, y)
}

pub fn composite(hs: Vec<(EvaluationFunction, f64)>) -> Result<EvaluationFunction> {
    if hs.is_empty() {
        return Err(LabError::InvalidArgument("composite h needs at least one member".into()));
    }
    if hs.iter().any(|(_, w)| !w.is_finite()) {
        return Err(LabError::InvalidArgument("composite weights must be finite".into()));
    }
    Ok(EvaluationFunction::Composite {
        members: hs.into_iter().map(|(h, weight)| WeightedH { h, weight }).collect(),
    })
}

/// Constants of the cosine approximation bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentBoundInputs {
    /// Lower bound on `‖F_I x₀‖` over the relevant support.
    pub k_lower: f64,
    /// Operator norm of `F_I`.
    pub grad_norm_max: f64,
    /// Mean deviation `E‖x₀ − x̄₀‖`.
    pub m1: f64,
}

impl AlignmentBoundInputs {
    pub fn new(k_lower: f64, grad_norm_max: f64, m1: f64) -> Result<Self> {
        if !(k_lower > 0.0 && grad_norm_max > 0.0 && m1 >= 0.0) || !(k_lower.is_finite() && m1.is_finite()) {
            return Err(LabError::InvalidArgument(format!(
                "bound inputs must be positive and finite: K={k_lower}, L={grad_norm_max}, m1={m1}"
            )));
        }
        Ok(Self { k_lower, grad_norm_max, m1 })
    }
}

/// `‖F_I‖_op · m₁ / K_lower`.
pub fn lipschitz_bound(h: &EvaluationFunction, inputs: &AlignmentBoundInputs) -> Result<f64> {
    if !h.is_cosine() {
        return Err(LabError::InvalidArgument("lipschitz bound applies to cosine h only".into()));
    }
    Ok(inputs.grad_norm_max * inputs.m1 / inputs.k_lower)
}
