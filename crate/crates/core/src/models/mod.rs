//! Conditional score models `s(x, c, t)`.
//!
//! [`AnalyticMixtureModel`] has exact scores and log-likelihoods and is the
//! oracle for every theory check; [`LearnedScoreNet`] is a small MLP trained
//! by denoising score matching against it.

mod analytic;
mod checkpoint;
mod learned;
mod prompts;

use std::ops::Deref;

use serde::{Deserialize, Serialize};

pub use analytic::{AnalyticMixtureModel, MixtureComponent};
pub use checkpoint::Checkpoint;
pub use learned::{train_dsm, DenseLayer, LearnedScoreNet, TrainConfig, TrainOutcome};
pub use prompts::{PromptSet, UnconditionalModel};

use crate::autodiff::{Graph, NodeId};
use crate::diffusion::NoiseSchedule;
use crate::error::Result;

/// A conditioning embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

impl From<&[f64]> for Embedding {
    fn from(v: &[f64]) -> Self {
        Embedding(v.to_vec())
    }
}

pub trait ScoreModel: Send + Sync {
    fn data_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;

    /// Numeric score at `(x, c, t)`.
    fn score(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>>;

    /// Records the score computation on `g` so it can be differentiated in
    /// both `x` and `c`.
    fn score_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId;
}

impl<M: ScoreModel + ?Sized> ScoreModel for std::sync::Arc<M> {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn score(&self, x: &[f64], c: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
        (**self).score(x, c, t, sched)
    }
    fn score_expr(&self, g: &mut Graph, x: NodeId, c: NodeId, t: usize, sched: &NoiseSchedule) -> NodeId {
        (**self).score_expr(g, x, c, t, sched)
    }
}

/// Tweedie mean `x̄₀ = (x + (1−ᾱ_t) s) / √ᾱ_t` recorded on a graph.
pub fn tweedie_expr<M: ScoreModel + ?Sized>(
    model: &M,
    g: &mut Graph,
    x: NodeId,
    c: NodeId,
    t: usize,
    sched: &NoiseSchedule,
) -> NodeId {
    let ab = sched.alpha_bar(t);
    let s = model.score_expr(g, x, c, t, sched);
    let ks = g.scale(s, 1.0 - ab);
    let sum = g.add(x, ks);
    g.scale(sum, 1.0 / ab.sqrt())
}
