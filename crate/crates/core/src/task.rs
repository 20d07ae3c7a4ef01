//! The default desk task: a 2-D conditional Gaussian mixture over four
//! prompts with a fixed embedding table, plus the matching evaluation
//! functions and the tiny instance used for the exhaustive chain check.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::EvaluationFunction;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::linalg::{self, Mat};
use crate::models::{AnalyticMixtureModel, MixtureComponent, PromptSet};
use crate::rng::LabRng;

pub const DATA_DIM: usize = 2;
pub const EMBED_DIM: usize = 4;
pub const FEATURE_DIM: usize = 8;
pub const NUM_PROMPTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskParams {
    /// Length of each prompt embedding. Means are fixed, so larger values
    /// make the model less sensitive to moves in embedding space.
    pub embed_scale: f64,
    /// Radius of the dominant component means.
    pub radius: f64,
    /// Angle from the dominant to the secondary component, radians.
    pub secondary_angle: f64,
    /// Logit advantage of the dominant component at the prompt embedding.
    pub dominance: f64,
    pub var: f64,
    pub feature_seed: u64,
}

impl Default for DeskParams {
    fn default() -> Self {
        Self {
            embed_scale: 40.0,
            radius: 2.0,
            secondary_angle: PI / 3.0,
            dominance: 1.5,
            var: 0.25,
            feature_seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeskTask {
    pub params: DeskParams,
    pub prompts: PromptSet,
    pub features: Mat,
}

fn polar(r: f64, theta: f64) -> Vec<f64> {
    vec![r * theta.cos(), r * theta.sin()]
}

/// Seeded `rows × cols` Gaussian matrix.
pub fn feature_matrix(seed: u64, rows: usize, cols: usize) -> Mat {
    let mut rng = LabRng::seed_from_u64(seed);
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    Mat::from_rows(&data)
}

impl DeskTask {
    pub fn new(params: DeskParams) -> Result<Self> {
        let s = params.embed_scale;
        // Prompt y sits at angle π/4 + yπ/2; component 0 is the dominant mode
        // and component 1 a rotated secondary mode.
        let angles: Vec<f64> = (0..NUM_PROMPTS).map(|y| PI / 4.0 + y as f64 * PI / 2.0).collect();
        let column_map = |offset: f64| {
            let cols: Vec<Vec<f64>> = angles.iter().map(|a| polar(params.radius / s, a + offset)).collect();
            let rows: Vec<Vec<f64>> = (0..DATA_DIM).map(|d| cols.iter().map(|c| c[d]).collect()).collect();
            Mat::from_rows(&rows)
        };
        let components = vec![
            MixtureComponent {
                mean_map: column_map(0.0),
                offset: vec![0.0; DATA_DIM],
                var: vec![params.var; DATA_DIM],
                logit: vec![params.dominance / s; EMBED_DIM],
            },
            MixtureComponent {
                mean_map: column_map(params.secondary_angle),
                offset: vec![0.0; DATA_DIM],
                var: vec![params.var; DATA_DIM],
                logit: vec![0.0; EMBED_DIM],
            },
        ];
        let model = Arc::new(AnalyticMixtureModel::new(DATA_DIM, EMBED_DIM, components)?);
        let embeddings = (0..NUM_PROMPTS)
            .map(|y| {
                let mut e = vec![0.0; EMBED_DIM];
                e[y] = s;
                e
            })
            .collect();
        Ok(Self {
            features: feature_matrix(params.feature_seed, FEATURE_DIM, DATA_DIM),
            prompts: PromptSet::uniform(model, embeddings)?,
            params,
        })
    }

    pub fn desk_default() -> Self {
        Self::new(DeskParams::default()).expect("valid default task")
    }

    pub fn model(&self) -> &Arc<AnalyticMixtureModel> {
        &self.prompts.model
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::desk_default()
    }

    /// Mean of the highest-weight component at prompt `y`'s embedding.
    pub fn dominant_mean(&self, y: usize) -> Vec<f64> {
        let c = &self.prompts.embeddings[y];
        let w = self.model().weights(c);
        let k = (0..w.len()).fold(0, |best, k| if w[k] > w[best] { k } else { best });
        self.model().component_mean(k, c)
    }

    /// Cosine alignment against the features of each prompt's dominant mean.
    pub fn cosine_h(&self) -> EvaluationFunction {
        let protos = (0..NUM_PROMPTS)
            .map(|y| self.features.matvec(&self.dominant_mean(y)))
            .collect();
        EvaluationFunction::cosine(self.features.clone(), protos).expect("nonzero prototypes")
    }

    /// `sign · ‖x − dominant mean‖²`.
    pub fn quadratic_h(&self, sign: f64) -> EvaluationFunction {
        let targets = (0..NUM_PROMPTS).map(|y| self.dominant_mean(y)).collect();
        EvaluationFunction::quadratic(sign, targets).expect("valid sign")
    }
}

/// Tiny problem for the exhaustive chain check: T = 3, a 1-D embedding that
/// shifts a two-component mixture, and a concave quadratic `h`.
#[derive(Clone, Debug)]
pub struct TinyChainTask {
    pub model: AnalyticMixtureModel,
    pub sched: NoiseSchedule,
    pub h: EvaluationFunction,
    pub c_org: f64,
    pub rho: f64,
}

impl TinyChainTask {
    pub fn desk_default() -> Self {
        let model = AnalyticMixtureModel::new(
            1,
            1,
            vec![
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![1.0]]),
                    offset: vec![-1.0],
                    var: vec![0.2],
                    logit: vec![1.0],
                },
                MixtureComponent {
                    mean_map: Mat::from_rows(&[vec![0.5]]),
                    offset: vec![1.0],
                    var: vec![0.3],
                    logit: vec![-1.0],
                },
            ],
        )
        .expect("valid tiny model");
        Self {
            model,
            sched: NoiseSchedule::from_betas(vec![0.2, 0.5, 0.8]).expect("valid tiny schedule"),
            h: EvaluationFunction::quadratic(-1.0, vec![vec![0.8]]).expect("valid h"),
            c_org: 0.0,
            rho: 0.5,
        }
    }

    /// `n` evenly spaced points across `[c_org − r, c_org + r]`.
    pub fn grid(&self, radius: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![self.c_org];
        }
        (0..n)
            .map(|i| self.c_org + radius * (2.0 * i as f64 / (n - 1) as f64 - 1.0))
            .collect()
    }
}

/// Distance from `c` to the closest embedding in the table.
pub fn nearest_prompt_distance(prompts: &PromptSet, c: &[f64]) -> f64 {
    prompts
        .embeddings
        .iter()
        .map(|e| linalg::dist(e, c))
        .fold(f64::INFINITY, f64::min)
}
