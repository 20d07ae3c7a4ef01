use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, HSpec, ModelSpec, SamplerKind};
use super::metrics::{compute_metrics, MetricsReport};
use crate::alignment::{composite, EvaluationFunction};
use crate::date::{multi_iter_update, select_origin, DateConfig, Origin};
use crate::diffusion::{step_alg1, step_ddim, step_ddpm, tweedie_from_score, NoiseSchedule};
use crate::error::{LabError, Result};
use crate::guidance::{ablation_update, cfg_score, cg_score, ug_score, AblationKind, GuidanceKind, L2Pull};
use crate::linalg;
use crate::models::{AnalyticMixtureModel, Checkpoint, Embedding, ScoreModel};
use crate::par::{try_map_range, Execution};
use crate::rng::{normal_vec, stream, Stream};
use crate::task::DeskTask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub c_t: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub h: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTimes {
    pub update_secs: f64,
    pub step_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub steps: Vec<StepRecord>,
    pub x0: Vec<f64>,
    pub h_final: f64,
    pub updates: usize,
    /// Wall-clock time; not serialized so output files stay deterministic.
    #[serde(skip)]
    pub times: PhaseTimes,
}

/// How the embedding is chosen at update steps.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingMethod {
    Fixed,
    Date(DateConfig),
    Ablation { kind: AblationKind, rho: f64, schedule: DateConfig },
}

/// A config resolved into models, schedule and evaluation function.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub task: DeskTask,
    pub sched: NoiseSchedule,
    pub score: Arc<dyn ScoreModel>,
    /// Present when the score model is analytic; needed by CFG and CG.
    pub analytic: Option<Arc<AnalyticMixtureModel>>,
    pub h: EvaluationFunction,
}

fn build_h(spec: &HSpec, task: &DeskTask) -> Result<EvaluationFunction> {
    Ok(match spec {
        HSpec::Cosine => task.cosine_h(),
        HSpec::Quadratic { sign } => task.quadratic_h(*sign),
        HSpec::Composite { members } => composite(
            members
                .iter()
                .map(|m| Ok((build_h(&m.h, task)?, m.weight)))
                .collect::<Result<Vec<_>>>()?,
        )?,
    })
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let task = DeskTask::new(cfg.model.desk_params().clone())?;
        let sched = cfg.schedule.build()?;
        let (score, analytic): (Arc<dyn ScoreModel>, _) = match &cfg.model {
            ModelSpec::Desk { .. } => (task.model().clone(), Some(task.model().clone())),
            ModelSpec::Checkpoint { path, .. } => match Checkpoint::load(path)? {
                Checkpoint::LearnedScoreNet(net) => (Arc::new(net), None),
                Checkpoint::AnalyticMixture(m) => {
                    let m = Arc::new(m);
                    (m.clone(), Some(m))
                }
            },
        };
        if score.data_dim() != crate::task::DATA_DIM || score.embed_dim() != crate::task::EMBED_DIM {
            return Err(LabError::Config {
                path: "model".into(),
                msg: format!(
                    "model dims ({}, {}) do not match the desk task",
                    score.data_dim(),
                    score.embed_dim()
                ),
            });
        }
        if matches!(cfg.guidance.kind, GuidanceKind::Cfg | GuidanceKind::Cg) && analytic.is_none() {
            return Err(LabError::Config {
                path: "guidance.kind".into(),
                msg: "cfg and cg need an analytic model".into(),
            });
        }
        let h = build_h(&cfg.h, &task)?;
        Ok(Self {
            cfg,
            task,
            sched,
            score,
            analytic,
            h,
        })
    }

    pub fn method(&self) -> EmbeddingMethod {
        match (&self.cfg.guidance.ablation_kind, self.cfg.guidance.kind, &self.cfg.date) {
            (Some(kind), GuidanceKind::Ablation, d) => EmbeddingMethod::Ablation {
                kind: *kind,
                rho: self.cfg.guidance.rho,
                schedule: d.clone().unwrap_or_default(),
            },
            (_, _, Some(d)) => EmbeddingMethod::Date(d.clone()),
            _ => EmbeddingMethod::Fixed,
        }
    }

    /// `(t, t_prev)` pairs in sampling order.
    pub fn timesteps(&self) -> Vec<(usize, usize)> {
        let big_t = self.sched.steps();
        match (self.cfg.sampler, self.cfg.sampler_steps) {
            (SamplerKind::Ddim, Some(n)) if n < big_t => {
                let ts: Vec<usize> = (1..=n).map(|i| (i * big_t).div_ceil(n)).collect();
                (0..n).rev().map(|i| (ts[i], if i == 0 { 0 } else { ts[i - 1] })).collect()
            }
            _ => (1..=big_t).rev().map(|t| (t, t - 1)).collect(),
        }
    }

    fn update_set(&self, n_steps: usize) -> Result<BTreeSet<usize>> {
        match self.method() {
            EmbeddingMethod::Fixed => Ok(BTreeSet::new()),
            EmbeddingMethod::Date(d) | EmbeddingMethod::Ablation { schedule: d, .. } => d.update_steps(n_steps),
        }
    }

    fn guided_score(&self, x: &[f64], c: &[f64], t: usize) -> Result<Vec<f64>> {
        let g = &self.cfg.guidance;
        let y = self.cfg.prompt;
        match g.kind {
            GuidanceKind::None | GuidanceKind::Ablation => self.score.score(x, c, t, &self.sched),
            GuidanceKind::Cfg => {
                let s_c = self.score.score(x, c, t, &self.sched)?;
                let s_u = self.task.prompts.unconditional_score(x, t, &self.sched)?;
                cfg_score(&s_c, &s_u, g.w)
            }
            GuidanceKind::Cg => {
                let s_u = self.task.prompts.unconditional_score(x, t, &self.sched)?;
                let grad = self.task.prompts.classifier_grad(x, y, t, &self.sched)?;
                cg_score(&s_u, &grad, g.w)
            }
            GuidanceKind::Ug => {
                let s_c = self.score.score(x, c, t, &self.sched)?;
                ug_score(&s_c, x, c, t, &*self.score, &self.sched, &self.h, y, g.w)
            }
        }
    }

    /// One Alg. 1 trajectory: embedding update (if scheduled), then the
    /// denoising step. Noise is drawn at every step so paired runs consume
    /// identical streams whatever the sampler and method.
    pub fn run_trajectory(&self, index: usize) -> Result<TrajectoryRecord> {
        let y = self.cfg.prompt;
        let d = self.score.data_dim();
        let mut rng = stream(self.cfg.seed, Stream::Trajectory, index as u64);
        let mut abl_rng = stream(self.cfg.seed, Stream::Ablation, index as u64);
        let times_list = self.timesteps();
        let n_steps = times_list.len();
        let updates_at = self.update_set(n_steps)?;
        let method = self.method();
        let c_enc: Embedding = self.task.prompts.embedding(y)?.into();
        let mut c = c_enc.clone();
        let mut prev: Option<Embedding> = None;
        let mut x = normal_vec(&mut rng, d);
        let mut steps = Vec::with_capacity(n_steps);
        let mut updates = 0;
        let mut times = PhaseTimes::default();
        let abort = |t: usize, reason: String| LabError::TrajectoryAborted { index, t, reason };

        for (pos, &(t, t_prev)) in times_list.iter().enumerate() {
            let k = n_steps - pos;
            let noise = normal_vec(&mut rng, d);
            if updates_at.contains(&k) {
                let started = Instant::now();
                c = match &method {
                    EmbeddingMethod::Fixed => c,
                    EmbeddingMethod::Date(dc) => {
                        let origin = select_origin(dc.origin, prev.as_ref(), &c_enc);
                        multi_iter_update(&x, &origin, t, dc, &*self.score, &self.sched, &self.h, y, &c_enc)?
                    }
                    EmbeddingMethod::Ablation { kind, rho, schedule } => {
                        let origin = select_origin(schedule.origin, prev.as_ref(), &c_enc);
                        let pull = (schedule.origin == Origin::Previous && schedule.l2_weight > 0.0).then_some(L2Pull {
                            weight: schedule.l2_weight,
                            anchor: &c_enc,
                        });
                        ablation_update(*kind, &x, &origin, t, *rho, &*self.score, &self.sched, &self.h, y, pull, &mut abl_rng)?
                    }
                };
                if !linalg::all_finite(&c) {
                    return Err(abort(t, "non-finite embedding after update".into()));
                }
                prev = Some(c.clone());
                updates += 1;
                times.update_secs += started.elapsed().as_secs_f64();
            }
            let started = Instant::now();
            let s = self.guided_score(&x, &c, t)?;
            let x0_hat = tweedie_from_score(&x, &s, t, &self.sched)?;
            let h = self.h.eval(&x0_hat, y).unwrap_or(f64::NAN);
            let next = match self.cfg.sampler {
                SamplerKind::Ddpm => step_ddpm(&x, &s, t, &noise, &self.sched)?,
                SamplerKind::Alg1 => step_alg1(&x, &s, t, &self.sched)?,
                SamplerKind::Ddim => step_ddim(&x, &x0_hat, t, t_prev, &self.sched)?,
            };
            if !linalg::all_finite(&next) {
                return Err(abort(t, format!("non-finite state {next:?} from x_t = {x:?}, c_t = {:?}", c.0)));
            }
            steps.push(StepRecord {
                t,
                x_t: x,
                c_t: c.0.clone(),
                x0_hat,
                h,
            });
            x = next;
            times.step_secs += started.elapsed().as_secs_f64();
        }
        let h_final = self.h.eval(&x, y).map_err(|e| abort(0, e.to_string()))?;
        Ok(TrajectoryRecord {
            index,
            steps,
            x0: x,
            h_final,
            updates,
            times,
        })
    }

    pub fn run(&self, exec: Execution) -> Result<Vec<TrajectoryRecord>> {
        try_map_range(exec, self.cfg.n_samples, |i| self.run_trajectory(i))
    }
}

/// Runs all trajectories and summarizes them against the true conditional.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<(Vec<TrajectoryRecord>, MetricsReport)> {
    let exp = Experiment::new(cfg.clone())?;
    let records = exp.run(exec)?;
    let report = compute_metrics(&records, cfg, &exp.task.prompts)?;
    Ok((records, report))
}
