//! Drivers behind the command-line subcommands. Each returns its report and
//! writes files into an output directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{config_hash, paired_t_test, MetricsReport};
use super::output::{write_csv, write_json, write_jsonl, Cell};
use super::run::{run_experiment, Experiment, TrajectoryRecord};
use crate::date::{DateConfig, Placement};
use crate::error::{LabError, Result};
use crate::guidance::{AblationKind, GuidanceKind};
use crate::models::{train_dsm, Checkpoint, LearnedScoreNet, TrainOutcome};
use crate::par::Execution;
use crate::task::DeskTask;
use crate::verification::{run_suite, SuiteSizes, VerifyReport};

/// DATE settings used when a config has no `date` section: every step.
pub fn all_step_date() -> DateConfig {
    DateConfig {
        fraction: 1.0,
        placement: Placement::All,
        ..DateConfig::default()
    }
}

fn finals(records: &[TrajectoryRecord]) -> Vec<f64> {
    records.iter().map(|r| r.h_final).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub mean_h: f64,
    pub se_h: Option<f64>,
    pub frechet: f64,
    /// Denoising steps per sample.
    pub steps: usize,
    /// Mean embedding updates per sample.
    pub updates: f64,
    /// Paired mean of `h_method − h_fixed`.
    pub diff_vs_fixed: Option<f64>,
    pub p_vs_fixed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub prompt: usize,
    pub n_samples: usize,
    pub config_hash: String,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    pub fn row(&self, method: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// The method variants `compare` runs, as configs derived from `base`.
/// Guidance baselines need an analytic model and are skipped otherwise.
pub fn compare_variants(base: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let date = base.date.clone().unwrap_or_else(all_step_date);
    let mut plain = base.clone();
    plain.date = None;
    plain.guidance.kind = GuidanceKind::None;
    plain.guidance.ablation_kind = None;
    let analytic = Experiment::new(plain.clone())?.analytic.is_some();

    let mut out = vec![("fixed".to_string(), plain.clone())];
    let mut d = plain.clone();
    d.date = Some(date.clone());
    out.push(("date".into(), d));
    for (name, kind) in [("cfg", GuidanceKind::Cfg), ("cg", GuidanceKind::Cg), ("ug", GuidanceKind::Ug)] {
        if kind != GuidanceKind::Ug && !analytic {
            continue;
        }
        let mut g = plain.clone();
        g.guidance.kind = kind;
        out.push((name.into(), g));
    }
    for (name, kind) in [
        ("random", AblationKind::Random),
        ("unnormalized", AblationKind::Unnormalized),
        ("perturbed_h", AblationKind::PerturbedH),
    ] {
        let mut a = plain.clone();
        a.date = Some(date.clone());
        a.guidance.kind = GuidanceKind::Ablation;
        a.guidance.ablation_kind = Some(kind);
        a.guidance.rho = date.rho;
        out.push((name.into(), a));
    }
    Ok(out)
}

fn compare_row(method: &str, recs: &[TrajectoryRecord], m: &MetricsReport, fixed: Option<&[f64]>) -> Result<CompareRow> {
    let paired = match fixed {
        Some(f) if f.len() > 1 => Some(paired_t_test(&finals(recs), f)?),
        _ => None,
    };
    Ok(CompareRow {
        method: method.into(),
        mean_h: m.mean_h,
        se_h: m.se_h,
        frechet: m.frechet,
        steps: m.trace_t.len(),
        updates: m.mean_updates,
        diff_vs_fixed: paired.as_ref().map(|p| p.mean_diff),
        p_vs_fixed: paired.map(|p| p.p_two_sided),
    })
}

/// Fixed embedding, DATE, guidance baselines and the three ablations on
/// shared noise streams.
pub fn compare(base: &ExperimentConfig, exec: Execution) -> Result<CompareReport> {
    let mut rows = Vec::new();
    let mut fixed: Option<Vec<f64>> = None;
    for (name, cfg) in compare_variants(base)? {
        let (recs, m) = run_experiment(&cfg, exec)?;
        if name != "fixed" {
            rows.push(compare_row(&name, &recs, &m, fixed.as_deref())?);
        } else {
            rows.push(compare_row(&name, &recs, &m, None)?);
            fixed = Some(finals(&recs));
        }
    }
    Ok(CompareReport {
        seed: base.seed,
        prompt: base.prompt,
        n_samples: base.n_samples,
        config_hash: config_hash(base),
        rows,
    })
}

pub const COMPARE_HEADER: [&str; 8] = [
    "method",
    "mean_h",
    "se_h",
    "frechet",
    "steps",
    "updates",
    "diff_vs_fixed",
    "p_vs_fixed",
];

pub fn write_compare(report: &CompareReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rows: Vec<Vec<Cell>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.method.as_str().into(),
                r.mean_h.into(),
                r.se_h.into(),
                r.frechet.into(),
                r.steps.into(),
                r.updates.into(),
                r.diff_vs_fixed.into(),
                r.p_vs_fixed.into(),
            ]
        })
        .collect();
    write_csv(&dir.join("compare.csv"), &COMPARE_HEADER, &rows)?;
    write_json(&dir.join("compare.json"), report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Rho,
    Fraction,
    Placement,
    Iters,
}

impl std::str::FromStr for SweepParam {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rho" => Self::Rho,
            "fraction" => Self::Fraction,
            "placement" => Self::Placement,
            "iters" => Self::Iters,
            other => {
                return Err(LabError::InvalidArgument(format!(
                    "unknown sweep parameter `{other}`; expected rho, fraction, placement or iters"
                )))
            }
        })
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rho => "rho",
            Self::Fraction => "fraction",
            Self::Placement => "placement",
            Self::Iters => "iters",
        }
    }

    /// DATE settings swept from. Without a `date` section: every step, except
    /// a uniform schedule for `fraction` and one-third blocks for `placement`.
    fn base(self, cfg: &ExperimentConfig) -> DateConfig {
        match (&cfg.date, self) {
            (Some(d), Self::Fraction) if d.placement == Placement::All => DateConfig {
                placement: Placement::Uniform,
                ..d.clone()
            },
            (Some(d), _) => d.clone(),
            (None, Self::Fraction) => DateConfig {
                placement: Placement::Uniform,
                ..all_step_date()
            },
            (None, Self::Placement) => DateConfig {
                fraction: 1.0 / 3.0,
                ..all_step_date()
            },
            (None, _) => all_step_date(),
        }
    }

    fn apply(self, d: &mut DateConfig, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| LabError::InvalidArgument(format!("bad {} value `{value}`: {e}", self.name()));
        match self {
            Self::Rho => d.rho = value.parse().map_err(|e| bad(&e))?,
            Self::Fraction => d.fraction = value.parse().map_err(|e| bad(&e))?,
            Self::Iters => d.iters_per_update = value.parse().map_err(|e| bad(&e))?,
            Self::Placement => {
                d.placement = serde_json::from_value(serde_json::Value::String(value.into())).map_err(|e| bad(&e))?
            }
        }
        d.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub mean_h: f64,
    pub se_h: Option<f64>,
    pub frechet: f64,
    pub frechet_ratio: f64,
    pub diff_vs_fixed: Option<f64>,
    /// One-sided paired p-value for `h` above the fixed embedding.
    pub p_above_fixed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub base: DateConfig,
    pub fixed_mean_h: f64,
    pub fixed_frechet: f64,
    pub rows: Vec<SweepRow>,
}

/// One DATE run per value, each paired with the fixed-embedding run.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[String], exec: Execution) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(LabError::InvalidArgument("sweep needs at least one value".into()));
    }
    let base = param.base(cfg);
    let mut plain = cfg.clone();
    plain.date = None;
    plain.guidance.kind = GuidanceKind::None;
    plain.guidance.ablation_kind = None;
    let cells = values
        .iter()
        .map(|v| {
            let mut d = base.clone();
            param.apply(&mut d, v.trim())?;
            let mut c = plain.clone();
            c.date = Some(d);
            Ok((v.trim().to_string(), c))
        })
        .collect::<Result<Vec<_>>>()?;
    let (fixed_recs, fixed_m) = run_experiment(&plain, exec)?;
    let fixed = finals(&fixed_recs);
    let rows = cells
        .into_iter()
        .map(|(value, c)| {
            let (recs, m) = run_experiment(&c, exec)?;
            let paired = (fixed.len() > 1).then(|| paired_t_test(&finals(&recs), &fixed)).transpose()?;
            Ok(SweepRow {
                value,
                mean_h: m.mean_h,
                se_h: m.se_h,
                frechet: m.frechet,
                frechet_ratio: m.frechet / fixed_m.frechet,
                diff_vs_fixed: paired.as_ref().map(|p| p.mean_diff),
                p_above_fixed: paired.map(|p| p.p_greater),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        param,
        base,
        fixed_mean_h: fixed_m.mean_h,
        fixed_frechet: fixed_m.frechet,
        rows,
    })
}

pub fn write_sweep(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let rows: Vec<Vec<Cell>> = report
        .rows
        .iter()
        .map(|r| vec![r.value.as_str().into(), r.mean_h.into(), r.se_h.into(), r.frechet.into()])
        .collect();
    write_csv(&dir.join("sweep.csv"), &[report.param.name(), "mean_h", "se_h", "frechet"], &rows)?;
    write_json(&dir.join("sweep.json"), report)
}

/// Trains the desk network on the config's desk task and writes
/// `checkpoint.json` and `losses.csv`.
pub fn train(cfg: &ExperimentConfig, dir: &Path, exec: Execution) -> Result<TrainOutcome> {
    let params = cfg.model.desk_params().clone();
    let task = DeskTask::new(params.clone())?;
    let sched = cfg.schedule.build()?;
    let net = LearnedScoreNet::desk_default(crate::task::DATA_DIM, crate::task::EMBED_DIM, cfg.train.seed)
        .with_scales(params.var, params.embed_scale)?;
    let outcome = train_dsm(net, &task.prompts, &sched, &cfg.train, exec)?;
    std::fs::create_dir_all(dir)?;
    Checkpoint::LearnedScoreNet(outcome.net.clone()).save(dir.join("checkpoint.json"))?;
    let rows: Vec<Vec<Cell>> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.into(), (*l).into()])
        .collect();
    write_csv(&dir.join("losses.csv"), &["step", "loss"], &rows)?;
    Ok(outcome)
}

/// Runs the config and writes `trajectories.jsonl`, `metrics.json` and
/// `trace.csv`.
pub fn sample(cfg: &ExperimentConfig, dir: &Path, exec: Execution) -> Result<MetricsReport> {
    let (records, report) = run_experiment(cfg, exec)?;
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("trajectories.jsonl"), &records)?;
    write_json(&dir.join("metrics.json"), &report)?;
    let rows: Vec<Vec<Cell>> = report
        .trace_t
        .iter()
        .zip(&report.trace_mean_h)
        .map(|(t, h)| vec![(*t).into(), (*h).into()])
        .collect();
    write_csv(&dir.join("trace.csv"), &["t", "mean_h"], &rows)?;
    Ok(report)
}

/// Runs the verification suite and writes `verify.json`.
pub fn verify(seed: u64, check: Option<&str>, sizes: &SuiteSizes, dir: &Path, exec: Execution) -> Result<VerifyReport> {
    let report = run_suite(seed, sizes, check, exec)?;
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("verify.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(1);
        cfg.n_samples = 6;
        cfg.schedule.steps = 20;
        cfg.seed = 3;
        cfg
    }

    #[test]
    fn compare_runs_every_method() {
        let r = compare(&small(), Execution::Parallel).unwrap();
        let names: Vec<&str> = r.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, ["fixed", "date", "cfg", "cg", "ug", "random", "unnormalized", "perturbed_h"]);
        assert_eq!(r.row("fixed").unwrap().updates, 0.0);
        assert_eq!(r.row("date").unwrap().updates, 20.0);
        assert!(r.rows.iter().all(|r| r.steps == 20));
    }

    #[test]
    fn sweep_writes_one_row_per_value() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<String> = ["0.1", "1"].iter().map(|s| s.to_string()).collect();
        let r = sweep(&small(), SweepParam::Rho, &values, Execution::Parallel).unwrap();
        write_sweep(&r, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rho,mean_h,se_h,frechet");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0.1,"));
    }

    #[test]
    fn sweep_bases() {
        let cfg = small();
        assert_eq!(SweepParam::Rho.base(&cfg).placement, Placement::All);
        assert_eq!(SweepParam::Fraction.base(&cfg).placement, Placement::Uniform);
        assert!((SweepParam::Placement.base(&cfg).fraction - 1.0 / 3.0).abs() < 1e-15);
        let mut d = all_step_date();
        assert!(SweepParam::Placement.apply(&mut d, "early").is_ok());
        assert_eq!(d.placement, Placement::Early);
        assert!(SweepParam::Placement.apply(&mut d, "sideways").is_err());
        assert!(SweepParam::Rho.apply(&mut d, "-1").is_err());
        assert!("bogus".parse::<SweepParam>().is_err());
    }
}
