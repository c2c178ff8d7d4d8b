//! Random hyperparameter search and multi-seed stability reruns.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{predict_split, train_model, Architecture, ModelConfig};
use crate::dataset::PerturbationDataset;
use crate::error::{Error, Result};
use crate::evaluator::{combine_runs, evaluate, MetricConfig, MetricReport, SummaryEntry};
use crate::splitter::{SplitAssignment, SplitLabel};

/// Distribution of one hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamDist {
    LogUniform { lo: f64, hi: f64 },
    FloatStep { lo: f64, hi: f64, step: f64 },
    IntStep { lo: i64, hi: i64, step: i64 },
    Choice(Vec<String>),
}

fn grid_point(x: f64, lo: f64, step: f64) -> bool {
    let k = (x - lo) / step;
    (k - k.round()).abs() < 1e-9
}

impl ParamDist {
    /// Parses `log:lo:hi`, `float:lo:hi:step`, `int:lo:hi:step` or `choice:a,b,...`.
    pub fn parse(s: &str) -> Result<ParamDist> {
        let bad = || Error::InvalidArgument(format!("cannot parse range `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(':').collect();
        let f = |i: usize| {
            parts
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(bad)
        };
        let n = |i: usize| {
            parts
                .get(i)
                .and_then(|v| v.parse::<i64>().ok())
                .ok_or_else(bad)
        };
        let d = match (kind, parts.len()) {
            ("log", 2) => ParamDist::LogUniform {
                lo: f(0)?,
                hi: f(1)?,
            },
            ("float", 3) => ParamDist::FloatStep {
                lo: f(0)?,
                hi: f(1)?,
                step: f(2)?,
            },
            ("int", 3) => ParamDist::IntStep {
                lo: n(0)?,
                hi: n(1)?,
                step: n(2)?,
            },
            ("choice", 1) => ParamDist::Choice(rest.split(',').map(str::to_string).collect()),
            _ => return Err(bad()),
        };
        d.check_shape()?;
        Ok(d)
    }

    fn check_shape(&self) -> Result<()> {
        let ok = match self {
            ParamDist::LogUniform { lo, hi } => *lo > 0.0 && lo <= hi,
            ParamDist::FloatStep { lo, hi, step } => lo <= hi && *step > 0.0,
            ParamDist::IntStep { lo, hi, step } => lo <= hi && *step > 0,
            ParamDist::Choice(v) => !v.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate range {self:?}")))
        }
    }

    /// Whether every value this distribution can produce is allowed by `bound`.
    pub fn within(&self, bound: &ParamDist) -> bool {
        match (self, bound) {
            (ParamDist::LogUniform { lo, hi }, ParamDist::LogUniform { lo: blo, hi: bhi }) => {
                lo >= blo && hi <= bhi
            }
            (
                ParamDist::FloatStep { lo, hi, step },
                ParamDist::FloatStep {
                    lo: blo,
                    hi: bhi,
                    step: bstep,
                },
            ) => {
                lo >= blo
                    && hi <= bhi
                    && grid_point(*lo, *blo, *bstep)
                    && grid_point(*step, 0.0, *bstep)
            }
            (
                ParamDist::IntStep { lo, hi, step },
                ParamDist::IntStep {
                    lo: blo,
                    hi: bhi,
                    step: bstep,
                },
            ) => lo >= blo && hi <= bhi && (lo - blo) % bstep == 0 && step % bstep == 0,
            (ParamDist::Choice(v), ParamDist::Choice(b)) => v.iter().all(|x| b.contains(x)),
            _ => false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        match self {
            ParamDist::LogUniform { lo, hi } => {
                if lo == hi {
                    lo.to_string()
                } else {
                    rng.random_range(lo.ln()..hi.ln()).exp().to_string()
                }
            }
            ParamDist::FloatStep { lo, hi, step } => {
                let k = ((hi - lo) / step + 1e-9).floor() as u64;
                let v = lo + rng.random_range(0..=k) as f64 * step;
                ((v * 1e9).round() / 1e9).to_string()
            }
            ParamDist::IntStep { lo, hi, step } => {
                let k = (hi - lo) / step;
                (lo + rng.random_range(0..=k) * step).to_string()
            }
            ParamDist::Choice(v) => v[rng.random_range(0..v.len())].clone(),
        }
    }
}

fn log_lr() -> ParamDist {
    ParamDist::LogUniform { lo: 5e-6, hi: 5e-3 }
}

fn log_wd() -> ParamDist {
    ParamDist::LogUniform { lo: 1e-8, hi: 1e-3 }
}

fn n_layers() -> ParamDist {
    ParamDist::IntStep {
        lo: 1,
        hi: 7,
        step: 2,
    }
}

fn encoder_width() -> ParamDist {
    ParamDist::IntStep {
        lo: 256,
        hi: 5376,
        step: 1024,
    }
}

/// Ordered list of searched hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub params: Vec<(String, ParamDist)>,
}

impl SearchSpace {
    /// The published ranges for `arch`; also the bounds any narrowed space must respect.
    pub fn default_for(arch: Architecture) -> SearchSpace {
        let params: Vec<(&str, ParamDist)> = match arch {
            Architecture::Linear => vec![("lr", log_lr()), ("wd", log_wd())],
            Architecture::LatentAdditive => vec![
                ("n_layers", n_layers()),
                ("encoder_width", encoder_width()),
                (
                    "latent_dim",
                    ParamDist::Choice(
                        ["64", "128", "192", "256", "512"]
                            .map(String::from)
                            .to_vec(),
                    ),
                ),
                ("lr", log_lr()),
                ("wd", log_wd()),
                (
                    "dropout",
                    ParamDist::FloatStep {
                        lo: 0.0,
                        hi: 0.8,
                        step: 0.1,
                    },
                ),
            ],
            Architecture::DecoderOnly => vec![
                ("n_layers", n_layers()),
                ("encoder_width", encoder_width()),
                ("lr", log_lr()),
                ("wd", log_wd()),
                (
                    "softplus_output",
                    ParamDist::Choice(vec!["true".into(), "false".into()]),
                ),
            ],
        };
        SearchSpace {
            params: params
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    /// Replaces the distribution of one parameter.
    pub fn set(&mut self, name: &str, dist: ParamDist) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(k, _)| k == name)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("`{name}` is not searched for this architecture"))
            })?;
        slot.1 = dist;
        Ok(())
    }

    /// Every range must lie inside the published bounds for `arch`.
    pub fn validate(&self, arch: Architecture) -> Result<()> {
        let bounds = SearchSpace::default_for(arch);
        for (name, dist) in &self.params {
            let bound = bounds
                .params
                .iter()
                .find(|(k, _)| k == name)
                .map(|(_, b)| b)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("`{name}` is not searched for {arch}"))
                })?;
            dist.check_shape()?;
            if !dist.within(bound) {
                return Err(Error::InvalidArgument(format!(
                    "range for `{name}` exceeds the allowed {bound:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<(String, String)> {
        self.params
            .iter()
            .map(|(k, d)| (k.clone(), d.sample(rng)))
            .collect()
    }
}

/// Applies sampled hyperparameters to `base`.
pub fn apply_params(base: &ModelConfig, params: &[(String, String)]) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    for (k, v) in params {
        let key = match k.as_str() {
            "wd" => "weight_decay",
            "encoder_width" => "width",
            other => other,
        };
        cfg.set(key, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpoTrial {
    pub index: usize,
    pub params: Vec<(String, String)>,
    pub seed: u64,
    pub objective: Option<f64>,
    pub status: TrialStatus,
}

/// Random search: every trial samples independently, trains, and is scored
/// by its best validation objective. Failed trials are recorded and skipped.
pub fn hpo_search(
    d: &PerturbationDataset,
    split: &SplitAssignment,
    base: &ModelConfig,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
) -> Result<(ModelConfig, Vec<HpoTrial>)> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be at least 1".into()));
    }
    space.validate(base.architecture)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(Vec<(String, String)>, u64)> = (0..n_trials)
        .map(|i| (space.sample(&mut rng), seed.wrapping_add(i as u64)))
        .collect();
    let trials: Vec<HpoTrial> = plans
        .into_par_iter()
        .enumerate()
        .map(|(index, (params, trial_seed))| {
            let run = || -> Result<f64> {
                let mut cfg = apply_params(base, &params)?;
                cfg.seed = trial_seed;
                let state = train_model(d, split, &cfg)?;
                state.best_val().ok_or_else(|| {
                    Error::Training("no validation conditions to score the trial".into())
                })
            };
            let (objective, status) = match run() {
                Ok(v) if v.is_finite() => (Some(v), TrialStatus::Ok),
                Ok(v) => (
                    None,
                    TrialStatus::Failed(format!("non-finite objective {v}")),
                ),
                Err(e) => (None, TrialStatus::Failed(e.to_string())),
            };
            if let TrialStatus::Failed(msg) = &status {
                log::warn!("trial {index} failed: {msg}");
            }
            HpoTrial {
                index,
                params,
                seed: trial_seed,
                objective,
                status,
            }
        })
        .collect();
    let best = trials
        .iter()
        .filter_map(|t| t.objective.map(|o| (o, t)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.index.cmp(&b.1.index)))
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Training(format!("all {n_trials} trials failed")))?;
    let mut cfg = apply_params(base, &best.params)?;
    cfg.seed = best.seed;
    Ok((cfg, trials))
}

/// One line per trial: index, seed, status, objective and sampled values.
pub fn trials_tsv(trials: &[HpoTrial]) -> String {
    let keys: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| t.params.iter().map(|(k, _)| k.as_str()))
        .collect();
    let mut s = String::from("trial\tseed\tstatus\tobjective");
    for k in &keys {
        s.push('\t');
        s.push_str(k);
    }
    s.push('\n');
    for t in trials {
        let status = match &t.status {
            TrialStatus::Ok => "ok".to_string(),
            TrialStatus::Failed(m) => format!("failed: {}", m.replace(['\t', '\n'], " ")),
        };
        let obj = t.objective.map_or("NA".to_string(), |v| v.to_string());
        let _ = write!(s, "{}\t{}\t{}\t{}", t.index, t.seed, status, obj);
        for k in &keys {
            let v = t
                .params
                .iter()
                .find(|(pk, _)| pk == k)
                .map_or("NA", |(_, v)| v.as_str());
            s.push('\t');
            s.push_str(v);
        }
        s.push('\n');
    }
    s
}

/// Per-seed test reports plus mean and sample standard deviation per metric.
#[derive(Debug)]
pub struct StabilityReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<Result<MetricReport>>,
    pub summary: Vec<SummaryEntry>,
}

/// Trains `cfg` once per seed and evaluates each run on the test cells.
pub fn stability_reruns(
    d: &PerturbationDataset,
    split: &SplitAssignment,
    cfg: &ModelConfig,
    seeds: &[u64],
    metrics: &MetricConfig,
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument(
            "stability reruns need at least 2 seeds".into(),
        ));
    }
    let runs: Vec<Result<MetricReport>> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = ModelConfig {
                seed: s,
                ..cfg.clone()
            };
            let state = train_model(d, split, &cfg)?;
            let (pred, obs) = predict_split(&state, d, split, SplitLabel::Test, s)?;
            let mut report = evaluate(&pred, &obs, metrics)?;
            report
                .provenance
                .push(("model".into(), cfg.architecture.to_string()));
            report.provenance.push(("seed".into(), s.to_string()));
            Ok(report)
        })
        .collect();
    for (s, r) in seeds.iter().zip(&runs) {
        if let Err(e) = r {
            log::warn!("seed {s} failed: {e}");
        }
    }
    let ok: Vec<&MetricReport> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    Ok(StabilityReport {
        seeds: seeds.to_vec(),
        summary: combine_runs(&ok),
        runs,
    })
}

/// `n` consecutive seeds starting at `base`.
pub fn stability_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}
