//! Flat `key = value` run configuration.
//!
//! Keys are grouped by prefix (`split.`, `model.`, `eval.`, ...). Every key
//! has a default; unknown keys are rejected. `hpo.range.<param>` entries are
//! the only open-ended family and are checked against the search-space names.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pertbench::dataset::{DEFAULT_CONTROL, DEFAULT_DELIMITER};
use pertbench::metrics::{FitMetric, RankScope};
use pertbench::model::hpo::{ParamDist, SearchSpace};
use pertbench::model::ModelConfig;
use pertbench::splitter::{SplitKind, SplitLabel, SplitSpec};
use pertbench::synthgen::SynthSpec;
use pertbench::MetricConfig;

use crate::CliError;

const HPO_RANGE: &str = "hpo.range.";
const HPO_PARAMS: [&str; 7] = [
    "lr",
    "wd",
    "n_layers",
    "encoder_width",
    "latent_dim",
    "dropout",
    "softplus_output",
];

fn defaults() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = Vec::new();
    let mut add = |k: &str, val: String| v.push((k.to_string(), val));
    add("out", String::new());
    add("seed", "0".into());
    add("threads", "0".into());

    for k in ["dataset", "split", "model", "predictions", "reference"] {
        add(&format!("input.{k}"), String::new());
    }
    add("aggregates.control_value", DEFAULT_CONTROL.into());
    add("aggregates.delimiter", DEFAULT_DELIMITER.into());

    add("preprocess.normalize", "true".into());
    add("preprocess.n_hvg", "0".into());
    add("preprocess.n_de", "0".into());
    add("preprocess.include_perturbed", "true".into());
    add(
        "preprocess.min_cells",
        pertbench::preprocess::DEFAULT_MIN_CELLS.to_string(),
    );

    let s = SplitSpec::default();
    add("split.kind", s.kind.as_str().into());
    add("split.m", s.m.to_string());
    add("split.f", s.f.to_string());
    add("split.val_test_ratio", s.val_test_ratio.to_string());
    add(
        "split.min_perturbations_per_level",
        s.min_perturbations_per_level.to_string(),
    );
    add("split.max_retries", s.max_retries.to_string());

    for (k, val) in ModelConfig::default().to_pairs() {
        if k != "seed" {
            add(&format!("model.{k}"), val);
        }
    }

    add("eval.label", SplitLabel::Test.as_str().into());
    let m = MetricConfig::default();
    add("eval.fit_metrics", join_names(&m.fit_metrics));
    add("eval.rank_metrics", join_names(&m.rank_metrics));
    add("eval.rank_scope", m.rank_scope.name().into());

    add("hpo.n_trials", "20".into());
    add("hpo.stability_seeds", "0".into());

    let g = SynthSpec::default();
    add("simulate.n_genes", g.n_genes.to_string());
    add("simulate.n_perturbations", g.n_perturbations.to_string());
    add(
        "simulate.covariates",
        g.covariates
            .iter()
            .map(|(k, n)| format!("{k}:{n}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    add(
        "simulate.cells_per_condition",
        g.cells_per_condition.to_string(),
    );
    add("simulate.control_cells", String::new());
    add("simulate.n_combinations", g.n_combinations.to_string());
    add("simulate.effect_sparsity", g.effect_sparsity.to_string());
    add("simulate.effect_scale", g.effect_scale.to_string());
    add("simulate.covariate_scale", g.covariate_scale.to_string());
    add("simulate.gene_base_scale", g.gene_base_scale.to_string());
    add(
        "simulate.interaction_fraction",
        g.interaction_fraction.to_string(),
    );
    add(
        "simulate.interaction_scale",
        g.interaction_scale.to_string(),
    );
    add("simulate.interaction_sparsity", String::new());
    add("simulate.noise", g.noise.to_string());
    add("simulate.library_log_mean", g.library_log_mean.to_string());
    add("simulate.library_log_sd", g.library_log_sd.to_string());
    v
}

fn join_names(m: &[FitMetric]) -> String {
    m.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
}

/// Resolved configuration: defaults overlaid by the config file and `--set` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: defaults().into_iter().collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim();
        if let Some(param) = key.strip_prefix(HPO_RANGE) {
            if !HPO_PARAMS.contains(&param) {
                return Err(CliError::Config(format!(
                    "unknown search parameter `{param}` (expected one of {})",
                    HPO_PARAMS.join(", ")
                )));
            }
        } else if !self.values.contains_key(key) {
            return Err(CliError::Config(format!("unknown config key `{key}`")));
        }
        self.values
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(pertbench::Error::io(path, e)))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    i + 1
                ))
            })?;
            self.set(k, v).map_err(|e| {
                CliError::Config(format!("{}:{}: {}", path.display(), i + 1, e.message()))
            })?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| CliError::Config(format!("{key} = `{}`: {e}", self.get(key))))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        if self.get(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key).map(Some)
        }
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parse("seed")
    }

    pub fn out(&self) -> Result<PathBuf, CliError> {
        match self.get("out") {
            "" => Err(CliError::Usage(
                "no output directory (use --out or `out = ...`)".into(),
            )),
            p => Ok(PathBuf::from(p)),
        }
    }

    /// Path-valued `input.<name>`, required.
    pub fn input(&self, name: &str) -> Result<PathBuf, CliError> {
        self.optional_input(name)?
            .ok_or_else(|| CliError::Config(format!("input.{name} is required for this command")))
    }

    pub fn optional_input(&self, name: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self
            .optional::<String>(&format!("input.{name}"))?
            .map(PathBuf::from))
    }

    pub fn split_spec(&self) -> Result<SplitSpec, CliError> {
        Ok(SplitSpec {
            kind: self.parse::<SplitKind>("split.kind")?,
            m: self.parse("split.m")?,
            f: self.parse("split.f")?,
            val_test_ratio: self.parse("split.val_test_ratio")?,
            min_perturbations_per_level: self.parse("split.min_perturbations_per_level")?,
            max_retries: self.parse("split.max_retries")?,
            seed: self.seed()?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut pairs: Vec<(String, String)> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        pairs.push(("seed".into(), self.get("seed").to_string()));
        ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .map_err(CliError::Core)
    }

    pub fn metric_config(&self) -> Result<MetricConfig, CliError> {
        let list = |key: &str| -> Result<Vec<FitMetric>, CliError> {
            self.get(key)
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| CliError::Config(format!("{key}: {e}")))
                })
                .collect()
        };
        Ok(MetricConfig {
            fit_metrics: list("eval.fit_metrics")?,
            rank_metrics: list("eval.rank_metrics")?,
            rank_scope: self.parse::<RankScope>("eval.rank_scope")?,
        })
    }

    pub fn label(&self) -> Result<SplitLabel, CliError> {
        self.parse("eval.label")
    }

    pub fn search_space(
        &self,
        arch: pertbench::model::Architecture,
    ) -> Result<SearchSpace, CliError> {
        let mut space = SearchSpace::default_for(arch);
        for (k, v) in &self.values {
            if let Some(param) = k.strip_prefix(HPO_RANGE) {
                space.set(param, ParamDist::parse(v)?)?;
            }
        }
        Ok(space)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, CliError> {
        let covariates = self
            .get("simulate.covariates")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (k, n) = s.split_once(':').ok_or_else(|| {
                    CliError::Config(format!(
                        "simulate.covariates: expected key:levels, got `{s}`"
                    ))
                })?;
                let n = n.parse().map_err(|_| {
                    CliError::Config(format!("simulate.covariates: invalid level count `{n}`"))
                })?;
                Ok((k.to_string(), n))
            })
            .collect::<Result<_, CliError>>()?;
        Ok(SynthSpec {
            n_genes: self.parse("simulate.n_genes")?,
            n_perturbations: self.parse("simulate.n_perturbations")?,
            covariates,
            cells_per_condition: self.parse("simulate.cells_per_condition")?,
            control_cells: self.optional("simulate.control_cells")?,
            n_combinations: self.parse("simulate.n_combinations")?,
            effect_sparsity: self.parse("simulate.effect_sparsity")?,
            effect_scale: self.parse("simulate.effect_scale")?,
            covariate_scale: self.parse("simulate.covariate_scale")?,
            gene_base_scale: self.parse("simulate.gene_base_scale")?,
            interaction_fraction: self.parse("simulate.interaction_fraction")?,
            interaction_scale: self.parse("simulate.interaction_scale")?,
            interaction_sparsity: self.optional("simulate.interaction_sparsity")?,
            noise: self.parse("simulate.noise")?,
            library_log_mean: self.parse("simulate.library_log_mean")?,
            library_log_sd: self.parse("simulate.library_log_sd")?,
            seed: self.seed()?,
        })
    }

    /// Every key except `out` and `threads`, which do not affect outputs.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            if k != "out" && k != "threads" {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }
}
