//! Matches predictions to reference aggregates, runs the metric suite and
//! writes the report files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::aggregate::{AggregateTable, ConditionAggregate};
use crate::dataset::Condition;
use crate::error::{Error, Result};
use crate::metrics::{
    fit_metric, matrix_distance, mean_std, rank_metric, similarity_matrix, transposed_rank_metric,
    FitMetric, RankScope, SimilarityMatrix,
};
use crate::model::hpo_objective;

pub const SUMMARY_FILE: &str = "summary.tsv";
pub const PER_CONDITION_FILE: &str = "per_condition.tsv";
pub const SIM_PRED_FILE: &str = "similarity_matrix_pred.tsv";
pub const SIM_OBS_FILE: &str = "similarity_matrix_obs.tsv";
pub const REPORT_FILE: &str = "report.txt";

/// Rank at or above which predictions are called collapsed.
pub const COLLAPSE_RANK: f64 = 0.4;
/// Transposed rank exceeding rank by this much signals partial collapse.
pub const TRANSPOSED_GAP: f64 = 0.1;
/// Matrix distance relative to the observed matrix norm signalling partial collapse.
pub const RELATIVE_DISTANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub fit_metrics: Vec<FitMetric>,
    pub rank_metrics: Vec<FitMetric>,
    pub rank_scope: RankScope,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            fit_metrics: FitMetric::ALL.to_vec(),
            rank_metrics: vec![FitMetric::Rmse, FitMetric::Cosine],
            rank_scope: RankScope::Global,
        }
    }
}

/// Aligned prediction/reference pairs plus whatever failed to match.
#[derive(Debug, Clone, PartialEq)]
pub struct Matched {
    pub preds: Vec<ConditionAggregate>,
    pub reference: Vec<ConditionAggregate>,
    pub unmatched_predictions: Vec<Condition>,
    pub unmatched_reference: Vec<Condition>,
}

fn index_unique(t: &AggregateTable, what: &str) -> Result<HashMap<Condition, usize>> {
    let mut m = HashMap::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        if m.insert(r.condition.clone(), i).is_some() {
            return Err(Error::InvalidData(format!(
                "{what} lists condition {} twice",
                r.condition
            )));
        }
    }
    Ok(m)
}

/// Inner join on condition, ordered by condition.
pub fn match_conditions(preds: &AggregateTable, reference: &AggregateTable) -> Result<Matched> {
    if preds.genes != reference.genes {
        let first = preds
            .genes
            .iter()
            .zip(&reference.genes)
            .position(|(a, b)| a != b)
            .unwrap_or(preds.genes.len().min(reference.genes.len()));
        return Err(Error::GeneMismatch(format!(
            "predictions have {} genes, reference {}; first difference at position {first}",
            preds.genes.len(),
            reference.genes.len()
        )));
    }
    let pi = index_unique(preds, "predictions")?;
    let ri = index_unique(reference, "reference")?;
    let mut common: Vec<&Condition> = pi.keys().filter(|c| ri.contains_key(*c)).collect();
    common.sort();
    let mut unmatched_predictions: Vec<Condition> = pi
        .keys()
        .filter(|c| !ri.contains_key(*c))
        .cloned()
        .collect();
    let mut unmatched_reference: Vec<Condition> = ri
        .keys()
        .filter(|c| !pi.contains_key(*c))
        .cloned()
        .collect();
    unmatched_predictions.sort();
    unmatched_reference.sort();
    if common.is_empty() {
        return Err(Error::Metric(
            "predictions and reference share no condition".into(),
        ));
    }
    Ok(Matched {
        preds: common.iter().map(|c| preds.rows[pi[*c]].clone()).collect(),
        reference: common
            .iter()
            .map(|c| reference.rows[ri[*c]].clone())
            .collect(),
        unmatched_predictions,
        unmatched_reference,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    NoCollapse,
    PartialCollapse,
    Collapse,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::NoCollapse => "no collapse signal",
            Verdict::PartialCollapse => "partial collapse",
            Verdict::Collapse => "collapse",
        }
    }

    pub fn from_signals(rank: f64, transposed_rank: f64, relative_distance: f64) -> Verdict {
        if rank >= COLLAPSE_RANK {
            Verdict::Collapse
        } else if transposed_rank >= COLLAPSE_RANK
            || transposed_rank - rank >= TRANSPOSED_GAP
            || relative_distance >= RELATIVE_DISTANCE
        {
            Verdict::PartialCollapse
        } else {
            Verdict::NoCollapse
        }
    }
}

/// Mode-collapse signals computed on RMSE of means and LogFC similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub rmse_mean: f64,
    pub rank: f64,
    pub transposed_rank: f64,
    pub matrix_distance: f64,
    pub relative_matrix_distance: f64,
    pub sim_pred: SimilarityMatrix,
    pub sim_obs: SimilarityMatrix,
    pub verdict: Verdict,
}

fn frobenius(m: &SimilarityMatrix) -> f64 {
    m.values
        .iter()
        .flatten()
        .flatten()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn diagnose_matched(
    preds: &[ConditionAggregate],
    obs: &[ConditionAggregate],
) -> Result<Diagnostics> {
    if preds.len() < 2 {
        return Err(Error::Metric(
            "collapse diagnostics need at least 2 matched conditions".into(),
        ));
    }
    let rmse: Vec<f64> = preds
        .iter()
        .zip(obs)
        .map(|(p, o)| fit_metric(FitMetric::Rmse, &p.mean, &o.mean))
        .collect::<Result<_>>()?;
    let rank = rank_metric(preds, obs, FitMetric::Rmse, RankScope::Global)?.average;
    let transposed_rank =
        transposed_rank_metric(preds, obs, FitMetric::Rmse, RankScope::Global)?.average;
    let sim_pred = similarity_matrix(preds)?;
    let sim_obs = similarity_matrix(obs)?;
    let dist = matrix_distance(&sim_pred, &sim_obs)?;
    let norm = frobenius(&sim_obs);
    let relative = if norm > 0.0 { dist / norm } else { dist };
    Ok(Diagnostics {
        rmse_mean: rmse.iter().sum::<f64>() / rmse.len() as f64,
        rank,
        transposed_rank,
        matrix_distance: dist,
        relative_matrix_distance: relative,
        verdict: Verdict::from_signals(rank, transposed_rank, relative),
        sim_pred,
        sim_obs,
    })
}

/// Collapse diagnostics for the non-control conditions shared by both tables.
pub fn diagnose_collapse(
    preds: &AggregateTable,
    reference: &AggregateTable,
) -> Result<Diagnostics> {
    let m = match_conditions(&preds.without_controls(), &reference.without_controls())?;
    diagnose_matched(&m.preds, &m.reference)
}

/// One line of the macro summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEntry {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation across seeds; `None` for a single run.
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub conditions: Vec<Condition>,
    pub columns: Vec<String>,
    /// `values[condition][column]`; `None` where a rank was not defined.
    pub values: Vec<Vec<Option<f64>>>,
    pub summary: Vec<SummaryEntry>,
    pub unmatched_predictions: Vec<Condition>,
    pub unmatched_reference: Vec<Condition>,
    pub diagnostics: Option<Diagnostics>,
    pub provenance: Vec<(String, String)>,
    pub covariate_keys: Vec<String>,
    pub delimiter: String,
}

impl MetricReport {
    pub fn summary_value(&self, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|e| e.metric == metric)
            .map(|e| e.mean)
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.values.iter().map(|row| row[j]).collect())
    }
}

pub fn rank_column(m: FitMetric) -> String {
    format!("rank_{}", m.column())
}

pub fn transposed_rank_column(m: FitMetric) -> String {
    format!("transposed_rank_{}", m.column())
}

/// Scores the non-control conditions shared by `preds` and `reference`.
pub fn evaluate(
    preds: &AggregateTable,
    reference: &AggregateTable,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    let m = match_conditions(&preds.without_controls(), &reference.without_controls())?;
    if !m.unmatched_predictions.is_empty() || !m.unmatched_reference.is_empty() {
        log::warn!(
            "{} prediction(s) and {} reference condition(s) unmatched",
            m.unmatched_predictions.len(),
            m.unmatched_reference.len()
        );
    }
    let n = m.preds.len();
    let mut columns: Vec<String> = cfg.fit_metrics.iter().map(|f| f.column()).collect();
    let mut values: Vec<Vec<Option<f64>>> = m
        .preds
        .par_iter()
        .zip(&m.reference)
        .map(|(p, o)| {
            cfg.fit_metrics
                .iter()
                .map(|&f| {
                    let (a, b) = if f.uses_logfc() {
                        (p.logfc()?, o.logfc()?)
                    } else {
                        (&p.mean[..], &o.mean[..])
                    };
                    fit_metric(f, a, b).map(Some).map_err(|e| {
                        Error::Metric(format!("{} for {}: {e}", f.column(), p.condition))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    if !cfg.rank_metrics.is_empty() {
        if n < 2 {
            return Err(Error::Metric(format!(
                "rank metrics need at least 2 matched conditions, got {n}"
            )));
        }
        for &f in &cfg.rank_metrics {
            let r = rank_metric(&m.preds, &m.reference, f, cfg.rank_scope)?;
            let t = transposed_rank_metric(&m.preds, &m.reference, f, cfg.rank_scope)?;
            columns.push(rank_column(f));
            columns.push(transposed_rank_column(f));
            for (row, (a, b)) in values
                .iter_mut()
                .zip(r.per_condition.into_iter().zip(t.per_condition))
            {
                row.push(a);
                row.push(b);
            }
        }
    }
    let mut summary: Vec<SummaryEntry> = columns
        .iter()
        .enumerate()
        .filter_map(|(j, c)| {
            let col: Vec<f64> = values.iter().filter_map(|r| r[j]).collect();
            (!col.is_empty()).then(|| SummaryEntry {
                metric: c.clone(),
                mean: col.iter().sum::<f64>() / col.len() as f64,
                std: None,
                n: col.len(),
            })
        })
        .collect();
    let find = |name: &str| summary.iter().find(|e| e.metric == name).map(|e| e.mean);
    if let (Some(rmse), Some(rank)) = (
        find(&FitMetric::Rmse.column()),
        find(&rank_column(FitMetric::Rmse)),
    ) {
        summary.push(SummaryEntry {
            metric: "hpo_objective".into(),
            mean: hpo_objective(rmse, rank)?,
            std: None,
            n,
        });
    }
    let has_logfc = m
        .preds
        .iter()
        .chain(&m.reference)
        .all(|a| a.logfc.is_some());
    let diagnostics = if n >= 2 && has_logfc {
        Some(diagnose_matched(&m.preds, &m.reference)?)
    } else {
        None
    };
    Ok(MetricReport {
        conditions: m.preds.iter().map(|a| a.condition.clone()).collect(),
        columns,
        values,
        summary,
        unmatched_predictions: m.unmatched_predictions,
        unmatched_reference: m.unmatched_reference,
        diagnostics,
        provenance: Vec::new(),
        covariate_keys: reference.covariate_keys.clone(),
        delimiter: reference.delimiter.clone(),
    })
}

/// Mean and sample standard deviation of every summary metric across runs.
pub fn combine_runs(reports: &[&MetricReport]) -> Vec<SummaryEntry> {
    let mut acc: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in reports {
        for e in &r.summary {
            if !acc.contains_key(e.metric.as_str()) {
                order.push(&e.metric);
            }
            acc.entry(&e.metric).or_default().push(e.mean);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let v = &acc[m];
            let (mean, std) = mean_std(v);
            SummaryEntry {
                metric: m.to_string(),
                mean,
                std: (v.len() >= 2).then_some(std),
                n: v.len(),
            }
        })
        .collect()
}

/// `mean ± std` with four decimals, as in results tables.
pub fn format_mean_std(e: &SummaryEntry) -> String {
    match e.std {
        Some(s) => format!("{:.4} ± {:.4}", e.mean, s),
        None => format!("{:.4}", e.mean),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

pub fn summary_tsv(entries: &[SummaryEntry]) -> String {
    let mut s = String::from("metric\tmean\tstd\tn\n");
    for e in entries {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.metric, e.mean, opt(e.std), e.n);
    }
    s
}

impl MetricReport {
    pub fn per_condition_tsv(&self) -> String {
        let mut s = String::from("perturbation");
        for k in &self.covariate_keys {
            s.push('\t');
            s.push_str(k);
        }
        for c in &self.columns {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for (cond, row) in self.conditions.iter().zip(&self.values) {
            s.push_str(&cond.perturbation_label(&self.delimiter));
            for k in &self.covariate_keys {
                s.push('\t');
                s.push_str(cond.covariates.get(k).unwrap_or(""));
            }
            for v in row {
                s.push('\t');
                s.push_str(&opt(*v));
            }
            s.push('\n');
        }
        s
    }

    /// Plain-text block: provenance, macro summary, diagnostics, unmatched conditions.
    pub fn text(&self) -> String {
        let mut s = String::from("[provenance]\n");
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("std = sample standard deviation across seeds\n");
        s.push_str("\n[summary]\n");
        for e in &self.summary {
            let _ = writeln!(s, "{} = {}", e.metric, format_mean_std(e));
        }
        if let Some(d) = &self.diagnostics {
            s.push_str("\n[collapse diagnostics]\n");
            let _ = writeln!(s, "rmse_mean = {:.4}", d.rmse_mean);
            let _ = writeln!(s, "rmse_mean_rank = {:.4}", d.rank);
            let _ = writeln!(s, "rmse_mean_transposed_rank = {:.4}", d.transposed_rank);
            let _ = writeln!(s, "matrix_distance = {:.4}", d.matrix_distance);
            let _ = writeln!(
                s,
                "relative_matrix_distance = {:.4}",
                d.relative_matrix_distance
            );
            let _ = writeln!(s, "verdict = {}", d.verdict.as_str());
        }
        let _ = writeln!(s, "\n[matching]\nmatched = {}", self.conditions.len());
        let _ = writeln!(
            s,
            "unmatched_predictions = {}",
            self.unmatched_predictions.len()
        );
        for c in &self.unmatched_predictions {
            let _ = writeln!(s, "  {}", c.label());
        }
        let _ = writeln!(
            s,
            "unmatched_reference = {}",
            self.unmatched_reference.len()
        );
        for c in &self.unmatched_reference {
            let _ = writeln!(s, "  {}", c.label());
        }
        s
    }

    /// Writes the summary, per-condition table, similarity matrices and text report.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(SUMMARY_FILE), &summary_tsv(&self.summary))?;
        write(&dir.join(PER_CONDITION_FILE), &self.per_condition_tsv())?;
        if let Some(d) = &self.diagnostics {
            write(&dir.join(SIM_PRED_FILE), &d.sim_pred.to_tsv())?;
            write(&dir.join(SIM_OBS_FILE), &d.sim_obs.to_tsv())?;
        }
        write(&dir.join(REPORT_FILE), &self.text())
    }
}
