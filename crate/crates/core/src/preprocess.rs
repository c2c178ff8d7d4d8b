//! Normalization, gene selection and population aggregation.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;

use crate::aggregate::ConditionAggregate;
use crate::dataset::{Covariates, PerturbationDataset, ValueSpace};
use crate::error::{Error, Result};

pub const TARGET_SUM: f64 = 1e4;
pub const DEFAULT_MIN_CELLS: usize = 10;

/// `x -> ln(1 + x / total * 1e4)` per cell.
pub fn log_normalize(d: &PerturbationDataset) -> Result<PerturbationDataset> {
    if d.value_space() != ValueSpace::Counts {
        return Err(Error::InvalidArgument(
            "dataset is already log-normalized".into(),
        ));
    }
    let counts = d.counts();
    let mut scale = Vec::with_capacity(d.n_cells());
    for r in 0..d.n_cells() {
        let total = counts.row_sum(r);
        if total <= 0.0 {
            return Err(Error::InvalidData(format!(
                "cell `{}` has zero total count",
                d.cell_ids()[r]
            )));
        }
        scale.push(TARGET_SUM / total);
    }
    let m = counts.map_rows(|r, x| (x * scale[r]).ln_1p());
    d.with_matrix(m, ValueSpace::LogNorm)
}

fn require_lognorm(d: &PerturbationDataset) -> Result<()> {
    if d.value_space() != ValueSpace::LogNorm {
        return Err(Error::InvalidArgument(
            "expected log-normalized values; run log_normalize first".into(),
        ));
    }
    Ok(())
}

/// Column-wise mean and unbiased variance over `rows` (variance 0 when fewer than two rows).
pub(crate) fn column_moments(d: &PerturbationDataset, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let g = d.n_genes();
    let mut sum = vec![0.0; g];
    for &r in rows {
        d.counts().add_row_into(r, &mut sum);
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut ss = vec![0.0; g];
    let mut touched = vec![0usize; g];
    for &r in rows {
        let (idx, val) = d.counts().row(r);
        for (&c, &v) in idx.iter().zip(val) {
            let dv = v - mean[c];
            ss[c] += dv * dv;
            touched[c] += 1;
        }
    }
    // Implicit zeros contribute mean^2 each.
    for c in 0..g {
        ss[c] += (rows.len() - touched[c]) as f64 * mean[c] * mean[c];
    }
    let var = if rows.len() < 2 {
        vec![0.0; g]
    } else {
        ss.iter().map(|s| s / (n - 1.0)).collect()
    };
    (mean, var)
}

/// Welch t-statistics of `a` against `b`, per gene.
fn welch_t(ma: &[f64], va: &[f64], na: usize, mb: &[f64], vb: &[f64], nb: usize) -> Vec<f64> {
    (0..ma.len())
        .map(|g| {
            let diff = ma[g] - mb[g];
            let se = (va[g] / na as f64 + vb[g] / nb as f64).sqrt();
            if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                diff.signum() * f64::INFINITY
            }
        })
        .collect()
}

/// Indices of the `k` largest scores; ties keep original order.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx
}

/// Keeps the union of the `n_hvg` most variable genes, the `n_de` genes with
/// the largest absolute Welch t against matched controls for every condition,
/// and, when `include_perturbed` is set, genes named like a perturbation.
pub fn select_genes(
    d: &PerturbationDataset,
    n_hvg: usize,
    n_de: usize,
    include_perturbed: bool,
) -> Result<(PerturbationDataset, Vec<String>)> {
    require_lognorm(d)?;
    if n_hvg > d.n_genes() {
        return Err(Error::InvalidArgument(format!(
            "n_hvg = {n_hvg} exceeds the gene count {}",
            d.n_genes()
        )));
    }
    let all: Vec<usize> = (0..d.n_cells()).collect();
    let (_, var) = column_moments(d, &all);
    let mut keep: BTreeSet<usize> = top_k(&var, n_hvg).into_iter().collect();

    if n_de > 0 {
        let by_cond = d.rows_by_condition();
        let mut controls: BTreeMap<&Covariates, Vec<usize>> = BTreeMap::new();
        for (ci, rows) in by_cond.iter().enumerate() {
            let c = &d.conditions()[ci];
            if c.is_control(d.control_value()) {
                controls.entry(&c.covariates).or_default().extend(rows);
            }
        }
        let control_moments: BTreeMap<&Covariates, (Vec<f64>, Vec<f64>, usize)> = controls
            .iter()
            .map(|(k, rows)| {
                let (m, v) = column_moments(d, rows);
                (*k, (m, v, rows.len()))
            })
            .collect();
        let picks: Vec<Vec<usize>> = by_cond
            .par_iter()
            .enumerate()
            .map(|(ci, rows)| {
                let c = &d.conditions()[ci];
                if c.is_control(d.control_value()) {
                    return Vec::new();
                }
                let Some((mc, vc, nc)) = control_moments.get(&c.covariates) else {
                    log::warn!("skipping DE for {c}: no matched controls");
                    return Vec::new();
                };
                if rows.len() < 2 || *nc < 2 {
                    log::warn!("skipping DE for {c}: fewer than 2 perturbed or control cells");
                    return Vec::new();
                }
                let (mp, vp) = column_moments(d, rows);
                let t: Vec<f64> = welch_t(&mp, &vp, rows.len(), mc, vc, *nc)
                    .into_iter()
                    .map(f64::abs)
                    .collect();
                top_k(&t, n_de)
            })
            .collect();
        keep.extend(picks.into_iter().flatten());
    }

    if include_perturbed {
        let names: HashSet<String> = d.perturbation_names().into_iter().collect();
        for (i, g) in d.gene_names().iter().enumerate() {
            if names.contains(g) {
                keep.insert(i);
            }
        }
    }

    let cols: Vec<usize> = keep.into_iter().collect();
    let out = d.subset_genes(&cols);
    let names = out.gene_names().to_vec();
    Ok((out, names))
}

fn mean_of_rows(d: &PerturbationDataset, rows: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; d.n_genes()];
    for &r in rows {
        d.counts().add_row_into(r, &mut acc);
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|x| *x /= n);
    acc
}

/// Mean lognorm vector of every condition with at least `min_cells` cells.
pub fn aggregate_means(
    d: &PerturbationDataset,
    min_cells: usize,
) -> Result<Vec<ConditionAggregate>> {
    let rows: Vec<usize> = (0..d.n_cells()).collect();
    aggregate_rows(d, &rows, min_cells)
}

/// Like [`aggregate_means`] restricted to the given rows.
pub fn aggregate_rows(
    d: &PerturbationDataset,
    rows: &[usize],
    min_cells: usize,
) -> Result<Vec<ConditionAggregate>> {
    require_lognorm(d)?;
    let min_cells = min_cells.max(1);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        groups.entry(d.condition_index(r)).or_default().push(r);
    }
    let mut dropped = Vec::new();
    groups.retain(|&ci, rows| {
        let ok = rows.len() >= min_cells;
        if !ok {
            dropped.push(d.conditions()[ci].label());
        }
        ok
    });
    if !dropped.is_empty() {
        log::warn!(
            "{} condition(s) below min_cells={min_cells} excluded: {}",
            dropped.len(),
            dropped.join(", ")
        );
    }
    let groups: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
    Ok(groups
        .par_iter()
        .map(|(ci, rows)| ConditionAggregate {
            condition: d.conditions()[*ci].clone(),
            mean: mean_of_rows(d, rows),
            n_cells: rows.len(),
            logfc: None,
        })
        .collect())
}

/// Attaches `mean - matched control mean` to every aggregate.
pub fn compute_logfc(
    aggs: &[ConditionAggregate],
    control_value: &str,
) -> Result<Vec<ConditionAggregate>> {
    let controls: BTreeMap<&Covariates, &[f64]> = aggs
        .iter()
        .filter(|a| a.condition.is_control(control_value))
        .map(|a| (&a.condition.covariates, a.mean.as_slice()))
        .collect();
    logfc_against(aggs, control_value, |cov| controls.get(cov).copied())
}

/// Attaches LogFCs using control means supplied by `control`.
pub fn logfc_against<'a, F>(
    aggs: &[ConditionAggregate],
    control_value: &str,
    control: F,
) -> Result<Vec<ConditionAggregate>>
where
    F: Fn(&Covariates) -> Option<&'a [f64]>,
{
    aggs.iter()
        .map(|a| {
            let logfc = if a.condition.is_control(control_value) {
                vec![0.0; a.mean.len()]
            } else {
                let c = control(&a.condition.covariates)
                    .ok_or_else(|| Error::MissingControls(a.condition.covariates.to_string()))?;
                if c.len() != a.mean.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "control mean for {} has {} genes, expected {}",
                        a.condition.covariates,
                        c.len(),
                        a.mean.len()
                    )));
                }
                a.mean.iter().zip(c).map(|(m, c)| m - c).collect()
            };
            Ok(ConditionAggregate {
                logfc: Some(logfc),
                ..a.clone()
            })
        })
        .collect()
}

/// Mean lognorm expression of control cells per covariate assignment, over `rows`.
pub fn control_means(
    d: &PerturbationDataset,
    rows: &[usize],
) -> Result<BTreeMap<Covariates, Vec<f64>>> {
    require_lognorm(d)?;
    let mut groups: BTreeMap<Covariates, Vec<usize>> = BTreeMap::new();
    for &r in rows {
        if d.is_control(r) {
            groups.entry(d.covariates(r).clone()).or_default().push(r);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(k, rows)| {
            let m = mean_of_rows(d, &rows);
            (k, m)
        })
        .collect())
}

/// Observed aggregates with LogFCs for the cells in `rows`.
///
/// Control means come from the controls inside `rows`; covariate assignments
/// with no control there fall back to every control cell of the dataset.
pub fn observed_aggregates(
    d: &PerturbationDataset,
    rows: &[usize],
    min_cells: usize,
) -> Result<Vec<ConditionAggregate>> {
    let aggs = aggregate_rows(d, rows, min_cells)?;
    let local = control_means(d, rows)?;
    let all_rows: Vec<usize> = (0..d.n_cells()).collect();
    let global = control_means(d, &all_rows)?;
    logfc_against(&aggs, d.control_value(), |cov| {
        local
            .get(cov)
            .or_else(|| global.get(cov))
            .map(Vec::as_slice)
    })
}
