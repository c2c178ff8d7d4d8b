//! Fit, rank, similarity-matrix and two-sample metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::aggregate::ConditionAggregate;
use crate::dataset::Covariates;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FitMetric {
    Rmse,
    Mae,
    Mse,
    R2,
    Pearson,
    Cosine,
}

impl FitMetric {
    pub const ALL: [FitMetric; 6] = [
        FitMetric::Rmse,
        FitMetric::Mae,
        FitMetric::Mse,
        FitMetric::R2,
        FitMetric::Pearson,
        FitMetric::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FitMetric::Rmse => "rmse",
            FitMetric::Mae => "mae",
            FitMetric::Mse => "mse",
            FitMetric::R2 => "r2",
            FitMetric::Pearson => "pearson",
            FitMetric::Cosine => "cosine",
        }
    }

    /// Error metrics are distances already; similarities are turned into `1 - s`.
    pub fn is_error(self) -> bool {
        matches!(self, FitMetric::Rmse | FitMetric::Mae | FitMetric::Mse)
    }

    /// Error metrics compare mean vectors, similarities compare LogFC vectors.
    pub fn uses_logfc(self) -> bool {
        !self.is_error()
    }

    /// Report column name, e.g. `rmse_mean` or `cosine_logfc`.
    pub fn column(self) -> String {
        let space = if self.uses_logfc() { "logfc" } else { "mean" };
        format!("{}_{space}", self.name())
    }

    /// Distance used when ranking with this metric.
    pub fn as_distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        let v = fit_metric(self, a, b)?;
        Ok(if self.is_error() { v } else { 1.0 - v })
    }
}

impl fmt::Display for FitMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FitMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FitMetric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric `{s}`")))
    }
}

fn check_pair(a: &[f64], b: &[f64], min_len: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < min_len {
        return Err(Error::Metric(format!(
            "need at least {min_len} entries, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Metric("non-finite entry".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `b` is the reference series for `r2`.
pub fn fit_metric(kind: FitMetric, a: &[f64], b: &[f64]) -> Result<f64> {
    let min_len = match kind {
        FitMetric::R2 | FitMetric::Pearson => 2,
        _ => 1,
    };
    check_pair(a, b, min_len)?;
    let n = a.len() as f64;
    Ok(match kind {
        FitMetric::Mse => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n,
        FitMetric::Rmse => {
            (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
        }
        FitMetric::Mae => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        FitMetric::R2 => {
            let mb = mean(b);
            let ss_tot: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
            if ss_tot == 0.0 {
                return Err(Error::Metric("r2 reference has zero variance".into()));
            }
            let ss_res: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
            1.0 - ss_res / ss_tot
        }
        FitMetric::Pearson => {
            let (ma, mb) = (mean(a), mean(b));
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                let (dx, dy) = (x - ma, y - mb);
                sab += dx * dy;
                saa += dx * dx;
                sbb += dy * dy;
            }
            if saa == 0.0 || sbb == 0.0 {
                return Err(Error::Metric("pearson input has zero variance".into()));
            }
            (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
        }
        FitMetric::Cosine => {
            cosine(a, b).ok_or_else(|| Error::Metric("cosine of a zero-norm vector".into()))?
        }
    })
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankScope {
    #[default]
    Global,
    WithinCovariate,
}

impl RankScope {
    pub fn name(self) -> &'static str {
        match self {
            RankScope::Global => "global",
            RankScope::WithinCovariate => "within_covariate",
        }
    }
}

impl FromStr for RankScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(RankScope::Global),
            "within_covariate" => Ok(RankScope::WithinCovariate),
            _ => Err(Error::InvalidArgument(format!("unknown rank scope `{s}`"))),
        }
    }
}

/// `m[i][j] = dist(pred_i, obs_j)`, computed row-parallel.
pub fn cross_distances<F>(preds: &[&[f64]], obs: &[&[f64]], dist: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
{
    if preds.len() != obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} observations",
            preds.len(),
            obs.len()
        )));
    }
    preds
        .par_iter()
        .map(|p| obs.iter().map(|o| dist(p, o)).collect::<Result<Vec<f64>>>())
        .collect()
}

/// Rank of every prediction from a cross-distance matrix: the fraction of
/// foreign predictions at least as close to observation `i` as prediction `i`.
pub fn ranks_from_distances(m: &[Vec<f64>]) -> Vec<f64> {
    let p = m.len();
    (0..p)
        .map(|i| {
            let own = m[i][i];
            let hits = (0..p).filter(|&j| j != i && m[j][i] <= own).count();
            hits as f64 / (p - 1) as f64
        })
        .collect()
}

/// Transposed rank: the fraction of foreign observations at least as close to
/// prediction `i` as observation `i`.
pub fn transposed_ranks_from_distances(m: &[Vec<f64>]) -> Vec<f64> {
    let p = m.len();
    (0..p)
        .map(|i| {
            let own = m[i][i];
            let hits = (0..p).filter(|&j| j != i && m[i][j] <= own).count();
            hits as f64 / (p - 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    /// `None` for conditions in a singleton group.
    pub per_condition: Vec<Option<f64>>,
    pub average: f64,
}

/// The vectors `kind` compares: LogFCs for similarities, means otherwise.
pub fn vectors(aggs: &[ConditionAggregate], kind: FitMetric) -> Result<Vec<&[f64]>> {
    aggs.iter()
        .map(|a| {
            if kind.uses_logfc() {
                a.logfc()
            } else {
                Ok(a.mean.as_slice())
            }
        })
        .collect()
}

fn rank_impl(
    preds: &[ConditionAggregate],
    obs: &[ConditionAggregate],
    kind: FitMetric,
    scope: RankScope,
    transposed: bool,
) -> Result<RankResult> {
    if preds.len() != obs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions but {} observations",
            preds.len(),
            obs.len()
        )));
    }
    for (p, o) in preds.iter().zip(obs) {
        if p.condition != o.condition {
            return Err(Error::InvalidArgument(format!(
                "condition lists differ: {} vs {}",
                p.condition, o.condition
            )));
        }
    }
    let pv = vectors(preds, kind)?;
    let ov = vectors(obs, kind)?;
    let groups: Vec<Vec<usize>> = match scope {
        RankScope::Global => vec![(0..preds.len()).collect()],
        RankScope::WithinCovariate => {
            let mut g: BTreeMap<&Covariates, Vec<usize>> = BTreeMap::new();
            for (i, p) in preds.iter().enumerate() {
                g.entry(&p.condition.covariates).or_default().push(i);
            }
            g.into_values().collect()
        }
    };
    let mut per_condition = vec![None; preds.len()];
    let mut scored = Vec::new();
    for group in groups {
        if group.len() < 2 {
            log::warn!(
                "rank skipped for {}: group has a single condition",
                preds[group[0]].condition
            );
            continue;
        }
        let gp: Vec<&[f64]> = group.iter().map(|&i| pv[i]).collect();
        let go: Vec<&[f64]> = group.iter().map(|&i| ov[i]).collect();
        let m = cross_distances(&gp, &go, |a, b| kind.as_distance(a, b)).map_err(|e| {
            Error::Metric(format!(
                "{e} (in rank group containing {})",
                preds[group[0]].condition
            ))
        })?;
        let r = if transposed {
            transposed_ranks_from_distances(&m)
        } else {
            ranks_from_distances(&m)
        };
        scored.extend_from_slice(&r);
        for (&i, v) in group.iter().zip(r) {
            per_condition[i] = Some(v);
        }
    }
    if scored.is_empty() {
        return Err(Error::Metric(
            "rank metric needs at least 2 conditions in some group".into(),
        ));
    }
    Ok(RankResult {
        per_condition,
        average: mean(&scored),
    })
}

/// Rank metric over aligned prediction and observation lists.
pub fn rank_metric(
    preds: &[ConditionAggregate],
    obs: &[ConditionAggregate],
    kind: FitMetric,
    scope: RankScope,
) -> Result<RankResult> {
    rank_impl(preds, obs, kind, scope, false)
}

pub fn transposed_rank_metric(
    preds: &[ConditionAggregate],
    obs: &[ConditionAggregate],
    kind: FitMetric,
    scope: RankScope,
) -> Result<RankResult> {
    rank_impl(preds, obs, kind, scope, true)
}

/// Pairwise cosine similarities of LogFC vectors; `None` where a vector has zero norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("condition");
        for l in &self.labels {
            s.push('\t');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.values) {
            s.push_str(l);
            for v in row {
                s.push('\t');
                match v {
                    Some(x) => s.push_str(&x.to_string()),
                    None => s.push_str("NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

pub fn similarity_matrix(aggs: &[ConditionAggregate]) -> Result<SimilarityMatrix> {
    if aggs.len() < 2 {
        return Err(Error::Metric(
            "similarity matrix needs at least 2 conditions".into(),
        ));
    }
    let lfc: Vec<&[f64]> = aggs.iter().map(|a| a.logfc()).collect::<Result<_>>()?;
    let values = (0..lfc.len())
        .into_par_iter()
        .map(|i| {
            (0..lfc.len())
                .map(|j| {
                    if i == j && cosine(lfc[i], lfc[i]).is_some() {
                        Some(1.0)
                    } else {
                        cosine(lfc[i], lfc[j])
                    }
                })
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        labels: aggs.iter().map(|a| a.condition.label()).collect(),
        values,
    })
}

/// Frobenius norm of the entrywise difference; entries missing on either side are skipped.
pub fn matrix_distance(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Result<f64> {
    if a.labels != b.labels {
        return Err(Error::DimensionMismatch(
            "similarity matrices cover different conditions".into(),
        ));
    }
    let mut s = 0.0;
    for (ra, rb) in a.values.iter().zip(&b.values) {
        for (x, y) in ra.iter().zip(rb) {
            if let (Some(x), Some(y)) = (x, y) {
                s += (x - y) * (x - y);
            }
        }
    }
    Ok(s.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distributional {
    MmdRbf,
    Energy,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_samples(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(
            "two-sample metrics need at least 2 cells per sample".into(),
        ));
    }
    let g = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != g) {
        return Err(Error::DimensionMismatch(
            "samples have different gene dimensions".into(),
        ));
    }
    Ok(())
}

/// Mean of `f(x, y)` over all cross pairs, or over `i != j` pairs when `within`.
fn pair_mean<F: Fn(&[f64], &[f64]) -> f64 + Sync>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    within: bool,
    f: F,
) -> f64 {
    let rows: Vec<f64> = a
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            b.iter()
                .enumerate()
                .filter(|(j, _)| !within || *j != i)
                .map(|(_, y)| f(x, y))
                .sum::<f64>()
        })
        .collect();
    let n = if within {
        a.len() * (a.len() - 1)
    } else {
        a.len() * b.len()
    };
    rows.iter().sum::<f64>() / n as f64
}

/// Median pairwise distance over the pooled sample; 1 when it is zero.
pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(euclid(pooled[i], pooled[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased two-sample distance between cell populations, clamped at 0.
pub fn distributional_metric(kind: Distributional, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_samples(a, b)?;
    let v = match kind {
        Distributional::MmdRbf => {
            let bw = median_bandwidth(a, b);
            let gamma = 1.0 / (2.0 * bw * bw);
            let k = |x: &[f64], y: &[f64]| {
                let d = euclid(x, y);
                (-gamma * d * d).exp()
            };
            pair_mean(a, a, true, k) + pair_mean(b, b, true, k) - 2.0 * pair_mean(a, b, false, k)
        }
        Distributional::Energy => {
            2.0 * pair_mean(a, b, false, euclid)
                - pair_mean(a, a, true, euclid)
                - pair_mean(b, b, true, euclid)
        }
    };
    Ok(v.max(0.0))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = mean(v);
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Condition;

    fn agg(name: &str, cov: &str, mean: Vec<f64>) -> ConditionAggregate {
        ConditionAggregate {
            condition: Condition::new([name], Covariates::new([("c", cov)])),
            logfc: Some(mean.clone()),
            mean,
            n_cells: 1,
        }
    }

    #[test]
    fn fit_basics() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(fit_metric(FitMetric::Rmse, &v, &v).unwrap(), 0.0);
        assert!((fit_metric(FitMetric::Cosine, &v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            fit_metric(FitMetric::Rmse, &[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(
            fit_metric(FitMetric::Mae, &[0.0, 0.0], &[1.0, 3.0]).unwrap(),
            2.0
        );
        assert_eq!(
            fit_metric(FitMetric::Mse, &[0.0, 0.0], &[1.0, 3.0]).unwrap(),
            5.0
        );
        assert_eq!(fit_metric(FitMetric::R2, &v, &v).unwrap(), 1.0);
        assert!(fit_metric(FitMetric::Cosine, &[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(fit_metric(FitMetric::Pearson, &[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(fit_metric(FitMetric::R2, &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(fit_metric(FitMetric::Rmse, &[1.0], &[1.0, 2.0]).is_err());
        assert!(fit_metric(FitMetric::Rmse, &[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn pearson_is_shift_invariant_cosine_is_not() {
        let a = [1.0, 2.0, 3.0];
        for c in [0.0, 1.5, -7.0] {
            let b: Vec<f64> = [2.0, 4.0, 6.0].iter().map(|x| x + c).collect();
            let p = fit_metric(FitMetric::Pearson, &a, &b).unwrap();
            assert!((p - 1.0).abs() < 1e-12);
        }
        let shifted = [2.0 + 10.0, 4.0 + 10.0, 6.0 + 10.0];
        let cos_shift = fit_metric(FitMetric::Cosine, &a, &shifted).unwrap();
        let cos = fit_metric(FitMetric::Cosine, &a, &[2.0, 4.0, 6.0]).unwrap();
        assert!((cos - 1.0).abs() < 1e-12);
        assert!(cos_shift < 0.99);
    }

    #[test]
    fn identical_predictions_rank_one() {
        let obs: Vec<_> = (0..4)
            .map(|i| agg(&format!("p{i}"), "a", vec![i as f64, 1.0]))
            .collect();
        let preds: Vec<_> = (0..4)
            .map(|i| agg(&format!("p{i}"), "a", vec![5.0, 5.0]))
            .collect();
        let r = rank_metric(&preds, &obs, FitMetric::Rmse, RankScope::Global).unwrap();
        assert!(r.per_condition.iter().all(|v| *v == Some(1.0)));
        assert_eq!(r.average, 1.0);
    }

    #[test]
    fn perfect_predictions_rank_zero() {
        let obs: Vec<_> = (0..5)
            .map(|i| agg(&format!("p{i}"), "a", vec![i as f64, 1.0]))
            .collect();
        let r = rank_metric(&obs, &obs, FitMetric::Rmse, RankScope::Global).unwrap();
        assert_eq!(r.average, 0.0);
        let t = transposed_rank_metric(&obs, &obs, FitMetric::Cosine, RankScope::Global).unwrap();
        assert_eq!(t.average, 0.0);
    }

    #[test]
    fn within_covariate_skips_singletons() {
        let obs = vec![
            agg("p0", "a", vec![0.0]),
            agg("p1", "a", vec![1.0]),
            agg("p2", "b", vec![2.0]),
        ];
        let preds = vec![
            agg("p0", "a", vec![1.1]),
            agg("p1", "a", vec![1.0]),
            agg("p2", "b", vec![2.0]),
        ];
        let r = rank_metric(&preds, &obs, FitMetric::Rmse, RankScope::WithinCovariate).unwrap();
        assert_eq!(r.per_condition, vec![Some(1.0), Some(0.0), None]);
        assert_eq!(r.average, 0.5);
        let mismatched = vec![preds[1].clone(), preds[0].clone(), preds[2].clone()];
        assert!(rank_metric(&mismatched, &obs, FitMetric::Rmse, RankScope::Global).is_err());
    }

    #[test]
    fn similarity_and_distance() {
        let same = vec![agg("a", "x", vec![1.0, 2.0]), agg("b", "x", vec![1.0, 2.0])];
        let s = similarity_matrix(&same).unwrap();
        assert!(s
            .values
            .iter()
            .flatten()
            .all(|v| (v.unwrap() - 1.0).abs() < 1e-12));
        let orth = vec![agg("a", "x", vec![1.0, 0.0]), agg("b", "x", vec![0.0, 3.0])];
        let o = similarity_matrix(&orth).unwrap();
        assert_eq!(
            o.values,
            vec![vec![Some(1.0), Some(0.0)], vec![Some(0.0), Some(1.0)]]
        );
        assert_eq!(matrix_distance(&s, &s).unwrap(), 0.0);
        let d = matrix_distance(&s, &o).unwrap();
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(d, matrix_distance(&o, &s).unwrap());
        assert!(o.to_tsv().starts_with("condition\ta|x\tb|x\na|x\t1\t0\n"));
    }

    #[test]
    fn zero_logfc_entries_are_missing() {
        let aggs = vec![agg("a", "x", vec![0.0, 0.0]), agg("b", "x", vec![1.0, 0.0])];
        let s = similarity_matrix(&aggs).unwrap();
        assert_eq!(s.values[0][0], None);
        assert_eq!(s.values[0][1], None);
        assert_eq!(s.values[1][1], Some(1.0));
        let t = similarity_matrix(&[agg("a", "x", vec![2.0, 0.0]), agg("b", "x", vec![1.0, 0.0])])
            .unwrap();
        assert_eq!(matrix_distance(&s, &t).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_closed_forms() {
        let a = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        let b = vec![vec![3.0, 4.0], vec![3.0, 4.0]];
        assert!(
            (distributional_metric(Distributional::Energy, &a, &b).unwrap() - 10.0).abs() < 1e-12
        );
        let x = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 1.0]];
        for k in [Distributional::Energy, Distributional::MmdRbf] {
            assert!(distributional_metric(k, &x, &x).unwrap().abs() < 1e-10);
        }
        assert!(distributional_metric(Distributional::MmdRbf, &a, &b).unwrap() > 0.0);
        assert!(distributional_metric(Distributional::Energy, &a[..1], &b).is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0, 1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
