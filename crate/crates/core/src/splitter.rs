//! Train/val/test split generation, imbalance quantification and split files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Condition, Covariates, PerturbationDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

impl SplitLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Val => "val",
            SplitLabel::Test => "test",
        }
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitLabel::Train),
            "val" => Ok(SplitLabel::Val),
            "test" => Ok(SplitLabel::Test),
            _ => Err(Error::Split(format!("unknown split label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    CovariateTransfer,
    Combo,
    InverseCombo,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::CovariateTransfer => "covariate_transfer",
            SplitKind::Combo => "combo",
            SplitKind::InverseCombo => "inverse_combo",
        }
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "covariate_transfer" => Ok(SplitKind::CovariateTransfer),
            "combo" => Ok(SplitKind::Combo),
            "inverse_combo" => Ok(SplitKind::InverseCombo),
            _ => Err(Error::InvalidArgument(format!("unknown split kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Maximum number of held-out covariate levels.
    pub m: usize,
    /// Fraction of perturbations held out per held-out level.
    pub f: f64,
    /// Share of held-out conditions sent to val; the rest go to test.
    pub val_test_ratio: f64,
    pub seed: u64,
    pub min_perturbations_per_level: usize,
    pub max_retries: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            kind: SplitKind::CovariateTransfer,
            m: 1,
            f: 0.3,
            val_test_ratio: 0.5,
            seed: 0,
            min_perturbations_per_level: 30,
            max_retries: 100,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.f > 0.0 && self.f < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "f = {} must lie in (0, 1)",
                self.f
            )));
        }
        if self.m < 1 {
            return Err(Error::InvalidArgument("m must be at least 1".into()));
        }
        if !(self.val_test_ratio > 0.0 && self.val_test_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "val_test_ratio = {} must lie in (0, 1)",
                self.val_test_ratio
            )));
        }
        if self.max_retries < 1 {
            return Err(Error::InvalidArgument(
                "max_retries must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One label per cell, keyed by cell id in dataset row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    cell_ids: Vec<String>,
    labels: Vec<SplitLabel>,
}

impl SplitAssignment {
    pub fn new(cell_ids: Vec<String>, labels: Vec<SplitLabel>) -> Result<Self> {
        if cell_ids.len() != labels.len() {
            return Err(Error::DimensionMismatch(
                "cell ids and labels differ in length".into(),
            ));
        }
        Ok(SplitAssignment { cell_ids, labels })
    }

    pub fn all_train(d: &PerturbationDataset) -> Self {
        SplitAssignment {
            cell_ids: d.cell_ids().to_vec(),
            labels: vec![SplitLabel::Train; d.n_cells()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, SplitLabel)> {
        self.cell_ids
            .iter()
            .map(String::as_str)
            .zip(self.labels.iter().copied())
    }

    /// Labels aligned with the rows of `d`; every cell must be covered.
    pub fn labels_for(&self, d: &PerturbationDataset) -> Result<Vec<SplitLabel>> {
        let map: HashMap<&str, SplitLabel> = self.iter().collect();
        let mut out = Vec::with_capacity(d.n_cells());
        for id in d.cell_ids() {
            match map.get(id.as_str()) {
                Some(&l) => out.push(l),
                None => return Err(Error::Split(format!("cell `{id}` has no split label"))),
            }
        }
        if map.len() != d.n_cells() {
            let known: BTreeSet<&str> = d.cell_ids().iter().map(String::as_str).collect();
            if let Some(extra) = self.cell_ids.iter().find(|c| !known.contains(c.as_str())) {
                return Err(Error::Split(format!("split names unknown cell `{extra}`")));
            }
        }
        Ok(out)
    }

    /// Rows of `d` carrying `label`.
    pub fn rows(&self, d: &PerturbationDataset, label: SplitLabel) -> Result<Vec<usize>> {
        Ok(self
            .labels_for(d)?
            .into_iter()
            .enumerate()
            .filter(|(_, l)| *l == label)
            .map(|(i, _)| i)
            .collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["cell_id", "split"])
            .map_err(|e| csv_error(path, e))?;
        for (id, l) in self.iter() {
            w.write_record([id, l.as_str()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a `cell_id,split` file and checks it covers exactly the cells of `d`.
    pub fn read_csv(path: impl AsRef<Path>, d: &PerturbationDataset) -> Result<Self> {
        let path = path.as_ref();
        let file = path.display().to_string();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if headers.len() != 2 || &headers[0] != "cell_id" || &headers[1] != "split" {
            return Err(Error::format(&file, 1, "expected header `cell_id,split`"));
        }
        let mut labels: HashMap<String, SplitLabel> = HashMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = i + 2;
            let label: SplitLabel = rec[1]
                .parse()
                .map_err(|e: Error| Error::format(&file, line, e.to_string()))?;
            if labels.insert(rec[0].to_string(), label).is_some() {
                return Err(Error::format(
                    &file,
                    line,
                    format!("duplicate cell `{}`", &rec[0]),
                ));
            }
        }
        let mut out = Vec::with_capacity(d.n_cells());
        for id in d.cell_ids() {
            match labels.remove(id) {
                Some(l) => out.push(l),
                None => {
                    return Err(Error::Split(format!(
                        "split file has no label for cell `{id}`"
                    )))
                }
            }
        }
        if let Some(extra) = labels.keys().min() {
            return Err(Error::Split(format!(
                "split file names unknown cell `{extra}`"
            )));
        }
        SplitAssignment::new(d.cell_ids().to_vec(), out)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path.display().to_string(), line, e.to_string())
    }
}

/// `round(f * n)`, at least 1.
pub fn holdout_count(f: f64, n: usize) -> usize {
    ((f * n as f64).round() as usize).max(1)
}

/// Number of held-out units sent to val: `round(r * n)` kept inside `[1, n - 1]` when `n >= 2`.
pub fn val_count(r: f64, n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((r * n as f64).round() as usize).clamp(1, n - 1)
}

fn non_control_sets(d: &PerturbationDataset) -> BTreeMap<&Covariates, BTreeSet<&BTreeSet<String>>> {
    let mut out: BTreeMap<&Covariates, BTreeSet<&BTreeSet<String>>> = BTreeMap::new();
    for c in d.conditions() {
        let entry = out.entry(&c.covariates).or_default();
        if !c.is_control(d.control_value()) {
            entry.insert(&c.perturbations);
        }
    }
    out.retain(|_, v| !v.is_empty());
    out
}

/// Labels every cell: held-out conditions get val/test, all else train.
fn assign(d: &PerturbationDataset, held: &BTreeMap<&Condition, SplitLabel>) -> SplitAssignment {
    let labels = (0..d.n_cells())
        .map(|r| {
            held.get(d.condition(r))
                .copied()
                .unwrap_or(SplitLabel::Train)
        })
        .collect();
    SplitAssignment {
        cell_ids: d.cell_ids().to_vec(),
        labels,
    }
}

fn split_val_test<'a>(
    mut held: Vec<&'a Condition>,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> BTreeMap<&'a Condition, SplitLabel> {
    held.sort();
    held.shuffle(rng);
    let n_val = val_count(ratio, held.len());
    held.into_iter()
        .enumerate()
        .map(|(i, c)| {
            (
                c,
                if i < n_val {
                    SplitLabel::Val
                } else {
                    SplitLabel::Test
                },
            )
        })
        .collect()
}

/// Holds out perturbations in randomly chosen covariate levels, keeping every
/// held-out perturbation observed in training under some other level.
pub fn split_covariate_transfer(
    d: &PerturbationDataset,
    spec: &SplitSpec,
) -> Result<SplitAssignment> {
    spec.validate()?;
    if spec.kind != SplitKind::CovariateTransfer {
        return Err(Error::InvalidArgument(
            "split kind must be covariate_transfer".into(),
        ));
    }
    let levels = non_control_sets(d);
    if levels.len() < 2 {
        return Err(Error::Split(format!(
            "covariate transfer needs at least 2 covariate levels, found {}",
            levels.len()
        )));
    }
    let level_list: Vec<&Covariates> = levels.keys().copied().collect();
    let mut presence: HashMap<&BTreeSet<String>, usize> = HashMap::new();
    for perts in levels.values() {
        for p in perts {
            *presence.entry(*p).or_default() += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut last_err = String::new();
    for _ in 0..spec.max_retries {
        let h = rng.random_range(1..=spec.m.min(level_list.len()));
        let mut order = level_list.clone();
        order.shuffle(&mut rng);
        let chosen = &order[..h];

        let mut held: BTreeMap<&Covariates, BTreeSet<&BTreeSet<String>>> = BTreeMap::new();
        let mut ok = true;
        for &lvl in chosen {
            let perts = &levels[lvl];
            let n_hold = holdout_count(spec.f, perts.len());
            if perts.len() - n_hold.min(perts.len()) < spec.min_perturbations_per_level {
                last_err = format!(
                    "holding out {n_hold} of {} perturbations in {lvl} leaves fewer than {} for training",
                    perts.len(),
                    spec.min_perturbations_per_level
                );
                ok = false;
                break;
            }
            let mut cands: Vec<&BTreeSet<String>> =
                perts.iter().copied().filter(|p| presence[p] >= 2).collect();
            if cands.len() < n_hold {
                last_err = format!(
                    "{lvl} has only {} perturbations shared with other levels, {n_hold} needed",
                    cands.len()
                );
                ok = false;
                break;
            }
            cands.shuffle(&mut rng);
            held.insert(lvl, cands[..n_hold].iter().copied().collect());
        }
        if !ok {
            continue;
        }
        // Every held-out perturbation must stay in training under another level.
        let uncovered = held
            .iter()
            .flat_map(|(lvl, ps)| ps.iter().map(move |p| (*lvl, *p)))
            .find(|(lvl, p)| {
                !levels.iter().any(|(other, ps)| {
                    other != lvl
                        && ps.contains(p)
                        && !held.get(other).is_some_and(|h| h.contains(p))
                })
            });
        if let Some((lvl, p)) = uncovered {
            last_err = format!("perturbation {p:?} would be unseen in training outside {lvl}");
            continue;
        }
        let held_conditions: Vec<&Condition> = d
            .conditions()
            .iter()
            .filter(|c| {
                held.get(&c.covariates)
                    .is_some_and(|ps| ps.contains(&c.perturbations))
            })
            .collect();
        return Ok(assign(
            d,
            &split_val_test(held_conditions, spec.val_test_ratio, &mut rng),
        ));
    }
    Err(Error::Split(format!(
        "no valid covariate-transfer split after {} attempts: {last_err}",
        spec.max_retries
    )))
}

/// Combination (`combo`) or inverse-combination (`inverse_combo`) holdout.
pub fn split_combo(d: &PerturbationDataset, spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    let control = d.control_value();
    let singles: BTreeSet<(&Covariates, &str)> = d
        .conditions()
        .iter()
        .filter(|c| c.perturbations.len() == 1 && !c.is_control(control))
        .map(|c| {
            (
                &c.covariates,
                c.perturbations.iter().next().unwrap().as_str(),
            )
        })
        .collect();
    let combos: Vec<&Condition> = d
        .conditions()
        .iter()
        .filter(|c| c.is_combination())
        .collect();
    if combos.is_empty() {
        return Err(Error::Split(
            "dataset has no perturbation combinations".into(),
        ));
    }
    let covered = |c: &Condition| {
        c.perturbations
            .iter()
            .all(|p| singles.contains(&(&c.covariates, p.as_str())))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    match spec.kind {
        SplitKind::Combo => {
            let mut eligible: Vec<&Condition> = Vec::new();
            for &c in &combos {
                if covered(c) {
                    eligible.push(c);
                } else {
                    log::warn!("combination {c} has constituents never seen alone; kept in train");
                }
            }
            let n_hold = holdout_count(spec.f, combos.len());
            if eligible.len() < n_hold {
                log::warn!(
                    "only {} of {} requested combinations can be held out",
                    eligible.len(),
                    n_hold
                );
            }
            if eligible.is_empty() {
                return Err(Error::Split(
                    "no combination has all constituents observed alone".into(),
                ));
            }
            eligible.shuffle(&mut rng);
            eligible.truncate(n_hold);
            Ok(assign(
                d,
                &split_val_test(eligible, spec.val_test_ratio, &mut rng),
            ))
        }
        SplitKind::InverseCombo => {
            let mut duals: Vec<&Condition> = combos
                .iter()
                .copied()
                .filter(|c| c.perturbations.len() == 2 && covered(c))
                .collect();
            if duals.is_empty() {
                return Err(Error::Split(
                    "no dual perturbation has both members observed alone".into(),
                ));
            }
            let target = holdout_count(spec.f, duals.len());
            duals.shuffle(&mut rng);
            let mut held: BTreeSet<(&Covariates, &str)> = BTreeSet::new();
            let mut kept: BTreeSet<(&Covariates, &str)> = BTreeSet::new();
            for dual in duals {
                if held.len() >= target {
                    break;
                }
                let members: Vec<&str> = dual.perturbations.iter().map(String::as_str).collect();
                let pick = rng.random_range(0..2);
                let (out, partner) = (
                    (&dual.covariates, members[pick]),
                    (&dual.covariates, members[1 - pick]),
                );
                if kept.contains(&out) || held.contains(&partner) || held.contains(&out) {
                    continue;
                }
                held.insert(out);
                kept.insert(partner);
            }
            if held.len() < target {
                log::warn!(
                    "inverse combo: held out {} of {} requested singletons",
                    held.len(),
                    target
                );
            }
            let held_conditions: Vec<&Condition> = d
                .conditions()
                .iter()
                .filter(|c| {
                    c.perturbations.len() == 1
                        && held.contains(&(
                            &c.covariates,
                            c.perturbations.iter().next().unwrap().as_str(),
                        ))
                })
                .collect();
            Ok(assign(
                d,
                &split_val_test(held_conditions, spec.val_test_ratio, &mut rng),
            ))
        }
        SplitKind::CovariateTransfer => Err(Error::InvalidArgument(
            "split kind must be combo or inverse_combo".into(),
        )),
    }
}

/// Dispatches on `spec.kind`.
pub fn generate_split(d: &PerturbationDataset, spec: &SplitSpec) -> Result<SplitAssignment> {
    match spec.kind {
        SplitKind::CovariateTransfer => split_covariate_transfer(d, spec),
        SplitKind::Combo | SplitKind::InverseCombo => split_combo(d, spec),
    }
}

/// Drops perturbed training cells outside `train_levels` (matched by
/// covariate label), leaving val/test and all controls untouched.
pub fn restrict_training(
    d: &PerturbationDataset,
    split: &SplitAssignment,
    train_levels: &[String],
) -> Result<(PerturbationDataset, SplitAssignment)> {
    let labels = split.labels_for(d)?;
    let allowed: BTreeSet<&str> = train_levels.iter().map(String::as_str).collect();
    let known: BTreeSet<String> = d.covariate_levels().iter().map(Covariates::label).collect();
    for l in &allowed {
        if !known.contains(*l) {
            return Err(Error::UnknownCovariate((*l).to_string()));
        }
    }
    let keep: Vec<usize> = (0..d.n_cells())
        .filter(|&r| {
            labels[r] != SplitLabel::Train
                || d.is_control(r)
                || allowed.contains(d.covariates(r).label().as_str())
        })
        .collect();
    let sub = d.subset_rows(&keep)?;
    let sub_split = SplitAssignment::new(
        keep.iter().map(|&r| d.cell_ids()[r].clone()).collect(),
        keep.iter().map(|&r| labels[r]).collect(),
    )?;
    Ok((sub, sub_split))
}

/// `1 - H / ln k` over per-level counts, with `0 ln 0 = 0`.
pub fn compute_imbalance(counts: &[usize]) -> Result<f64> {
    let k = counts.len();
    if k < 2 {
        return Err(Error::InvalidArgument(
            "imbalance needs at least 2 levels".into(),
        ));
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument(
            "imbalance needs a positive total".into(),
        ));
    }
    if counts.iter().all(|&c| c == counts[0]) {
        return Ok(0.0);
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok((1.0 - h / (k as f64).ln()).clamp(0.0, 1.0))
}

pub const BALANCE_TOLERANCE: f64 = 0.02;

/// Subsamples perturbations per covariate level so that `1 - imbalance`
/// lands within 0.02 of `target_balance`. The first level keeps everything;
/// control cells are always kept.
pub fn downsample_to_imbalance(
    d: &PerturbationDataset,
    target_balance: f64,
    min_perturbations_per_level: usize,
    seed: u64,
) -> Result<PerturbationDataset> {
    if !(target_balance > 0.0 && target_balance <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target balance {target_balance} must lie in (0, 1]"
        )));
    }
    let levels = non_control_sets(d);
    if levels.len() < 2 {
        return Err(Error::Split(
            "downsampling needs at least 2 covariate levels".into(),
        ));
    }
    if target_balance == 1.0 {
        return Ok(d.clone());
    }
    let sizes: Vec<usize> = levels.values().map(BTreeSet::len).collect();
    for (lvl, &n) in levels.keys().zip(&sizes) {
        if n < min_perturbations_per_level {
            return Err(Error::Split(format!(
                "{lvl} has {n} perturbations, fewer than the minimum {min_perturbations_per_level}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 100_000;
    let mut chosen = None;
    for _ in 0..ATTEMPTS {
        let mut counts = vec![sizes[0]];
        counts.extend(
            sizes[1..]
                .iter()
                .map(|&n| rng.random_range(min_perturbations_per_level..=n)),
        );
        let balance = 1.0 - compute_imbalance(&counts)?;
        if (balance - target_balance).abs() <= BALANCE_TOLERANCE {
            chosen = Some(counts);
            break;
        }
    }
    let counts = chosen.ok_or_else(|| {
        Error::Split(format!(
            "balance {target_balance} unreachable with at least {min_perturbations_per_level} perturbations per level"
        ))
    })?;
    let mut keep_sets: BTreeMap<&Covariates, BTreeSet<&BTreeSet<String>>> = BTreeMap::new();
    for ((lvl, perts), &n) in levels.iter().zip(&counts) {
        let mut list: Vec<&BTreeSet<String>> = perts.iter().copied().collect();
        list.shuffle(&mut rng);
        keep_sets.insert(lvl, list.into_iter().take(n).collect());
    }
    let rows: Vec<usize> = (0..d.n_cells())
        .filter(|&r| {
            d.is_control(r)
                || keep_sets
                    .get(d.covariates(r))
                    .is_some_and(|s| s.contains(d.perturbations(r)))
        })
        .collect();
    d.subset_rows(&rows)
}

/// Perturbation counts per covariate level, levels in sorted order.
pub fn perturbations_per_level(d: &PerturbationDataset) -> Vec<(Covariates, usize)> {
    non_control_sets(d)
        .into_iter()
        .map(|(k, v)| (k.clone(), v.len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::sparse::CsrMatrix;

    /// `levels` x `perts` grid, `cells` cells per condition, plus 2 controls per level.
    pub(crate) fn grid(levels: usize, perts: usize, cells: usize) -> PerturbationDataset {
        let mut p = Vec::new();
        let mut c = Vec::new();
        for l in 0..levels {
            let cov = Covariates::new([("cell_type", format!("L{l}"))]);
            for _ in 0..2 {
                p.push(BTreeSet::from(["control".to_string()]));
                c.push(cov.clone());
            }
            for k in 0..perts {
                for _ in 0..cells {
                    p.push(BTreeSet::from([format!("p{k:02}")]));
                    c.push(cov.clone());
                }
            }
        }
        let n = p.len();
        PerturbationDataset::new(
            CsrMatrix::zeros(n, 1),
            (0..n).map(|i| format!("c{i}")).collect(),
            p,
            c,
            vec!["g".into()],
            DatasetMeta {
                covariate_keys: vec!["cell_type".into()],
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn combo_ds(n_single: usize, n_dual: usize) -> PerturbationDataset {
        let mut p: Vec<BTreeSet<String>> = vec![BTreeSet::from(["control".to_string()])];
        for i in 0..n_single {
            p.push(BTreeSet::from([format!("s{i:03}")]));
        }
        let mut k = 0;
        'outer: for i in 0..n_single {
            for j in i + 1..n_single {
                if k == n_dual {
                    break 'outer;
                }
                p.push(BTreeSet::from([format!("s{i:03}"), format!("s{j:03}")]));
                k += 1;
            }
        }
        let n = p.len();
        PerturbationDataset::new(
            CsrMatrix::zeros(n, 1),
            (0..n).map(|i| format!("c{i}")).collect(),
            p,
            vec![Covariates::default(); n],
            vec!["g".into()],
            DatasetMeta::default(),
        )
        .unwrap()
    }

    fn held_conditions(d: &PerturbationDataset, s: &SplitAssignment) -> BTreeSet<Condition> {
        let labels = s.labels_for(d).unwrap();
        (0..d.n_cells())
            .filter(|&r| labels[r] != SplitLabel::Train)
            .map(|r| d.condition(r).clone())
            .collect()
    }

    #[test]
    fn covariate_transfer_example() {
        let d = grid(3, 10, 2);
        let spec = SplitSpec {
            f: 0.3,
            m: 1,
            min_perturbations_per_level: 1,
            seed: 11,
            ..Default::default()
        };
        let s = split_covariate_transfer(&d, &spec).unwrap();
        let held = held_conditions(&d, &s);
        assert_eq!(held.len(), 3);
        let lvls: BTreeSet<&Covariates> = held.iter().map(|c| &c.covariates).collect();
        assert_eq!(lvls.len(), 1);
        let labels = s.labels_for(&d).unwrap();
        for c in &held {
            assert!((0..d.n_cells()).any(|r| labels[r] == SplitLabel::Train
                && d.perturbations(r) == &c.perturbations
                && d.covariates(r) != &c.covariates));
        }
        assert!((0..d.n_cells())
            .filter(|&r| d.is_control(r))
            .all(|r| labels[r] == SplitLabel::Train));
        assert_eq!(s, split_covariate_transfer(&d, &spec).unwrap());
    }

    #[test]
    fn covariate_transfer_min_constraint_errors() {
        let d = grid(3, 10, 1);
        let spec = SplitSpec {
            f: 0.5,
            min_perturbations_per_level: 8,
            ..Default::default()
        };
        assert!(matches!(
            split_covariate_transfer(&d, &spec),
            Err(Error::Split(_))
        ));
        assert!(split_covariate_transfer(&grid(1, 10, 1), &SplitSpec::default()).is_err());
    }

    #[test]
    fn combo_holds_out_rounded_fraction() {
        let d = combo_ds(155, 131);
        let spec = SplitSpec {
            kind: SplitKind::Combo,
            f: 0.7,
            ..Default::default()
        };
        let s = split_combo(&d, &spec).unwrap();
        let held = held_conditions(&d, &s);
        assert_eq!(held.len(), 92);
        assert!(held.iter().all(Condition::is_combination));
        assert!(split_combo(&combo_ds(5, 0), &spec).is_err());
    }

    #[test]
    fn inverse_combo_keeps_partner_and_dual() {
        let d = combo_ds(12, 30);
        let spec = SplitSpec {
            kind: SplitKind::InverseCombo,
            f: 0.2,
            seed: 4,
            ..Default::default()
        };
        let s = split_combo(&d, &spec).unwrap();
        let held = held_conditions(&d, &s);
        assert!(!held.is_empty());
        let labels = s.labels_for(&d).unwrap();
        let train: BTreeSet<&Condition> = (0..d.n_cells())
            .filter(|&r| labels[r] == SplitLabel::Train)
            .map(|r| d.condition(r))
            .collect();
        for h in &held {
            assert_eq!(h.perturbations.len(), 1);
            let p = h.perturbations.iter().next().unwrap();
            assert!(train.iter().any(|c| c.perturbations.len() == 2
                && c.perturbations.contains(p)
                && c.perturbations.iter().filter(|q| *q != p).all(|q| {
                    train.contains(&Condition::new([q.as_str()], Covariates::default()))
                })));
        }
    }

    #[test]
    fn imbalance_values() {
        assert_eq!(compute_imbalance(&[188, 188, 188]).unwrap(), 0.0);
        assert_eq!(compute_imbalance(&[100, 0, 0]).unwrap(), 1.0);
        assert!((compute_imbalance(&[188, 50, 117]).unwrap() - 0.109).abs() < 0.02);
        assert!(compute_imbalance(&[5]).is_err());
        assert!(compute_imbalance(&[0, 0]).is_err());
    }

    #[test]
    fn downsampling_hits_target() {
        let d = grid(3, 60, 1);
        for seed in 0..5 {
            let out = downsample_to_imbalance(&d, 0.9, 10, seed).unwrap();
            let counts: Vec<usize> = perturbations_per_level(&out)
                .into_iter()
                .map(|(_, n)| n)
                .collect();
            assert_eq!(counts[0], 60);
            let b = 1.0 - compute_imbalance(&counts).unwrap();
            assert!((b - 0.9).abs() <= BALANCE_TOLERANCE);
            assert_eq!((0..out.n_cells()).filter(|&r| out.is_control(r)).count(), 6);
        }
        assert_eq!(downsample_to_imbalance(&d, 1.0, 10, 0).unwrap(), d);
        assert!(downsample_to_imbalance(&d, 0.1, 59, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = grid(2, 3, 1);
        let s = split_covariate_transfer(
            &d,
            &SplitSpec {
                min_perturbations_per_level: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.csv");
        s.write_csv(&p).unwrap();
        assert_eq!(SplitAssignment::read_csv(&p, &d).unwrap(), s);

        let text = std::fs::read_to_string(&p).unwrap();
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("c3,"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&p, missing).unwrap();
        match SplitAssignment::read_csv(&p, &d) {
            Err(Error::Split(m)) => assert!(m.contains("c3")),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, text.replacen(",train", ",validation", 1)).unwrap();
        assert!(matches!(
            SplitAssignment::read_csv(&p, &d),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn restricting_training_levels() {
        let d = grid(3, 4, 1);
        let s = split_covariate_transfer(
            &d,
            &SplitSpec {
                min_perturbations_per_level: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let (sub, sub_s) = restrict_training(&d, &s, &["L0".to_string()]).unwrap();
        let labels = sub_s.labels_for(&sub).unwrap();
        for r in 0..sub.n_cells() {
            if labels[r] == SplitLabel::Train && !sub.is_control(r) {
                assert_eq!(sub.covariates(r).label(), "L0");
            }
        }
        assert_eq!(
            s.rows(&d, SplitLabel::Test).unwrap().len(),
            sub_s.rows(&sub, SplitLabel::Test).unwrap().len()
        );
        assert!(restrict_training(&d, &s, &["nope".to_string()]).is_err());
    }
}
