//! Perturbational expression datasets: the in-memory container, its on-disk
//! directory format, control matching and counterfactual request construction.
//!
//! A dataset directory holds four files:
//!
//! * `matrix.mtx` – MatrixMarket coordinate text, rows are cells, columns genes;
//! * `obs.tsv` – `cell_id`, `perturbation`, then one column per covariate key;
//! * `var.tsv` – `gene_name`, one gene per line in column order;
//! * `meta.tsv` – `key<TAB>value` lines (`control_value`,
//!   `combination_delimiter`, `covariate_keys`, `value_space`).
//!
//! Extra `obs.tsv` columns are ignored on load.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

pub const DEFAULT_CONTROL: &str = "control";
pub const DEFAULT_DELIMITER: &str = "+";

/// Covariate key to category, e.g. `cell_type -> A549`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Covariates(pub BTreeMap<String, String>);

impl Covariates {
    pub fn new<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Covariates(
            pairs
                .into_iter()
                .map(|(k, v)| (k.into(), v.into()))
                .collect(),
        )
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    /// Category values joined by `|` in key order; empty when there are no covariates.
    pub fn label(&self) -> String {
        self.0.values().cloned().collect::<Vec<_>>().join("|")
    }
}

impl fmt::Display for Covariates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(k, v)| format!("{k}={v}")).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// A perturbation set under a covariate assignment. The set is a `BTreeSet`,
/// so member order is canonical (lexicographic).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Condition {
    pub perturbations: BTreeSet<String>,
    pub covariates: Covariates,
}

impl Condition {
    pub fn new<S: Into<String>>(
        perturbations: impl IntoIterator<Item = S>,
        covariates: Covariates,
    ) -> Self {
        Condition {
            perturbations: perturbations.into_iter().map(Into::into).collect(),
            covariates,
        }
    }

    pub fn control(control_value: &str, covariates: Covariates) -> Self {
        Condition::new([control_value], covariates)
    }

    pub fn is_control(&self, control_value: &str) -> bool {
        self.perturbations.len() == 1 && self.perturbations.contains(control_value)
    }

    pub fn is_combination(&self) -> bool {
        self.perturbations.len() > 1
    }

    pub fn perturbation_label(&self, delimiter: &str) -> String {
        self.perturbations
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(delimiter)
    }

    /// `a+b|A549` style label.
    pub fn label(&self) -> String {
        let p = self.perturbation_label(DEFAULT_DELIMITER);
        let c = self.covariates.label();
        if c.is_empty() {
            p
        } else {
            format!("{p}|{c}")
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Whether matrix entries are raw counts or log-normalized values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueSpace {
    Counts,
    LogNorm,
}

impl ValueSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            ValueSpace::Counts => "counts",
            ValueSpace::LogNorm => "lognorm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "counts" => Some(ValueSpace::Counts),
            "lognorm" => Some(ValueSpace::LogNorm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub control_value: String,
    pub combination_delimiter: String,
    pub covariate_keys: Vec<String>,
    pub value_space: ValueSpace,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        DatasetMeta {
            control_value: DEFAULT_CONTROL.to_string(),
            combination_delimiter: DEFAULT_DELIMITER.to_string(),
            covariate_keys: Vec::new(),
            value_space: ValueSpace::Counts,
        }
    }
}

/// Cells-by-genes expression with per-cell perturbation and covariate labels.
///
/// Per-cell labels are interned: every cell points at one entry of a sorted
/// list of distinct conditions. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationDataset {
    counts: CsrMatrix,
    cell_ids: Vec<String>,
    gene_names: Vec<String>,
    conditions: Vec<Condition>,
    cell_condition: Vec<usize>,
    meta: DatasetMeta,
}

fn check_field(what: &str, s: &str) -> Result<()> {
    if s.is_empty() {
        return Err(Error::InvalidData(format!("empty {what}")));
    }
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidData(format!(
            "{what} `{}` contains a tab or newline",
            s.escape_debug()
        )));
    }
    Ok(())
}

impl PerturbationDataset {
    /// Validates and assembles a dataset.
    pub fn new(
        counts: CsrMatrix,
        cell_ids: Vec<String>,
        perturbations: Vec<BTreeSet<String>>,
        covariates: Vec<Covariates>,
        gene_names: Vec<String>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n = counts.n_rows();
        if cell_ids.len() != n || perturbations.len() != n || covariates.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {n} rows but {} cell ids, {} perturbation labels, {} covariate rows",
                cell_ids.len(),
                perturbations.len(),
                covariates.len()
            )));
        }
        if gene_names.len() != counts.n_cols() {
            return Err(Error::DimensionMismatch(format!(
                "matrix has {} columns but {} gene names",
                counts.n_cols(),
                gene_names.len()
            )));
        }
        check_field("control value", &meta.control_value)?;
        check_field("combination delimiter", &meta.combination_delimiter)?;
        if meta.control_value.contains(&meta.combination_delimiter) {
            return Err(Error::InvalidData(
                "control value contains the combination delimiter".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &cell_ids {
            check_field("cell id", id)?;
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidData(format!("duplicate cell id `{id}`")));
            }
        }
        let mut seen = HashSet::with_capacity(gene_names.len());
        for g in &gene_names {
            check_field("gene name", g)?;
            if !seen.insert(g.as_str()) {
                return Err(Error::InvalidData(format!("duplicate gene name `{g}`")));
            }
        }
        for k in &meta.covariate_keys {
            check_field("covariate key", k)?;
        }
        let keyset: BTreeSet<&str> = meta.covariate_keys.iter().map(String::as_str).collect();
        if keyset.len() != meta.covariate_keys.len() {
            return Err(Error::InvalidData("duplicate covariate key".into()));
        }
        for &v in counts.values() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidData(format!(
                    "matrix value {v} is negative or non-finite"
                )));
            }
        }

        let mut interned: BTreeMap<Condition, usize> = BTreeMap::new();
        let mut raw = Vec::with_capacity(n);
        for (cell, (perts, cov)) in perturbations.into_iter().zip(covariates).enumerate() {
            if perts.is_empty() {
                return Err(Error::InvalidData(format!(
                    "cell `{}` has no perturbation",
                    cell_ids[cell]
                )));
            }
            for p in &perts {
                check_field("perturbation name", p)?;
                if p.contains(&meta.combination_delimiter) {
                    return Err(Error::InvalidData(format!(
                        "perturbation `{p}` contains the combination delimiter"
                    )));
                }
            }
            if perts.len() > 1 && perts.contains(&meta.control_value) {
                return Err(Error::InvalidData(format!(
                    "cell `{}` combines the control value with other perturbations",
                    cell_ids[cell]
                )));
            }
            let keys: BTreeSet<&str> = cov.0.keys().map(String::as_str).collect();
            if keys != keyset {
                return Err(Error::InvalidData(format!(
                    "cell `{}` has covariates {:?}, expected {:?}",
                    cell_ids[cell], keys, keyset
                )));
            }
            for v in cov.0.values() {
                check_field("covariate value", v)?;
            }
            let cond = Condition {
                perturbations: perts,
                covariates: cov,
            };
            let next = interned.len();
            interned.entry(cond.clone()).or_insert(next);
            raw.push(cond);
        }
        // Re-number so that condition indices follow the sorted order.
        let conditions: Vec<Condition> = interned.keys().cloned().collect();
        let rank: HashMap<&Condition, usize> =
            conditions.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let cell_condition = raw.iter().map(|c| rank[c]).collect();

        Ok(PerturbationDataset {
            counts,
            cell_ids,
            gene_names,
            conditions,
            cell_condition,
            meta,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.counts.n_rows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.n_cols()
    }

    pub fn counts(&self) -> &CsrMatrix {
        &self.counts
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn value_space(&self) -> ValueSpace {
        self.meta.value_space
    }

    pub fn control_value(&self) -> &str {
        &self.meta.control_value
    }

    /// Distinct conditions, sorted.
    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    pub fn condition(&self, cell: usize) -> &Condition {
        &self.conditions[self.cell_condition[cell]]
    }

    pub fn condition_index(&self, cell: usize) -> usize {
        self.cell_condition[cell]
    }

    pub fn perturbations(&self, cell: usize) -> &BTreeSet<String> {
        &self.condition(cell).perturbations
    }

    pub fn covariates(&self, cell: usize) -> &Covariates {
        &self.condition(cell).covariates
    }

    pub fn is_control(&self, cell: usize) -> bool {
        self.condition(cell).is_control(&self.meta.control_value)
    }

    /// Rows of every condition, in increasing row order, indexed like `conditions()`.
    pub fn rows_by_condition(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.conditions.len()];
        for (row, &c) in self.cell_condition.iter().enumerate() {
            out[c].push(row);
        }
        out
    }

    /// Distinct covariate assignments, sorted.
    pub fn covariate_levels(&self) -> Vec<Covariates> {
        let set: BTreeSet<&Covariates> = self.conditions.iter().map(|c| &c.covariates).collect();
        set.into_iter().cloned().collect()
    }

    /// Distinct perturbation names other than the control value, sorted.
    pub fn perturbation_names(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for c in &self.conditions {
            for p in &c.perturbations {
                if *p != self.meta.control_value {
                    set.insert(p.clone());
                }
            }
        }
        set.into_iter().collect()
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.cell_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect()
    }

    /// Same dataset with a replaced matrix of identical shape.
    pub fn with_matrix(&self, counts: CsrMatrix, value_space: ValueSpace) -> Result<Self> {
        if counts.n_rows() != self.n_cells() || counts.n_cols() != self.n_genes() {
            return Err(Error::DimensionMismatch(
                "replacement matrix has a different shape".into(),
            ));
        }
        Ok(PerturbationDataset {
            counts,
            meta: DatasetMeta {
                value_space,
                ..self.meta.clone()
            },
            ..self.clone()
        })
    }

    /// Keeps the given rows, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        PerturbationDataset::new(
            self.counts.select_rows(rows),
            rows.iter().map(|&r| self.cell_ids[r].clone()).collect(),
            rows.iter()
                .map(|&r| self.perturbations(r).clone())
                .collect(),
            rows.iter().map(|&r| self.covariates(r).clone()).collect(),
            self.gene_names.clone(),
            self.meta.clone(),
        )
    }

    /// Keeps the given columns; `cols` must be strictly increasing.
    pub fn subset_genes(&self, cols: &[usize]) -> Self {
        PerturbationDataset {
            counts: self.counts.select_cols(cols),
            gene_names: cols.iter().map(|&c| self.gene_names[c].clone()).collect(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Directory format
// ---------------------------------------------------------------------------

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let file = path.display().to_string();
    let mut meta = DatasetMeta::default();
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(&file, i + 1, "expected key<TAB>value"))?;
        match k {
            "control_value" => meta.control_value = v.to_string(),
            "combination_delimiter" => meta.combination_delimiter = v.to_string(),
            "covariate_keys" => {
                meta.covariate_keys = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(str::to_string).collect()
                }
            }
            "value_space" => {
                meta.value_space = ValueSpace::parse(v).ok_or_else(|| {
                    Error::format(&file, i + 1, format!("unknown value space `{v}`"))
                })?
            }
            other => log::warn!("{file}: ignoring unknown meta key `{other}`"),
        }
    }
    Ok(meta)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<PerturbationDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.tsv");
    let var_path = dir.join("var.tsv");
    let obs_path = dir.join("obs.tsv");
    let mtx_path = dir.join("matrix.mtx");
    for p in [&meta_path, &var_path, &obs_path, &mtx_path] {
        if !p.is_file() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing file"),
            ));
        }
    }
    let meta = read_meta(&meta_path)?;

    let var_file = var_path.display().to_string();
    let var = read_lines(&var_path)?;
    if var.first().map(String::as_str) != Some("gene_name") {
        return Err(Error::format(&var_file, 1, "expected header `gene_name`"));
    }
    let gene_names: Vec<String> = var[1..].to_vec();

    let obs_file = obs_path.display().to_string();
    let obs = read_lines(&obs_path)?;
    let header: Vec<&str> = obs
        .first()
        .ok_or_else(|| Error::format(&obs_file, 1, "empty file"))?
        .split('\t')
        .collect();
    if header.first() != Some(&"cell_id") {
        return Err(Error::format(
            &obs_file,
            1,
            "first column must be `cell_id`",
        ));
    }
    let pert_col = header
        .iter()
        .position(|h| *h == "perturbation")
        .ok_or_else(|| Error::format(&obs_file, 1, "missing `perturbation` column"))?;
    let mut cov_cols = Vec::with_capacity(meta.covariate_keys.len());
    for key in &meta.covariate_keys {
        let col = header.iter().position(|h| h == key).ok_or_else(|| {
            Error::InvalidData(format!(
                "covariate key `{key}` from meta.tsv is not an obs.tsv column"
            ))
        })?;
        cov_cols.push((key.clone(), col));
    }

    let mut cell_ids = Vec::with_capacity(obs.len().saturating_sub(1));
    let mut perturbations = Vec::with_capacity(cell_ids.capacity());
    let mut covariates = Vec::with_capacity(cell_ids.capacity());
    for (i, line) in obs.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(Error::format(
                &obs_file,
                i + 1,
                format!("expected {} fields, found {}", header.len(), fields.len()),
            ));
        }
        cell_ids.push(fields[0].to_string());
        let perts: BTreeSet<String> = fields[pert_col]
            .split(meta.combination_delimiter.as_str())
            .map(str::to_string)
            .collect();
        if perts.iter().any(String::is_empty) {
            return Err(Error::format(&obs_file, i + 1, "empty perturbation name"));
        }
        perturbations.push(perts);
        covariates.push(Covariates(
            cov_cols
                .iter()
                .map(|(k, c)| (k.clone(), fields[*c].to_string()))
                .collect(),
        ));
    }

    let mtx_file = File::open(&mtx_path).map_err(|e| Error::io(&mtx_path, e))?;
    let counts = CsrMatrix::read_mtx(BufReader::new(mtx_file), &mtx_path.display().to_string())?;
    if counts.n_rows() != cell_ids.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix.mtx has {} rows but obs.tsv lists {} cells",
            counts.n_rows(),
            cell_ids.len()
        )));
    }
    PerturbationDataset::new(
        counts,
        cell_ids,
        perturbations,
        covariates,
        gene_names,
        meta,
    )
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the dataset directory, creating it if needed.
pub fn save_dataset(d: &PerturbationDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = &d.meta;

    let path = dir.join("meta.tsv");
    let mut w = create_writer(&path)?;
    let body = format!(
        "control_value\t{}\ncombination_delimiter\t{}\ncovariate_keys\t{}\nvalue_space\t{}\n",
        meta.control_value,
        meta.combination_delimiter,
        meta.covariate_keys.join(","),
        meta.value_space.as_str()
    );
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("var.tsv");
    let mut w = create_writer(&path)?;
    let mut body = String::from("gene_name\n");
    for g in &d.gene_names {
        body.push_str(g);
        body.push('\n');
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("obs.tsv");
    let mut w = create_writer(&path)?;
    let mut header = vec!["cell_id", "perturbation"];
    header.extend(meta.covariate_keys.iter().map(String::as_str));
    let mut body = header.join("\t");
    body.push('\n');
    for cell in 0..d.n_cells() {
        let cond = d.condition(cell);
        body.push_str(&d.cell_ids[cell]);
        body.push('\t');
        body.push_str(&cond.perturbation_label(&meta.combination_delimiter));
        for k in &meta.covariate_keys {
            body.push('\t');
            body.push_str(cond.covariates.get(k).unwrap_or_default());
        }
        body.push('\n');
    }
    w.write_all(body.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;

    let path = dir.join("matrix.mtx");
    let mut w = create_writer(&path)?;
    d.counts
        .write_mtx(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Control matching
// ---------------------------------------------------------------------------

/// Control-cell rows for every covariate assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlIndex {
    entries: BTreeMap<Covariates, Vec<usize>>,
}

impl ControlIndex {
    pub fn get(&self, cov: &Covariates) -> Option<&[usize]> {
        self.entries.get(cov).map(Vec::as_slice)
    }

    pub fn lookup(&self, cov: &Covariates) -> Result<&[usize]> {
        self.get(cov)
            .ok_or_else(|| Error::UnknownCovariate(cov.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Covariates, &[usize])> {
        self.entries.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Draws `n` rows uniformly with replacement from the matching entry.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        cov: &Covariates,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let rows = self.lookup(cov)?;
        Ok((0..n)
            .map(|_| rows[rng.random_range(0..rows.len())])
            .collect())
    }
}

/// Indexes every control cell by its covariate assignment. Fails when some
/// covariate assignment has perturbed cells but no controls.
pub fn build_control_index(d: &PerturbationDataset) -> Result<ControlIndex> {
    build_control_index_from(d, 0..d.n_cells())
}

/// Like [`build_control_index`] but only controls among `rows` are indexed.
/// Every covariate assignment carrying perturbed cells anywhere in the dataset
/// must still be covered.
pub fn build_control_index_from(
    d: &PerturbationDataset,
    rows: impl IntoIterator<Item = usize>,
) -> Result<ControlIndex> {
    let mut entries: BTreeMap<Covariates, Vec<usize>> = BTreeMap::new();
    for row in rows {
        if d.is_control(row) {
            entries
                .entry(d.covariates(row).clone())
                .or_default()
                .push(row);
        }
    }
    for v in entries.values_mut() {
        v.sort_unstable();
    }
    for cond in d.conditions() {
        if !cond.is_control(d.control_value()) && !entries.contains_key(&cond.covariates) {
            return Err(Error::MissingControls(cond.covariates.to_string()));
        }
    }
    Ok(ControlIndex { entries })
}

/// Samples `n` matched controls with replacement; deterministic in `seed`.
pub fn sample_matched_controls(
    idx: &ControlIndex,
    cov: &Covariates,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample size must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.sample(cov, n, &mut rng)
}

/// A condition to predict, its matched control rows and, optionally, the
/// observed cells of the same condition in a reference dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualRequest {
    pub target: Condition,
    pub control_rows: Vec<usize>,
    pub reference_rows: Option<Vec<usize>>,
}

impl CounterfactualRequest {
    /// True when a reference was supplied but holds no cell of the target.
    pub fn empty_reference(&self) -> bool {
        matches!(&self.reference_rows, Some(r) if r.is_empty())
    }
}

pub fn build_counterfactual_requests(
    idx: &ControlIndex,
    targets: &[Condition],
    reference: Option<&PerturbationDataset>,
) -> Result<Vec<CounterfactualRequest>> {
    let by_condition: Option<HashMap<&Condition, Vec<usize>>> = reference.map(|r| {
        let mut m: HashMap<&Condition, Vec<usize>> = HashMap::new();
        for row in 0..r.n_cells() {
            m.entry(r.condition(row)).or_default().push(row);
        }
        m
    });
    targets
        .iter()
        .map(|t| {
            let control_rows = idx.lookup(&t.covariates)?.to_vec();
            let reference_rows = by_condition
                .as_ref()
                .map(|m| m.get(t).cloned().unwrap_or_default());
            if matches!(&reference_rows, Some(r) if r.is_empty()) {
                log::warn!("no reference cells for condition {t}");
            }
            Ok(CounterfactualRequest {
                target: t.clone(),
                control_rows,
                reference_rows,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cov(v: &str) -> Covariates {
        Covariates::new([("cell_type", v)])
    }

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn tiny() -> PerturbationDataset {
        let m = CsrMatrix::from_dense_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]], 2)
            .unwrap();
        PerturbationDataset::new(
            m,
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec![set(&["control"]), set(&["drugX"]), set(&["drugX", "drugY"])],
            vec![cov("A549"); 3],
            vec!["g1".into(), "g2".into()],
            DatasetMeta {
                covariate_keys: vec!["cell_type".into()],
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn parses_combinations_from_obs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        write(p, "meta.tsv", "control_value\tcontrol\ncombination_delimiter\t+\ncovariate_keys\tcell_type\nvalue_space\tcounts\n");
        write(p, "var.tsv", "gene_name\ng1\ng2\n");
        write(
            p,
            "obs.tsv",
            "cell_id\tperturbation\tcell_type\nc1\tcontrol\tA549\nc2\tdrugX\tA549\nc3\tdrugX+drugY\tA549\n",
        );
        write(
            p,
            "matrix.mtx",
            "%%MatrixMarket matrix coordinate real general\n3 2 2\n1 1 5\n3 2 1\n",
        );
        let d = load_dataset(p).unwrap();
        assert_eq!(d.perturbations(0), &set(&["control"]));
        assert_eq!(d.perturbations(1), &set(&["drugX"]));
        assert_eq!(d.perturbations(2), &set(&["drugX", "drugY"]));
        assert!(d.is_control(0));
        assert_eq!(d.counts().get(0, 0), 5.0);
    }

    #[test]
    fn row_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        write(p, "meta.tsv", "control_value\tcontrol\ncombination_delimiter\t+\ncovariate_keys\tcell_type\nvalue_space\tcounts\n");
        write(p, "var.tsv", "gene_name\ng1\ng2\n");
        write(
            p,
            "obs.tsv",
            "cell_id\tperturbation\tcell_type\nc1\tcontrol\tA549\nc2\tdrugX\tA549\nc3\tdrugX\tA549\n",
        );
        write(
            p,
            "matrix.mtx",
            "%%MatrixMarket matrix coordinate real general\n4 2 1\n4 1 5\n",
        );
        assert!(matches!(load_dataset(p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        assert!(matches!(load_dataset(p), Err(Error::Io { .. })));
        write(p, "meta.tsv", "covariate_keys\tdonor\n");
        write(p, "var.tsv", "gene_name\ng1\n");
        write(p, "obs.tsv", "cell_id\tperturbation\nc1\tcontrol\n");
        write(
            p,
            "matrix.mtx",
            "%%MatrixMarket matrix coordinate real general\n1 1 0\n",
        );
        assert!(matches!(load_dataset(p), Err(Error::InvalidData(_))));
        write(p, "meta.tsv", "covariate_keys\t\n");
        write(
            p,
            "matrix.mtx",
            "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 -2\n",
        );
        assert!(matches!(load_dataset(p), Err(Error::InvalidData(_))));
        write(
            p,
            "matrix.mtx",
            "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 inf\n",
        );
        assert!(matches!(load_dataset(p), Err(Error::InvalidData(_))));
    }

    #[test]
    fn single_cell_save_writes_headers() {
        let d = tiny().subset_rows(&[0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let obs = fs::read_to_string(dir.path().join("obs.tsv")).unwrap();
        assert_eq!(obs, "cell_id\tperturbation\tcell_type\nc1\tcontrol\tA549\n");
        let var = fs::read_to_string(dir.path().join("var.tsv")).unwrap();
        assert_eq!(var, "gene_name\ng1\ng2\n");
        let mtx = fs::read_to_string(dir.path().join("matrix.mtx")).unwrap();
        assert!(mtx.starts_with("%%MatrixMarket matrix coordinate real general\n1 2 1\n"));
        let meta = fs::read_to_string(dir.path().join("meta.tsv")).unwrap();
        assert!(meta.contains("covariate_keys\tcell_type\n"));
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = save_dataset(&tiny(), blocker.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn control_cannot_join_a_combination() {
        let m = CsrMatrix::zeros(1, 1);
        let r = PerturbationDataset::new(
            m,
            vec!["c".into()],
            vec![set(&["control", "a"])],
            vec![Covariates::default()],
            vec!["g".into()],
            DatasetMeta::default(),
        );
        assert!(r.is_err());
    }

    fn grid() -> PerturbationDataset {
        // 2 covariates x 2 levels, one control and one perturbed cell per combination.
        let mut perts = Vec::new();
        let mut covs = Vec::new();
        for a in ["a0", "a1"] {
            for b in ["b0", "b1"] {
                for p in ["control", "p"] {
                    perts.push(set(&[p]));
                    covs.push(Covariates::new([("ka", a), ("kb", b)]));
                }
            }
        }
        let n = perts.len();
        PerturbationDataset::new(
            CsrMatrix::zeros(n, 1),
            (0..n).map(|i| format!("c{i}")).collect(),
            perts,
            covs,
            vec!["g".into()],
            DatasetMeta {
                covariate_keys: vec!["ka".into(), "kb".into()],
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn control_index_has_one_entry_per_combination() {
        let idx = build_control_index(&grid()).unwrap();
        assert_eq!(idx.len(), 4);
        assert!(idx.iter().all(|(_, rows)| rows.len() == 1));
    }

    #[test]
    fn missing_controls_name_the_combination() {
        let d = grid();
        let rows: Vec<usize> = (0..d.n_cells()).filter(|&r| r != 0).collect();
        let err = build_control_index_from(&d, rows).unwrap_err();
        match err {
            Error::MissingControls(msg) => assert!(msg.contains("ka=a0") && msg.contains("kb=b0")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn sampling_from_singleton_entry_repeats_it() {
        let d = grid();
        let idx = build_control_index(&d).unwrap();
        let c = d.covariates(0).clone();
        assert_eq!(sample_matched_controls(&idx, &c, 5, 3).unwrap(), vec![0; 5]);
        assert_eq!(
            sample_matched_controls(&idx, &c, 4, 9).unwrap(),
            sample_matched_controls(&idx, &c, 4, 9).unwrap()
        );
        let unknown = Covariates::new([("ka", "zz"), ("kb", "b0")]);
        assert!(matches!(
            sample_matched_controls(&idx, &unknown, 1, 0),
            Err(Error::UnknownCovariate(_))
        ));
    }

    #[test]
    fn requests_pick_up_reference_cells() {
        let d = tiny();
        let idx = build_control_index(&d).unwrap();
        let target = d.condition(1).clone();
        let mut perts = Vec::new();
        for _ in 0..7 {
            perts.push(set(&["drugX"]));
        }
        perts.push(set(&["drugY"]));
        let reference = PerturbationDataset::new(
            CsrMatrix::zeros(8, 2),
            (0..8).map(|i| format!("r{i}")).collect(),
            perts,
            vec![cov("A549"); 8],
            vec!["g1".into(), "g2".into()],
            d.meta().clone(),
        )
        .unwrap();
        let absent = Condition::new(["drugZ"], cov("A549"));
        let reqs =
            build_counterfactual_requests(&idx, &[target, absent], Some(&reference)).unwrap();
        assert_eq!(reqs[0].reference_rows.as_ref().unwrap().len(), 7);
        assert_eq!(reqs[0].control_rows, vec![0]);
        assert!(!reqs[0].empty_reference());
        assert!(reqs[1].empty_reference());
        let bad = Condition::new(["drugX"], cov("K562"));
        assert!(build_counterfactual_requests(&idx, &[bad], None).is_err());
    }
}
