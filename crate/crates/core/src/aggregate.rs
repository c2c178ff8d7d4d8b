//! Per-condition population aggregates and their tab-separated exchange format.
//!
//! `aggregates.tsv` and `logfc.tsv` share one layout:
//!
//! ```text
//! perturbation<TAB>cov_1<TAB>...<TAB>n_cells<TAB>g_1<TAB>...<TAB>g_G
//! ```
//!
//! The same files are accepted as externally produced predictions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::dataset::{Condition, Covariates, DEFAULT_CONTROL, DEFAULT_DELIMITER};
use crate::error::{Error, Result};

pub const MEANS_FILE: &str = "aggregates.tsv";
pub const LOGFC_FILE: &str = "logfc.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionAggregate {
    pub condition: Condition,
    pub mean: Vec<f64>,
    pub n_cells: usize,
    pub logfc: Option<Vec<f64>>,
}

impl ConditionAggregate {
    pub fn logfc(&self) -> Result<&[f64]> {
        self.logfc
            .as_deref()
            .ok_or_else(|| Error::InvalidData(format!("no LogFC for condition {}", self.condition)))
    }
}

/// A gene-indexed collection of aggregates plus the labelling conventions
/// needed to serialise it.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub genes: Vec<String>,
    pub covariate_keys: Vec<String>,
    pub control_value: String,
    pub delimiter: String,
    pub rows: Vec<ConditionAggregate>,
}

impl AggregateTable {
    pub fn new(
        genes: Vec<String>,
        covariate_keys: Vec<String>,
        rows: Vec<ConditionAggregate>,
    ) -> Self {
        AggregateTable {
            genes,
            covariate_keys,
            control_value: DEFAULT_CONTROL.to_string(),
            delimiter: DEFAULT_DELIMITER.to_string(),
            rows,
        }
    }

    pub fn find(&self, c: &Condition) -> Option<&ConditionAggregate> {
        self.rows.iter().find(|r| &r.condition == c)
    }

    /// Keeps only non-control conditions.
    pub fn without_controls(&self) -> AggregateTable {
        AggregateTable {
            rows: self
                .rows
                .iter()
                .filter(|r| !r.condition.is_control(&self.control_value))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Writes `aggregates.tsv`, plus `logfc.tsv` when every row has a LogFC.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_means(&dir.join(MEANS_FILE))?;
        if self.rows.iter().all(|r| r.logfc.is_some()) {
            self.write_logfc(&dir.join(LOGFC_FILE))?;
        }
        Ok(())
    }

    pub fn write_means(&self, path: &Path) -> Result<()> {
        self.write_values(path, |r| Some(&r.mean))
    }

    pub fn write_logfc(&self, path: &Path) -> Result<()> {
        if let Some(r) = self.rows.iter().find(|r| r.logfc.is_none()) {
            return Err(Error::InvalidData(format!(
                "no LogFC for condition {}",
                r.condition
            )));
        }
        self.write_values(path, |r| r.logfc.as_ref())
    }

    fn write_values<F>(&self, path: &Path, values: F) -> Result<()>
    where
        F: Fn(&ConditionAggregate) -> Option<&Vec<f64>>,
    {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut out = String::from("perturbation");
        for k in &self.covariate_keys {
            out.push('\t');
            out.push_str(k);
        }
        out.push_str("\tn_cells");
        for g in &self.genes {
            out.push('\t');
            out.push_str(g);
        }
        out.push('\n');
        for r in &self.rows {
            let v = values(r).expect("checked by caller");
            out.push_str(&r.condition.perturbation_label(&self.delimiter));
            for k in &self.covariate_keys {
                out.push('\t');
                out.push_str(r.condition.covariates.get(k).unwrap_or_default());
            }
            out.push('\t');
            out.push_str(&r.n_cells.to_string());
            for x in v {
                out.push('\t');
                out.push_str(&x.to_string());
            }
            out.push('\n');
            w.write_all(out.as_bytes())
                .map_err(|e| Error::io(path, e))?;
            out.clear();
        }
        w.write_all(out.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads `aggregates.tsv` from `dir`, attaching `logfc.tsv` when present.
    pub fn read(
        dir: impl AsRef<Path>,
        delimiter: &str,
        control_value: &str,
    ) -> Result<AggregateTable> {
        let dir = dir.as_ref();
        let logfc_path = dir.join(LOGFC_FILE);
        let logfc = logfc_path.is_file().then_some(logfc_path.as_path());
        AggregateTable::read_files(&dir.join(MEANS_FILE), logfc, delimiter, control_value)
    }

    /// Reads a means file and an optional LogFC file of the same layout.
    pub fn read_files(
        means_path: &Path,
        logfc_path: Option<&Path>,
        delimiter: &str,
        control_value: &str,
    ) -> Result<AggregateTable> {
        let means = read_values(means_path, delimiter)?;
        let mut rows: Vec<ConditionAggregate> = means
            .rows
            .into_iter()
            .map(|(condition, n_cells, mean)| ConditionAggregate {
                condition,
                mean,
                n_cells,
                logfc: None,
            })
            .collect();
        if let Some(logfc_path) = logfc_path {
            let lfc = read_values(logfc_path, delimiter)?;
            if lfc.genes != means.genes || lfc.covariate_keys != means.covariate_keys {
                return Err(Error::GeneMismatch(format!(
                    "{} and {} have different headers",
                    means_path.display(),
                    logfc_path.display()
                )));
            }
            let mut by_cond: HashMap<Condition, Vec<f64>> =
                lfc.rows.into_iter().map(|(c, _, v)| (c, v)).collect();
            for r in &mut rows {
                r.logfc = Some(by_cond.remove(&r.condition).ok_or_else(|| {
                    Error::InvalidData(format!(
                        "{} has no row for {}",
                        logfc_path.display(),
                        r.condition
                    ))
                })?);
            }
        }
        Ok(AggregateTable {
            genes: means.genes,
            covariate_keys: means.covariate_keys,
            control_value: control_value.to_string(),
            delimiter: delimiter.to_string(),
            rows,
        })
    }
}

struct RawTable {
    genes: Vec<String>,
    covariate_keys: Vec<String>,
    rows: Vec<(Condition, usize, Vec<f64>)>,
}

fn read_values(path: &Path, delimiter: &str) -> Result<RawTable> {
    let file = path.display().to_string();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(&file, 1, "empty file")),
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"perturbation") {
        return Err(Error::format(
            &file,
            1,
            "first column must be `perturbation`",
        ));
    }
    let n_pos = cols
        .iter()
        .position(|c| *c == "n_cells")
        .ok_or_else(|| Error::format(&file, 1, "missing `n_cells` column"))?;
    let covariate_keys: Vec<String> = cols[1..n_pos].iter().map(|s| s.to_string()).collect();
    let genes: Vec<String> = cols[n_pos + 1..].iter().map(|s| s.to_string()).collect();
    let mut seen = HashSet::new();
    if genes.iter().any(|g| !seen.insert(g.as_str())) {
        return Err(Error::format(&file, 1, "duplicate gene column"));
    }
    let mut rows = Vec::new();
    let mut conds = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(
                &file,
                lineno,
                format!("expected {} fields, found {}", cols.len(), fields.len()),
            ));
        }
        let perts: Vec<&str> = fields[0].split(delimiter).collect();
        if perts.iter().any(|p| p.is_empty()) {
            return Err(Error::format(&file, lineno, "empty perturbation name"));
        }
        let cov: BTreeMap<String, String> = covariate_keys
            .iter()
            .zip(&fields[1..n_pos])
            .map(|(k, v)| (k.clone(), v.to_string()))
            .collect();
        let condition = Condition::new(perts, Covariates(cov));
        if !conds.insert(condition.clone()) {
            return Err(Error::format(
                &file,
                lineno,
                format!("duplicate condition {condition}"),
            ));
        }
        let n_cells: usize = fields[n_pos].parse().map_err(|_| {
            Error::format(&file, lineno, format!("bad n_cells `{}`", fields[n_pos]))
        })?;
        let values = fields[n_pos + 1..]
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(&file, lineno, format!("bad value `{s}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((condition, n_cells, values));
    }
    Ok(RawTable {
        genes,
        covariate_keys,
        rows,
    })
}
