//! Trained-model directories.
//!
//! ```text
//! config.tsv   key<TAB>value
//! vocab.tsv    kind<TAB>key<TAB>value
//! genes.tsv    gene_name
//! params.idx   name<TAB>shape   (shape as `d1xd2`, one line per tensor, in storage order)
//! params.bin   little-endian f64 values of every tensor, concatenated
//! trace.tsv    epoch<TAB>train_loss<TAB>val_objective
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::nn::{ParamStore, TensorInfo};
use super::{ModelConfig, OneHotVocab, TrainState};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const GENES_FILE: &str = "genes.tsv";
pub const PARAMS_INDEX_FILE: &str = "params.idx";
pub const PARAMS_FILE: &str = "params.bin";
pub const TRACE_FILE: &str = "trace.tsv";

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(|e| Error::io(path, e)))
        .collect()
}

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn write_config(cfg: &ModelConfig, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (k, v) in cfg.to_pairs() {
        s.push_str(&format!("{k}\t{v}\n"));
    }
    write_text(path, &s)
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let lines = read_lines(path)?;
    let mut pairs = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(file_name(path), i + 1, "expected key<TAB>value"))?;
        pairs.push((k, v));
    }
    ModelConfig::from_pairs(pairs).map_err(|e| Error::format(file_name(path), 0, e.to_string()))
}

/// Writes `state` into `dir`, creating it if needed.
pub fn save_model(state: &TrainState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_config(&state.config, &dir.join(CONFIG_FILE))?;

    let mut vocab = String::from("kind\tkey\tvalue\n");
    vocab.push_str(&format!("control\t\t{}\n", state.vocab.control_value()));
    for p in state.vocab.perturbations() {
        vocab.push_str(&format!("perturbation\t\t{p}\n"));
    }
    for (key, levels) in state.vocab.covariates() {
        vocab.push_str(&format!("covariate_key\t{key}\t\n"));
        for l in levels {
            vocab.push_str(&format!("covariate\t{key}\t{l}\n"));
        }
    }
    write_text(&dir.join(VOCAB_FILE), &vocab)?;

    let mut genes = String::from("gene_name\n");
    for g in &state.genes {
        genes.push_str(g);
        genes.push('\n');
    }
    write_text(&dir.join(GENES_FILE), &genes)?;

    let mut idx = String::new();
    for t in &state.params.tensors {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        idx.push_str(&format!("{}\t{}\n", t.name, shape.join("x")));
    }
    write_text(&dir.join(PARAMS_INDEX_FILE), &idx)?;

    let path = dir.join(PARAMS_FILE);
    let mut bytes = Vec::with_capacity(state.params.data.len() * 8);
    for v in &state.params.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;

    let mut trace = String::from("epoch\ttrain_loss\tval_objective\n");
    for (i, l) in state.loss_trace.iter().enumerate() {
        let v = state
            .val_trace
            .get(i)
            .map_or("NA".to_string(), |v| v.to_string());
        trace.push_str(&format!("{i}\t{l}\t{v}\n"));
    }
    trace.push_str(&format!("# best_epoch\t{}\n", state.best_epoch));
    write_text(&dir.join(TRACE_FILE), &trace)
}

fn read_vocab(path: &Path) -> Result<OneHotVocab> {
    let lines = read_lines(path)?;
    let file = file_name(path);
    if lines.first().map(String::as_str) != Some("kind\tkey\tvalue") {
        return Err(Error::format(
            &file,
            1,
            "expected header kind<TAB>key<TAB>value",
        ));
    }
    let mut control = None;
    let mut perts = Vec::new();
    let mut covs: Vec<(String, Vec<String>)> = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format(&file, i + 1, "expected 3 fields"));
        }
        match f[0] {
            "control" => control = Some(f[2].to_string()),
            "perturbation" => perts.push(f[2].to_string()),
            "covariate_key" => covs.push((f[1].to_string(), Vec::new())),
            "covariate" => match covs.iter_mut().find(|(k, _)| k == f[1]) {
                Some((_, levels)) => levels.push(f[2].to_string()),
                None => {
                    return Err(Error::format(
                        &file,
                        i + 1,
                        format!("undeclared covariate key `{}`", f[1]),
                    ))
                }
            },
            other => {
                return Err(Error::format(
                    &file,
                    i + 1,
                    format!("unknown entry kind `{other}`"),
                ))
            }
        }
    }
    let control = control.ok_or_else(|| Error::format(&file, 0, "missing control entry"))?;
    OneHotVocab::new(perts, covs, control).map_err(|e| Error::format(&file, 0, e.to_string()))
}

fn read_trace(path: &Path) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let file = file_name(path);
    let (mut loss, mut val, mut best) = (Vec::new(), Vec::new(), 0);
    for (i, line) in read_lines(path)?.iter().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format(&file, i + 1, "malformed trace line");
        if f[0] == "# best_epoch" {
            best = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            continue;
        }
        if f.len() != 3 {
            return Err(bad());
        }
        loss.push(f[1].parse().map_err(|_| bad())?);
        if f[2] != "NA" {
            val.push(f[2].parse().map_err(|_| bad())?);
        }
    }
    Ok((loss, val, best))
}

/// Loads a model directory written by [`save_model`].
pub fn load_model(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let config = read_config(&dir.join(CONFIG_FILE))?;
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;

    let genes_path = dir.join(GENES_FILE);
    let genes_lines = read_lines(&genes_path)?;
    if genes_lines.first().map(String::as_str) != Some("gene_name") {
        return Err(Error::format(
            file_name(&genes_path),
            1,
            "expected header gene_name",
        ));
    }
    let genes: Vec<String> = genes_lines[1..].to_vec();

    let idx_path = dir.join(PARAMS_INDEX_FILE);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (i, line) in read_lines(&idx_path)?.iter().enumerate() {
        let bad = |m: &str| Error::format(file_name(&idx_path), i + 1, m.to_string());
        let (name, shape) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected name<TAB>shape"))?;
        let shape: Vec<usize> = shape
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("invalid shape")))
            .collect::<Result<_>>()?;
        let t = TensorInfo {
            name: name.to_string(),
            shape,
            offset,
        };
        offset += t.len();
        tensors.push(t);
    }

    let bin_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != offset * 8 {
        return Err(Error::InvalidData(format!(
            "{} holds {} bytes, index declares {} values",
            bin_path.display(),
            bytes.len(),
            offset
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let trace_path = dir.join(TRACE_FILE);
    let (loss_trace, val_trace, best_epoch) = if trace_path.exists() {
        read_trace(&trace_path)?
    } else {
        (Vec::new(), Vec::new(), 0)
    };

    let mut state = TrainState::init(config, vocab, genes)?;
    state.params.load_from(&ParamStore { tensors, data })?;
    state.loss_trace = loss_trace;
    state.val_trace = val_trace;
    state.best_epoch = best_epoch;
    Ok(state)
}
