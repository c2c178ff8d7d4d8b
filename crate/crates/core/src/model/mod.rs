//! Baseline counterfactual models: linear, latent additive and decoder only.
//!
//! * linear: `x' = x + W [p; cov] + b`
//! * latent additive: `x' = f_dec(f_ctrl(x) + f_pert(p))`
//! * decoder only: `x' = f_dec(z)` with `z` one of `p`, `cov` or `(p, cov)`
//!
//! `x` is a matched control cell, `p` the multi-hot perturbation encoding and
//! `cov` the concatenated one-hot covariate encodings.

pub mod archive;
pub mod hpo;
pub mod nn;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregate::{AggregateTable, ConditionAggregate};
use crate::dataset::{
    build_control_index_from, Condition, ControlIndex, CounterfactualRequest, Covariates,
    PerturbationDataset, ValueSpace,
};
use crate::error::{Error, Result};
use crate::metrics::{fit_metric, rank_metric, FitMetric, RankScope};
use crate::preprocess::{aggregate_rows, observed_aggregates};
use crate::splitter::{SplitAssignment, SplitLabel};

pub use nn::{AdamW, MlpSpec, ParamStore, TensorInfo};

pub const DEFAULT_N_CONTROLS: usize = 100;

/// `L = rmse + 0.1 * rank_rmse`.
pub fn hpo_objective(rmse_mean: f64, rmse_rank: f64) -> Result<f64> {
    if !rmse_mean.is_finite() || !rmse_rank.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "objective inputs must be finite, got {rmse_mean} and {rmse_rank}"
        )));
    }
    Ok(rmse_mean + 0.1 * rmse_rank)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Linear,
    LatentAdditive,
    DecoderOnly,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::Linear,
        Architecture::LatentAdditive,
        Architecture::DecoderOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::LatentAdditive => "latent_additive",
            Architecture::DecoderOnly => "decoder_only",
        }
    }

    /// Whether the model consumes a matched control cell.
    pub fn uses_controls(self) -> bool {
        !matches!(self, Architecture::DecoderOnly)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecoderInput {
    Pert,
    Cov,
    PertCov,
}

impl DecoderInput {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderInput::Pert => "pert",
            DecoderInput::Cov => "cov",
            DecoderInput::PertCov => "pert+cov",
        }
    }
}

impl FromStr for DecoderInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pert" => Ok(DecoderInput::Pert),
            "cov" => Ok(DecoderInput::Cov),
            "pert+cov" => Ok(DecoderInput::PertCov),
            _ => Err(Error::InvalidArgument(format!(
                "unknown decoder input `{s}`"
            ))),
        }
    }
}

/// Architecture and optimization settings. The same [`MlpSpec`] shapes every
/// sub-network; the linear model ignores it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub decoder_input: DecoderInput,
    pub latent_dim: usize,
    pub mlp: MlpSpec,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub n_controls: usize,
    pub min_cells: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Linear,
            decoder_input: DecoderInput::PertCov,
            latent_dim: 64,
            mlp: MlpSpec::default(),
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            n_controls: DEFAULT_N_CONTROLS,
            min_cells: crate::preprocess::DEFAULT_MIN_CELLS,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("invalid value `{value}` for `{key}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 16] = [
        "architecture",
        "decoder_input",
        "latent_dim",
        "n_layers",
        "width",
        "dropout",
        "layer_norm",
        "softplus_output",
        "lr",
        "weight_decay",
        "batch_size",
        "max_epochs",
        "patience",
        "seed",
        "n_controls",
        "min_cells",
    ];

    pub fn validate(&self) -> Result<()> {
        self.mlp.validate()?;
        if self.latent_dim == 0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.n_controls == 0
        {
            return Err(Error::InvalidArgument(
                "latent_dim, batch_size, max_epochs and n_controls must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Flat key/value form; floats use the shortest exact representation.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.architecture.as_str().to_string(),
            self.decoder_input.as_str().to_string(),
            self.latent_dim.to_string(),
            self.mlp.n_layers.to_string(),
            self.mlp.width.to_string(),
            self.mlp.dropout.to_string(),
            self.mlp.layer_norm.to_string(),
            self.mlp.softplus_output.to_string(),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            self.batch_size.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.n_controls.to_string(),
            self.min_cells.to_string(),
        ];
        Self::KEYS
            .iter()
            .map(|k| k.to_string())
            .zip(values)
            .collect()
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "architecture" => self.architecture = value.parse()?,
            "decoder_input" => self.decoder_input = value.parse()?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            "n_layers" => self.mlp.n_layers = parse_value(key, value)?,
            "width" => self.mlp.width = parse_value(key, value)?,
            "dropout" => self.mlp.dropout = parse_value(key, value)?,
            "layer_norm" => self.mlp.layer_norm = parse_value(key, value)?,
            "softplus_output" => self.mlp.softplus_output = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "n_controls" => self.n_controls = parse_value(key, value)?,
            "min_cells" => self.min_cells = parse_value(key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Perturbation and covariate vocabularies with contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotVocab {
    perturbations: Vec<String>,
    covariates: Vec<(String, Vec<String>)>,
    control_value: String,
    pert_index: HashMap<String, usize>,
}

impl OneHotVocab {
    pub fn new(
        perturbations: Vec<String>,
        covariates: Vec<(String, Vec<String>)>,
        control_value: String,
    ) -> Result<Self> {
        let pert_index: HashMap<String, usize> = perturbations
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        if pert_index.len() != perturbations.len() {
            return Err(Error::InvalidData(
                "duplicate perturbation in vocabulary".into(),
            ));
        }
        if pert_index.contains_key(&control_value) {
            return Err(Error::InvalidData(format!(
                "control value `{control_value}` listed as a perturbation"
            )));
        }
        for (key, levels) in &covariates {
            if levels.iter().collect::<BTreeSet<_>>().len() != levels.len() {
                return Err(Error::InvalidData(format!(
                    "duplicate level for covariate `{key}`"
                )));
            }
        }
        Ok(OneHotVocab {
            perturbations,
            covariates,
            control_value,
            pert_index,
        })
    }

    pub fn from_dataset(d: &PerturbationDataset) -> Self {
        let mut levels: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for c in d.conditions() {
            for (k, v) in &c.covariates.0 {
                levels.entry(k).or_default().insert(v);
            }
        }
        let covariates = d
            .meta()
            .covariate_keys
            .iter()
            .map(|k| {
                let lv = levels
                    .get(k.as_str())
                    .map(|s| s.iter().map(|v| v.to_string()).collect());
                (k.clone(), lv.unwrap_or_default())
            })
            .collect();
        OneHotVocab::new(
            d.perturbation_names(),
            covariates,
            d.control_value().to_string(),
        )
        .expect("dataset vocabulary is consistent")
    }

    pub fn perturbations(&self) -> &[String] {
        &self.perturbations
    }

    pub fn covariates(&self) -> &[(String, Vec<String>)] {
        &self.covariates
    }

    pub fn control_value(&self) -> &str {
        &self.control_value
    }

    pub fn n_pert(&self) -> usize {
        self.perturbations.len()
    }

    pub fn n_cov(&self) -> usize {
        self.covariates.iter().map(|(_, l)| l.len()).sum()
    }

    pub fn encode_perturbations(&self, perts: &BTreeSet<String>) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.n_pert()];
        for p in perts {
            if *p == self.control_value {
                continue;
            }
            let i = self
                .pert_index
                .get(p)
                .ok_or_else(|| Error::UnknownName(format!("perturbation `{p}`")))?;
            v[*i] = 1.0;
        }
        Ok(v)
    }

    pub fn encode_covariates(&self, cov: &Covariates) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(self.n_cov());
        for (key, levels) in &self.covariates {
            let value = cov
                .get(key)
                .ok_or_else(|| Error::UnknownCovariate(format!("{cov} lacks key `{key}`")))?;
            let i = levels
                .iter()
                .position(|l| l == value)
                .ok_or_else(|| Error::UnknownName(format!("covariate {key}={value}")))?;
            v.extend((0..levels.len()).map(|j| if j == i { 1.0 } else { 0.0 }));
        }
        if cov.0.len() != self.covariates.len() {
            return Err(Error::UnknownCovariate(format!(
                "{cov} has keys outside the vocabulary"
            )));
        }
        Ok(v)
    }

    /// Multi-hot perturbation block followed by the covariate one-hots.
    pub fn encode(&self, c: &Condition) -> Result<Vec<f64>> {
        let mut v = self.encode_perturbations(&c.perturbations)?;
        v.extend(self.encode_covariates(&c.covariates)?);
        Ok(v)
    }
}

/// One minibatch: matched control expression and condition encodings.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ctrl: Array2<f64>,
    pub pert: Array2<f64>,
    pub cov: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Network {
    Linear(nn::Dense),
    LatentAdditive {
        ctrl: nn::Mlp,
        pert: nn::Mlp,
        dec: nn::Mlp,
    },
    DecoderOnly {
        input: DecoderInput,
        dec: nn::Mlp,
    },
}

pub(crate) enum NetCache {
    Linear(Array2<f64>),
    LatentAdditive {
        ctrl: nn::MlpCache,
        pert: nn::MlpCache,
        dec: nn::MlpCache,
        active: Vec<bool>,
    },
    DecoderOnly(nn::MlpCache),
}

impl Network {
    pub(crate) fn build(
        cfg: &ModelConfig,
        n_genes: usize,
        vocab: &OneHotVocab,
    ) -> (Network, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::default();
        let (n_pert, n_cov) = (vocab.n_pert(), vocab.n_cov());
        let net = match cfg.architecture {
            Architecture::Linear => Network::Linear(nn::Dense::new(
                &mut ps,
                "linear",
                n_pert + n_cov,
                n_genes,
                0.0,
                &mut rng,
            )),
            Architecture::LatentAdditive => {
                let inner = MlpSpec {
                    softplus_output: false,
                    ..cfg.mlp.clone()
                };
                let ctrl = nn::Mlp::new(&mut ps, "ctrl", n_genes, cfg.latent_dim, &inner, &mut rng);
                let pert = nn::Mlp::new(&mut ps, "pert", n_pert, cfg.latent_dim, &inner, &mut rng);
                let dec = nn::Mlp::new(&mut ps, "dec", cfg.latent_dim, n_genes, &cfg.mlp, &mut rng);
                Network::LatentAdditive { ctrl, pert, dec }
            }
            Architecture::DecoderOnly => {
                let n_in = match cfg.decoder_input {
                    DecoderInput::Pert => n_pert,
                    DecoderInput::Cov => n_cov,
                    DecoderInput::PertCov => n_pert + n_cov,
                };
                let dec = nn::Mlp::new(&mut ps, "dec", n_in, n_genes, &cfg.mlp, &mut rng);
                Network::DecoderOnly {
                    input: cfg.decoder_input,
                    dec,
                }
            }
        };
        (net, ps)
    }

    /// `rng` switches dropout on.
    pub(crate) fn forward(
        &self,
        p: &[f64],
        b: &Batch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, NetCache) {
        match self {
            Network::Linear(dense) => {
                let u = nn::hstack(&b.pert, &b.cov);
                let y = &b.ctrl + &dense.forward(p, &u.view());
                (y, NetCache::Linear(u))
            }
            Network::LatentAdditive { ctrl, pert, dec } => {
                let mut rng = rng;
                let (zc, cc) = ctrl.forward(p, &b.ctrl, rng.as_deref_mut());
                let (mut zp, pc) = pert.forward(p, &b.pert, rng.as_deref_mut());
                // Controls carry no perturbation, so their z_pert is exactly zero.
                let active: Vec<bool> = b
                    .pert
                    .outer_iter()
                    .map(|r| r.iter().any(|&v| v != 0.0))
                    .collect();
                for (mut row, &a) in zp.outer_iter_mut().zip(&active) {
                    if !a {
                        row.fill(0.0);
                    }
                }
                let (y, dc) = dec.forward(p, &(zc + zp), rng);
                (
                    y,
                    NetCache::LatentAdditive {
                        ctrl: cc,
                        pert: pc,
                        dec: dc,
                        active,
                    },
                )
            }
            Network::DecoderOnly { input, dec } => {
                let u = match input {
                    DecoderInput::Pert => b.pert.clone(),
                    DecoderInput::Cov => b.cov.clone(),
                    DecoderInput::PertCov => nn::hstack(&b.pert, &b.cov),
                };
                let (y, c) = dec.forward(p, &u, rng);
                (y, NetCache::DecoderOnly(c))
            }
        }
    }

    pub(crate) fn backward(&self, p: &[f64], cache: &NetCache, dy: &Array2<f64>, grad: &mut [f64]) {
        match (self, cache) {
            (Network::Linear(dense), NetCache::Linear(u)) => {
                dense.backward(p, &u.view(), dy, grad);
            }
            (
                Network::LatentAdditive { ctrl, pert, dec },
                NetCache::LatentAdditive {
                    ctrl: cc,
                    pert: pc,
                    dec: dc,
                    active,
                },
            ) => {
                let dz = dec.backward(p, dc, dy, grad);
                ctrl.backward(p, cc, &dz, grad);
                let mut dzp = dz;
                for (mut row, &a) in dzp.outer_iter_mut().zip(active) {
                    if !a {
                        row.fill(0.0);
                    }
                }
                pert.backward(p, pc, &dzp, grad);
            }
            (Network::DecoderOnly { dec, .. }, NetCache::DecoderOnly(c)) => {
                dec.backward(p, c, dy, grad);
            }
            _ => unreachable!("cache built by a different network"),
        }
    }
}

/// Mean squared error over all entries and its gradient.
pub(crate) fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = pred - target;
    let n = diff.len().max(1) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// A trained model together with the metadata needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub vocab: OneHotVocab,
    pub genes: Vec<String>,
    pub params: ParamStore,
    pub loss_trace: Vec<f64>,
    pub val_trace: Vec<f64>,
    pub best_epoch: usize,
}

impl TrainState {
    /// Freshly initialized, untrained model.
    pub fn init(config: ModelConfig, vocab: OneHotVocab, genes: Vec<String>) -> Result<Self> {
        config.validate()?;
        let (_, params) = Network::build(&config, genes.len(), &vocab);
        Ok(TrainState {
            config,
            vocab,
            genes,
            params,
            loss_trace: Vec::new(),
            val_trace: Vec::new(),
            best_epoch: 0,
        })
    }

    pub(crate) fn network(&self) -> Result<Network> {
        let (net, fresh) = Network::build(&self.config, self.genes.len(), &self.vocab);
        if fresh.tensors != self.params.tensors {
            return Err(Error::InvalidData(
                "parameter layout does not match the model configuration".into(),
            ));
        }
        Ok(net)
    }

    /// Mean squared reconstruction loss on `batch` in evaluation mode.
    pub fn loss(&self, batch: &Batch, target: &Array2<f64>) -> Result<f64> {
        let net = self.network()?;
        Ok(mse_loss(&net.forward(&self.params.data, batch, None).0, target).0)
    }

    /// Loss and its gradient with respect to every parameter, in storage order.
    pub fn loss_gradient(&self, batch: &Batch, target: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
        let net = self.network()?;
        let (pred, cache) = net.forward(&self.params.data, batch, None);
        let (loss, dy) = mse_loss(&pred, target);
        let mut grad = vec![0.0; self.params.len()];
        net.backward(&self.params.data, &cache, &dy, &mut grad);
        Ok((loss, grad))
    }

    /// Best validation objective reached, if validation ran.
    pub fn best_val(&self) -> Option<f64> {
        self.val_trace.iter().copied().reduce(f64::min)
    }
}

fn require_lognorm(d: &PerturbationDataset) -> Result<()> {
    if d.value_space() != ValueSpace::LogNorm {
        return Err(Error::InvalidData(
            "models operate on log-normalized data; run preprocess first".into(),
        ));
    }
    Ok(())
}

fn fill_rows(d: &PerturbationDataset, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), d.n_genes()));
    for (i, &r) in rows.iter().enumerate() {
        let (cols, vals) = d.counts().row(r);
        let mut dst = out.row_mut(i);
        for (&c, &v) in cols.iter().zip(vals) {
            dst[c] = v;
        }
    }
    out
}

/// Encodings of every condition of `d`, indexed like `d.conditions()`.
fn encode_conditions(
    vocab: &OneHotVocab,
    d: &PerturbationDataset,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    d.conditions()
        .iter()
        .map(|c| {
            Ok((
                vocab.encode_perturbations(&c.perturbations)?,
                vocab.encode_covariates(&c.covariates)?,
            ))
        })
        .collect()
}

fn stack(vs: impl ExactSizeIterator<Item = Vec<f64>>, dim: usize) -> Array2<f64> {
    let n = vs.len();
    let flat: Vec<f64> = vs.flatten().collect();
    Array2::from_shape_vec((n, dim), flat).expect("consistent encoding width")
}

fn check_genes(state: &TrainState, d: &PerturbationDataset) -> Result<()> {
    if state.genes != d.gene_names() {
        return Err(Error::GeneMismatch(format!(
            "model was trained on {} genes, dataset has {} (or a different order)",
            state.genes.len(),
            d.n_genes()
        )));
    }
    Ok(())
}

/// Validation objective of `state` on the given observed aggregates.
fn validation_objective(
    state: &TrainState,
    net: &Network,
    d: &PerturbationDataset,
    requests: &[CounterfactualRequest],
    observed: &[ConditionAggregate],
) -> Result<f64> {
    let preds = predict_with(
        state,
        net,
        d,
        requests,
        state.config.n_controls,
        state.config.seed,
    )?;
    let rmse: Vec<f64> = preds
        .iter()
        .zip(observed)
        .map(|(p, o)| fit_metric(FitMetric::Rmse, &p.mean, &o.mean))
        .collect::<Result<_>>()?;
    let macro_rmse = rmse.iter().sum::<f64>() / rmse.len() as f64;
    let rank = if preds.len() >= 2 {
        rank_metric(&preds, observed, FitMetric::Rmse, RankScope::Global)?.average
    } else {
        0.0
    };
    hpo_objective(macro_rmse, rank)
}

/// Trains `cfg` on the train cells of `split`, early-stopping on the
/// validation objective.
///
/// Every training cell, control or perturbed, is a reconstruction target.
/// Matching architectures pair each target with a control of the same
/// covariates, freshly drawn every epoch.
pub fn train_model(
    d: &PerturbationDataset,
    split: &SplitAssignment,
    cfg: &ModelConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    require_lognorm(d)?;
    let labels = split.labels_for(d)?;
    let rows_of =
        |l: SplitLabel| -> Vec<usize> { (0..d.n_cells()).filter(|&r| labels[r] == l).collect() };
    let train_rows = rows_of(SplitLabel::Train);
    if !train_rows.iter().any(|&r| !d.is_control(r)) {
        return Err(Error::Training(
            "training split has no perturbed cells".into(),
        ));
    }
    let controls = build_control_index_from(d, train_rows.iter().copied())?;
    let vocab = OneHotVocab::from_dataset(d);
    let mut state = TrainState::init(cfg.clone(), vocab, d.gene_names().to_vec())?;
    let net = state.network()?;
    let enc = encode_conditions(&state.vocab, d)?;
    let (n_pert, n_cov) = (state.vocab.n_pert(), state.vocab.n_cov());

    let val_rows = rows_of(SplitLabel::Val);
    let observed: Vec<ConditionAggregate> = aggregate_rows(d, &val_rows, cfg.min_cells)?
        .into_iter()
        .filter(|a| !a.condition.is_control(d.control_value()))
        .collect();
    let val_requests: Vec<CounterfactualRequest> = observed
        .iter()
        .map(|a| {
            Ok(CounterfactualRequest {
                target: a.condition.clone(),
                control_rows: controls.lookup(&a.condition.covariates)?.to_vec(),
                reference_rows: None,
            })
        })
        .collect::<Result<_>>()?;
    if observed.is_empty() {
        log::warn!("no validation conditions; early stopping uses the training loss");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(state.params.len(), cfg.lr, cfg.weight_decay);
    let mut grad = vec![0.0; state.params.len()];
    let mut order = train_rows.clone();
    let mut best = (f64::INFINITY, state.params.data.clone(), 0usize);
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ctrl = if cfg.architecture.uses_controls() {
                let picks: Vec<usize> = chunk
                    .iter()
                    .map(|&r| Ok(controls.sample(d.covariates(r), 1, &mut rng)?[0]))
                    .collect::<Result<_>>()?;
                fill_rows(d, &picks)
            } else {
                Array2::zeros((chunk.len(), d.n_genes()))
            };
            let batch = Batch {
                ctrl,
                pert: stack(
                    chunk.iter().map(|&r| enc[d.condition_index(r)].0.clone()),
                    n_pert,
                ),
                cov: stack(
                    chunk.iter().map(|&r| enc[d.condition_index(r)].1.clone()),
                    n_cov,
                ),
            };
            let target = fill_rows(d, chunk);
            let (pred, cache) = net.forward(&state.params.data, &batch, Some(&mut rng));
            let (loss, dy) = mse_loss(&pred, &target);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}; try a smaller learning rate (lr={})",
                    cfg.lr
                )));
            }
            total += loss * chunk.len() as f64;
            grad.fill(0.0);
            net.backward(&state.params.data, &cache, &dy, &mut grad);
            opt.step(&mut state.params.data, &grad);
        }
        let train_loss = total / order.len() as f64;
        state.loss_trace.push(train_loss);
        let score = if observed.is_empty() {
            train_loss
        } else {
            let v = validation_objective(&state, &net, d, &val_requests, &observed)?;
            state.val_trace.push(v);
            v
        };
        log::debug!("epoch {epoch}: train loss {train_loss:.6}, objective {score:.6}");
        if score < best.0 {
            best = (score, state.params.data.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop at epoch {epoch}; best epoch {}", best.2);
                break;
            }
        }
    }
    state.params.data = best.1;
    state.best_epoch = best.2;
    Ok(state)
}

/// Predicted aggregates for each request.
///
/// Matching architectures decode `n_controls` controls drawn with
/// replacement from the request's control rows and average; LogFC is taken
/// against the mean of those same controls. Decoder-only models emit one
/// decoded vector and take LogFC against the mean of all request controls.
pub fn predict(
    state: &TrainState,
    d: &PerturbationDataset,
    requests: &[CounterfactualRequest],
    n_controls: usize,
    seed: u64,
) -> Result<Vec<ConditionAggregate>> {
    if n_controls == 0 {
        return Err(Error::InvalidArgument(
            "n_controls must be at least 1".into(),
        ));
    }
    check_genes(state, d)?;
    require_lognorm(d)?;
    let net = state.network()?;
    predict_with(state, &net, d, requests, n_controls, seed)
}

fn predict_with(
    state: &TrainState,
    net: &Network,
    d: &PerturbationDataset,
    requests: &[CounterfactualRequest],
    n_controls: usize,
    seed: u64,
) -> Result<Vec<ConditionAggregate>> {
    let arch = state.config.architecture;
    requests
        .par_iter()
        .enumerate()
        .map(|(i, req)| {
            if req.control_rows.is_empty() {
                return Err(Error::MissingControls(req.target.covariates.to_string()));
            }
            let pert = state
                .vocab
                .encode_perturbations(&req.target.perturbations)?;
            let cov = state.vocab.encode_covariates(&req.target.covariates)?;
            let ctrl_rows: Vec<usize> = if arch.uses_controls() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                (0..n_controls)
                    .map(|_| {
                        req.control_rows
                            [rand::Rng::random_range(&mut rng, 0..req.control_rows.len())]
                    })
                    .collect()
            } else {
                req.control_rows.clone()
            };
            let ctrl = fill_rows(d, &ctrl_rows);
            let n_rows = if arch.uses_controls() { n_controls } else { 1 };
            let batch = Batch {
                ctrl: if arch.uses_controls() {
                    ctrl.clone()
                } else {
                    Array2::zeros((1, d.n_genes()))
                },
                pert: stack(std::iter::repeat_n(pert, n_rows), state.vocab.n_pert()),
                cov: stack(std::iter::repeat_n(cov, n_rows), state.vocab.n_cov()),
            };
            let (y, _) = net.forward(&state.params.data, &batch, None);
            let mean = column_mean(&y);
            let ctrl_mean = column_mean(&ctrl);
            let logfc = mean.iter().zip(&ctrl_mean).map(|(m, c)| m - c).collect();
            Ok(ConditionAggregate {
                condition: req.target.clone(),
                mean,
                n_cells: n_rows,
                logfc: Some(logfc),
            })
        })
        .collect()
}

fn column_mean(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows() as f64;
    a.columns().into_iter().map(|c| c.sum() / n).collect()
}

/// Aggregate table over `d`'s genes and labelling conventions.
pub fn table_for(d: &PerturbationDataset, rows: Vec<ConditionAggregate>) -> AggregateTable {
    AggregateTable {
        genes: d.gene_names().to_vec(),
        covariate_keys: d.meta().covariate_keys.clone(),
        control_value: d.control_value().to_string(),
        delimiter: d.meta().combination_delimiter.clone(),
        rows,
    }
}

/// Predictions and observations for the perturbed conditions of one split
/// part, returned as `(predicted, observed)`. Matched controls come from the
/// training cells.
pub fn predict_split(
    state: &TrainState,
    d: &PerturbationDataset,
    split: &SplitAssignment,
    label: SplitLabel,
    seed: u64,
) -> Result<(AggregateTable, AggregateTable)> {
    let labels = split.labels_for(d)?;
    let rows: Vec<usize> = (0..d.n_cells()).filter(|&r| labels[r] == label).collect();
    let train: Vec<usize> = (0..d.n_cells())
        .filter(|&r| labels[r] == SplitLabel::Train)
        .collect();
    let observed: Vec<ConditionAggregate> = observed_aggregates(d, &rows, state.config.min_cells)?
        .into_iter()
        .filter(|a| !a.condition.is_control(d.control_value()))
        .collect();
    if observed.is_empty() {
        return Err(Error::Split(format!(
            "no perturbed condition with enough cells in the {label} split"
        )));
    }
    let index = build_control_index_from(d, train)?;
    let targets: Vec<Condition> = observed.iter().map(|a| a.condition.clone()).collect();
    let preds = predict(
        state,
        d,
        &requests_for(&index, &targets)?,
        state.config.n_controls,
        seed,
    )?;
    Ok((table_for(d, preds), table_for(d, observed)))
}

/// Requests for every listed condition using controls from `index`.
pub fn requests_for(
    index: &ControlIndex,
    targets: &[Condition],
) -> Result<Vec<CounterfactualRequest>> {
    crate::dataset::build_counterfactual_requests(index, targets, None)
}
