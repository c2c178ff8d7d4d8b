//! Synthetic perturb-seq data with known ground truth, and oracle predictors.
//!
//! Per cell the log-rate vector is `base(cov) + sum of member effects +
//! interaction + noise`, rates are its softmax, the library size is
//! log-normal and counts are Poisson. Expected log-normalized means are
//! computed by quadrature over the library size and the per-gene noise with
//! an exact Poisson sum, so ground truth carries no sampling error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::aggregate::{AggregateTable, ConditionAggregate};
use crate::dataset::{
    Condition, Covariates, DatasetMeta, PerturbationDataset, ValueSpace, DEFAULT_CONTROL,
};
use crate::error::{Error, Result};
use crate::preprocess::TARGET_SUM;
use crate::sparse::CsrBuilder;

pub const TRUTH_MEANS_FILE: &str = "truth_means.tsv";
pub const TRUTH_LOGFC_FILE: &str = "truth_logfc.tsv";
pub const TRUTH_EFFECTS_FILE: &str = "truth_effects.tsv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_genes: usize,
    pub n_perturbations: usize,
    /// Covariate key and its number of levels; conditions span the full product.
    pub covariates: Vec<(String, usize)>,
    pub cells_per_condition: usize,
    /// Control cells per covariate assignment; defaults to `cells_per_condition`.
    pub control_cells: Option<usize>,
    /// Dual perturbations generated in every covariate assignment.
    pub n_combinations: usize,
    /// Non-zero genes per perturbation effect.
    pub effect_sparsity: usize,
    pub effect_scale: f64,
    pub covariate_scale: f64,
    /// Spread of the shared per-gene baseline.
    pub gene_base_scale: f64,
    pub interaction_fraction: f64,
    pub interaction_scale: f64,
    /// Non-zero genes of the interaction vector; defaults to `effect_sparsity`.
    pub interaction_sparsity: Option<usize>,
    pub noise: f64,
    pub library_log_mean: f64,
    pub library_log_sd: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_genes: 200,
            n_perturbations: 20,
            covariates: vec![("cell_type".to_string(), 3)],
            cells_per_condition: 100,
            control_cells: None,
            n_combinations: 0,
            effect_sparsity: 10,
            effect_scale: 1.0,
            covariate_scale: 0.5,
            gene_base_scale: 1.0,
            interaction_fraction: 0.0,
            interaction_scale: 1.0,
            interaction_sparsity: None,
            noise: 0.1,
            library_log_mean: 8.5,
            library_log_sd: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_genes < 2 {
            return bad("n_genes must be at least 2".into());
        }
        if self.n_perturbations < 1 || self.cells_per_condition < 1 || self.control_cells == Some(0)
        {
            return bad("perturbation and cell counts must be at least 1".into());
        }
        if self.covariates.iter().any(|(k, n)| k.is_empty() || *n < 1) {
            return bad("every covariate needs a name and at least 1 level".into());
        }
        if self.effect_sparsity < 1 || self.effect_sparsity > self.n_genes {
            return bad(format!("effect_sparsity must lie in 1..={}", self.n_genes));
        }
        if let Some(k) = self.interaction_sparsity {
            if k < 1 || k > self.n_genes {
                return bad(format!(
                    "interaction_sparsity must lie in 1..={}",
                    self.n_genes
                ));
            }
        }
        let scales = [
            ("effect_scale", self.effect_scale),
            ("covariate_scale", self.covariate_scale),
            ("gene_base_scale", self.gene_base_scale),
            ("interaction_scale", self.interaction_scale),
            ("noise", self.noise),
            ("library_log_sd", self.library_log_sd),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if !self.library_log_mean.is_finite() {
            return bad("library_log_mean must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.interaction_fraction) {
            return bad("interaction_fraction must lie in [0, 1]".into());
        }
        let p = self.n_perturbations;
        if self.n_combinations > p * (p - 1) / 2 {
            return bad(format!(
                "{p} perturbations admit at most {} pairs",
                p * (p - 1) / 2
            ));
        }
        Ok(())
    }

    fn n_interacting(&self) -> usize {
        (self.interaction_fraction * self.n_combinations as f64).round() as usize
    }
}

/// Exact generative parameters plus expected aggregates for every condition.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub genes: Vec<String>,
    pub covariate_keys: Vec<String>,
    pub control_value: String,
    /// Log-rate baseline per covariate assignment.
    pub base: BTreeMap<Covariates, Vec<f64>>,
    /// Log-rate effect per perturbation.
    pub effects: BTreeMap<String, Vec<f64>>,
    /// Log-rate interaction per generated combination (zero when non-interacting).
    pub interactions: BTreeMap<BTreeSet<String>, Vec<f64>>,
    /// Expected lognorm means and LogFCs, in dataset condition order.
    pub aggregates: Vec<ConditionAggregate>,
}

impl GroundTruth {
    pub fn get(&self, c: &Condition) -> Option<&ConditionAggregate> {
        self.aggregates.iter().find(|a| &a.condition == c)
    }

    /// Total log-rate shift of a condition relative to its covariate baseline.
    pub fn effect(&self, c: &Condition) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.genes.len()];
        if c.is_control(&self.control_value) {
            return Ok(out);
        }
        for p in &c.perturbations {
            let e = self
                .effects
                .get(p)
                .ok_or_else(|| Error::UnknownName(p.clone()))?;
            out.iter_mut().zip(e).for_each(|(o, x)| *o += x);
        }
        if c.is_combination() {
            let u = self.interactions.get(&c.perturbations).ok_or_else(|| {
                Error::UnknownName(format!("combination {}", c.perturbation_label("+")))
            })?;
            out.iter_mut().zip(u).for_each(|(o, x)| *o += x);
        }
        Ok(out)
    }

    pub fn table(&self) -> AggregateTable {
        AggregateTable::new(
            self.genes.clone(),
            self.covariate_keys.clone(),
            self.aggregates.clone(),
        )
    }

    /// Log-rate effects in the aggregate layout (the `mean` column holds the effect).
    pub fn effects_table(&self) -> Result<AggregateTable> {
        let rows = self
            .aggregates
            .iter()
            .map(|a| {
                Ok(ConditionAggregate {
                    condition: a.condition.clone(),
                    mean: self.effect(&a.condition)?,
                    n_cells: a.n_cells,
                    logfc: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AggregateTable::new(
            self.genes.clone(),
            self.covariate_keys.clone(),
            rows,
        ))
    }
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for the weight `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (PIM4, 0.0);
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Quadrature rule for `E[f(Z)]` with `Z ~ N(mean, sd^2)`.
fn normal_rule(mean: f64, sd: f64, n: usize) -> Vec<(f64, f64)> {
    if sd == 0.0 {
        return vec![(mean, 1.0)];
    }
    let (x, w) = gauss_hermite(n);
    let norm = std::f64::consts::PI.sqrt();
    x.iter()
        .zip(&w)
        .map(|(x, w)| (mean + sd * std::f64::consts::SQRT_2 * x, w / norm))
        .collect()
}

/// `E[ln(1 + 1e4 X / (X + rest))]` for `X ~ Poisson(lambda)`.
fn poisson_lognorm(lambda: f64, rest: f64) -> f64 {
    let g = |x: f64| {
        if x == 0.0 {
            0.0
        } else {
            (TARGET_SUM * x / (x + rest)).ln_1p()
        }
    };
    let mode = lambda.floor();
    let p_mode = (mode * lambda.ln() - lambda - ln_gamma(mode + 1.0)).exp();
    let mut total = 0.0;
    let (mut x, mut p) = (mode, p_mode);
    loop {
        total += p * g(x);
        p *= lambda / (x + 1.0);
        x += 1.0;
        if p < 1e-17 * p_mode.max(1e-300) || p == 0.0 {
            break;
        }
    }
    let (mut x, mut p) = (mode, p_mode);
    while x > 0.0 {
        p *= x / lambda;
        x -= 1.0;
        total += p * g(x);
        if p < 1e-17 * p_mode {
            break;
        }
    }
    total
}

/// Expected lognorm value as a function of the noiseless log rate share,
/// tabulated on a uniform grid and read back by cubic interpolation.
struct LognormCurve {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

const CURVE_POINTS: usize = 512;
const QUAD_NODES: usize = 16;

impl LognormCurve {
    fn new(spec: &SynthSpec, lo: f64, hi: f64) -> Self {
        let (lo, hi) = (lo - 0.05, hi + 0.05);
        let step = (hi - lo) / (CURVE_POINTS - 4) as f64;
        let lo = lo - step;
        let lib = normal_rule(spec.library_log_mean, spec.library_log_sd, QUAD_NODES);
        let eps = normal_rule(0.0, spec.noise, QUAD_NODES);
        let rest_scale = (spec.noise * spec.noise / 2.0).exp();
        let values = (0..CURVE_POINTS)
            .into_par_iter()
            .map(|i| {
                let q = (lo + i as f64 * step).exp();
                let mut total = 0.0;
                for &(log_l, wl) in &lib {
                    let l = log_l.exp();
                    for &(e, we) in &eps {
                        let num = q * e.exp();
                        let pi = num / (num + (1.0 - q) * rest_scale);
                        total += wl * we * poisson_lognorm(l * pi, l * (1.0 - pi));
                    }
                }
                total
            })
            .collect();
        LognormCurve { lo, step, values }
    }

    fn eval(&self, log_q: f64) -> f64 {
        let t = (log_q - self.lo) / self.step;
        let i = (t.floor() as usize).clamp(1, self.values.len() - 3);
        let u = t - i as f64;
        let (p0, p1, p2, p3) = (
            self.values[i - 1],
            self.values[i],
            self.values[i + 1],
            self.values[i + 2],
        );
        p1 + 0.5
            * u
            * (p2 - p0
                + u * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + u * (3.0 * (p1 - p2) + p3 - p0)))
    }
}

fn log_softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + eta.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    eta.iter().map(|x| x - lse).collect()
}

fn sparse_vector(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    let normal = Normal::new(0.0, scale.max(f64::MIN_POSITIVE)).expect("finite scale");
    for g in rand::seq::index::sample(rng, n, k) {
        v[g] = if scale == 0.0 {
            0.0
        } else {
            normal.sample(rng)
        };
    }
    v
}

fn dense_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, scale).expect("finite scale");
    (0..n).map(|_| normal.sample(rng)).collect()
}

fn pad(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(2)
}

/// Draws a dataset and its ground truth; deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<(PerturbationDataset, GroundTruth)> {
    spec.validate()?;
    let g = spec.n_genes;
    let p = spec.n_perturbations;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let genes: Vec<String> = (0..g)
        .map(|i| format!("gene_{i:0w$}", w = pad(g).max(4)))
        .collect();
    let perts: Vec<String> = (0..p)
        .map(|i| format!("pert_{i:0w$}", w = pad(p)))
        .collect();

    // Covariate assignments: full product of levels.
    let keys: Vec<String> = spec.covariates.iter().map(|(k, _)| k.clone()).collect();
    let mut assignments: Vec<Vec<usize>> = vec![Vec::new()];
    for (_, n) in &spec.covariates {
        assignments = assignments
            .into_iter()
            .flat_map(|a| {
                (0..*n).map(move |i| {
                    let mut b = a.clone();
                    b.push(i);
                    b
                })
            })
            .collect();
    }

    let gene_base = dense_vector(&mut rng, g, spec.gene_base_scale);
    let level_dev: Vec<Vec<Vec<f64>>> = spec
        .covariates
        .iter()
        .map(|(_, n)| {
            (0..*n)
                .map(|_| dense_vector(&mut rng, g, spec.covariate_scale))
                .collect()
        })
        .collect();
    let mut base: BTreeMap<Covariates, Vec<f64>> = BTreeMap::new();
    let mut cov_list = Vec::with_capacity(assignments.len());
    for a in &assignments {
        let cov = Covariates::new(
            keys.iter()
                .zip(a)
                .map(|(k, &i)| (k.clone(), format!("{k}_{i}"))),
        );
        let mut v = gene_base.clone();
        for (ki, &li) in a.iter().enumerate() {
            v.iter_mut()
                .zip(&level_dev[ki][li])
                .for_each(|(x, d)| *x += d);
        }
        base.insert(cov.clone(), v);
        cov_list.push(cov);
    }

    let effects: BTreeMap<String, Vec<f64>> = perts
        .iter()
        .map(|name| {
            (
                name.clone(),
                sparse_vector(&mut rng, g, spec.effect_sparsity, spec.effect_scale),
            )
        })
        .collect();

    // Dual perturbations: interacting pairs come from a flagged half of the
    // perturbations and share one interaction vector.
    let n_int = spec.n_interacting();
    let mut flagged_order: Vec<usize> = (0..p).collect();
    flagged_order.shuffle(&mut rng);
    let flagged: BTreeSet<usize> = if n_int > 0 {
        flagged_order[..p.div_ceil(2)].iter().copied().collect()
    } else {
        BTreeSet::new()
    };
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for a in 0..p {
        for b in a + 1..p {
            if flagged.contains(&a) && flagged.contains(&b) {
                inside.push((a, b));
            } else {
                outside.push((a, b));
            }
        }
    }
    if inside.len() < n_int || outside.len() < spec.n_combinations - n_int {
        return Err(Error::InvalidArgument(format!(
            "cannot draw {} interacting and {} additive pairs from {p} perturbations",
            n_int,
            spec.n_combinations - n_int
        )));
    }
    inside.shuffle(&mut rng);
    outside.shuffle(&mut rng);
    let k_int = spec.interaction_sparsity.unwrap_or(spec.effect_sparsity);
    let shared = sparse_vector(&mut rng, g, k_int, spec.interaction_scale);
    let mut interactions: BTreeMap<BTreeSet<String>, Vec<f64>> = BTreeMap::new();
    for &(a, b) in &inside[..n_int] {
        interactions.insert(
            BTreeSet::from([perts[a].clone(), perts[b].clone()]),
            shared.clone(),
        );
    }
    for &(a, b) in &outside[..spec.n_combinations - n_int] {
        interactions.insert(
            BTreeSet::from([perts[a].clone(), perts[b].clone()]),
            vec![0.0; g],
        );
    }

    // Condition list in canonical order.
    let mut conditions: Vec<Condition> = Vec::new();
    for cov in &cov_list {
        conditions.push(Condition::control(DEFAULT_CONTROL, cov.clone()));
        for name in &perts {
            conditions.push(Condition::new([name.as_str()], cov.clone()));
        }
        for pair in interactions.keys() {
            conditions.push(Condition {
                perturbations: pair.clone(),
                covariates: cov.clone(),
            });
        }
    }
    conditions.sort();

    let mut truth = GroundTruth {
        genes: genes.clone(),
        covariate_keys: keys.clone(),
        control_value: DEFAULT_CONTROL.to_string(),
        base,
        effects,
        interactions,
        aggregates: Vec::new(),
    };
    let log_rates: Vec<Vec<f64>> = conditions
        .iter()
        .map(|c| {
            let e = truth.effect(c)?;
            Ok(truth.base[&c.covariates]
                .iter()
                .zip(&e)
                .map(|(b, e)| b + e)
                .collect())
        })
        .collect::<Result<_>>()?;
    let control_cells = spec.control_cells.unwrap_or(spec.cells_per_condition);
    let n_cells_of = |c: &Condition| {
        if c.is_control(DEFAULT_CONTROL) {
            control_cells
        } else {
            spec.cells_per_condition
        }
    };

    // Cells, one independent random stream per condition.
    let lib = LogNormal::new(spec.library_log_mean, spec.library_log_sd)
        .map_err(|e| Error::InvalidArgument(format!("library size distribution: {e}")))?;
    let blocks: Vec<Vec<Vec<(usize, f64)>>> = log_rates
        .par_iter()
        .enumerate()
        .map(|(ci, eta0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(ci as u64 + 1);
            let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
            let mut cells = Vec::new();
            while cells.len() < n_cells_of(&conditions[ci]) {
                let eta: Vec<f64> = if spec.noise == 0.0 {
                    eta0.clone()
                } else {
                    eta0.iter().map(|x| x + noise.sample(&mut rng)).collect()
                };
                let log_pi = log_softmax(&eta);
                let l = lib.sample(&mut rng);
                let mut row = Vec::new();
                for (gi, lp) in log_pi.iter().enumerate() {
                    let lambda = l * lp.exp();
                    if lambda > 0.0 {
                        let x: f64 = Poisson::new(lambda)
                            .expect("positive rate")
                            .sample(&mut rng);
                        if x > 0.0 {
                            row.push((gi, x));
                        }
                    }
                }
                if !row.is_empty() {
                    cells.push(row);
                }
            }
            cells
        })
        .collect();

    let mut builder = CsrBuilder::new(g);
    let mut cell_perts = Vec::new();
    let mut cell_covs = Vec::new();
    for (ci, block) in blocks.into_iter().enumerate() {
        for row in block {
            builder.push_sparse_row(row);
            cell_perts.push(conditions[ci].perturbations.clone());
            cell_covs.push(conditions[ci].covariates.clone());
        }
    }
    let n = cell_perts.len();
    let ids: Vec<String> = (0..n).map(|i| format!("cell_{i:06}")).collect();
    let dataset = PerturbationDataset::new(
        builder.finish(),
        ids,
        cell_perts,
        cell_covs,
        genes,
        DatasetMeta {
            covariate_keys: keys,
            value_space: ValueSpace::Counts,
            ..Default::default()
        },
    )?;

    // Expected aggregates.
    let log_q: Vec<Vec<f64>> = log_rates.iter().map(|e| log_softmax(e)).collect();
    let (lo, hi) = log_q
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let curve = LognormCurve::new(spec, lo, hi.min(0.0));
    let means: Vec<Vec<f64>> = log_q
        .iter()
        .map(|lq| lq.iter().map(|&x| curve.eval(x)).collect())
        .collect();
    let control_mean: BTreeMap<&Covariates, &Vec<f64>> = conditions
        .iter()
        .zip(&means)
        .filter(|(c, _)| c.is_control(DEFAULT_CONTROL))
        .map(|(c, m)| (&c.covariates, m))
        .collect();
    truth.aggregates = conditions
        .iter()
        .zip(&means)
        .map(|(c, m)| {
            let logfc = if c.is_control(DEFAULT_CONTROL) {
                vec![0.0; g]
            } else {
                m.iter()
                    .zip(control_mean[&c.covariates])
                    .map(|(a, b)| a - b)
                    .collect()
            };
            ConditionAggregate {
                condition: c.clone(),
                mean: m.clone(),
                n_cells: n_cells_of(c),
                logfc: Some(logfc),
            }
        })
        .collect();
    Ok((dataset, truth))
}

/// Writes `truth_means.tsv`, `truth_logfc.tsv` and `truth_effects.tsv`.
pub fn export_truth(truth: &GroundTruth, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let t = truth.table();
    t.write_means(&dir.join(TRUTH_MEANS_FILE))?;
    t.write_logfc(&dir.join(TRUTH_LOGFC_FILE))?;
    truth
        .effects_table()?
        .write_means(&dir.join(TRUTH_EFFECTS_FILE))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleKind {
    /// Exact truth.
    Perfect,
    /// Mean truth over the perturbed conditions of the covariate assignment, ignoring the perturbation.
    Collapsed,
    /// Truth plus Gaussian noise.
    Noisy,
}

impl std::str::FromStr for OracleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(OracleKind::Perfect),
            "collapsed" => Ok(OracleKind::Collapsed),
            "noisy" => Ok(OracleKind::Noisy),
            _ => Err(Error::InvalidArgument(format!("unknown oracle `{s}`"))),
        }
    }
}

/// Oracle predictions for `targets`; `jitter` is the per-gene noise sd for
/// the collapsed and noisy oracles.
pub fn oracle_predict(
    kind: OracleKind,
    truth: &GroundTruth,
    targets: &[Condition],
    jitter: f64,
    seed: u64,
) -> Result<Vec<ConditionAggregate>> {
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(Error::InvalidArgument(
            "jitter must be finite and non-negative".into(),
        ));
    }
    let g = truth.genes.len();
    let mut cov_mean: BTreeMap<&Covariates, (Vec<f64>, usize)> = BTreeMap::new();
    for a in &truth.aggregates {
        if !a.condition.is_control(&truth.control_value) {
            let e = cov_mean
                .entry(&a.condition.covariates)
                .or_insert_with(|| (vec![0.0; g], 0));
            e.0.iter_mut().zip(&a.mean).for_each(|(s, x)| *s += x);
            e.1 += 1;
        }
    }
    let control = |c: &Covariates| {
        truth
            .get(&Condition::control(&truth.control_value, c.clone()))
            .map(|a| &a.mean)
            .ok_or_else(|| Error::MissingControls(c.to_string()))
    };
    let normal = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("finite jitter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets
        .iter()
        .map(|c| {
            let t = truth
                .get(c)
                .ok_or_else(|| Error::UnknownName(format!("condition {c}")))?;
            let mut mean = match kind {
                OracleKind::Perfect | OracleKind::Noisy => t.mean.clone(),
                OracleKind::Collapsed => match cov_mean.get(&c.covariates) {
                    Some((s, n)) => s.iter().map(|x| x / *n as f64).collect(),
                    None => t.mean.clone(),
                },
            };
            if kind != OracleKind::Perfect && jitter > 0.0 {
                mean.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            }
            let logfc = if kind == OracleKind::Perfect {
                t.logfc.clone().expect("truth carries LogFC")
            } else {
                mean.iter()
                    .zip(control(&c.covariates)?)
                    .map(|(a, b)| a - b)
                    .collect()
            };
            Ok(ConditionAggregate {
                condition: c.clone(),
                mean,
                n_cells: t.n_cells,
                logfc: Some(logfc),
            })
        })
        .collect()
}
