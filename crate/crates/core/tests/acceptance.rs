//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test -p pertbench-core --test acceptance --release`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pertbench::evaluator::{diagnose_collapse, evaluate, format_mean_std, MetricConfig};
use pertbench::metrics::{rank_metric, transposed_rank_metric, FitMetric, RankScope};
use pertbench::model::hpo::{
    hpo_search, stability_reruns, stability_seeds, SearchSpace, TrialStatus,
};
use pertbench::model::{predict_split, table_for, Architecture, Batch, MlpSpec, ModelConfig};
use pertbench::preprocess::{aggregate_means, compute_logfc, log_normalize};
use pertbench::splitter::{
    compute_imbalance, generate_split, SplitAssignment, SplitKind, SplitLabel, SplitSpec,
};
use pertbench::synthgen::{generate, oracle_predict, GroundTruth, OracleKind, SynthSpec};
use pertbench::{
    AggregateTable, Condition, ConditionAggregate, Covariates, CsrMatrix, OneHotVocab,
    PerturbationDataset, TrainState,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Independent reference implementations
// ---------------------------------------------------------------------------

fn ref_rmse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s / a.len() as f64).sqrt()
}

fn ref_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// rank_i = #{j != i : d(pred_j, obs_i) <= d(pred_i, obs_i)} / (p - 1), and
/// the transposed variant with the roles of predictions and observations swapped.
fn brute_ranks(
    preds: &[Vec<f64>],
    obs: &[Vec<f64>],
    d: fn(&[f64], &[f64]) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let p = preds.len();
    let mut rank = vec![0.0; p];
    let mut trans = vec![0.0; p];
    for i in 0..p {
        let own = d(&preds[i], &obs[i]);
        let mut hits = 0usize;
        let mut thits = 0usize;
        for j in 0..p {
            if j == i {
                continue;
            }
            if d(&preds[j], &obs[i]) <= own {
                hits += 1;
            }
            if d(&preds[i], &obs[j]) <= own {
                thits += 1;
            }
        }
        rank[i] = hits as f64 / (p - 1) as f64;
        trans[i] = thits as f64 / (p - 1) as f64;
    }
    (rank, trans)
}

fn aggs_from(vectors: &[Vec<f64>]) -> Vec<ConditionAggregate> {
    vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ConditionAggregate {
            condition: Condition::new([format!("p{i:02}")], Covariates::default()),
            mean: v.clone(),
            n_cells: 1,
            logfc: Some(v.clone()),
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky factorization.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

fn dense_row(d: &PerturbationDataset, r: usize) -> Vec<f64> {
    let mut v = vec![0.0; d.n_genes()];
    let (cols, vals) = d.counts().row(r);
    for (&c, &x) in cols.iter().zip(vals) {
        v[c] = x;
    }
    v
}

fn lognorm_synth(spec: &SynthSpec) -> Result<(PerturbationDataset, GroundTruth), String> {
    let (d, truth) = generate(spec).map_err(err)?;
    Ok((log_normalize(&d).map_err(err)?, truth))
}

fn summary(report: &pertbench::MetricReport, name: &str) -> Result<f64, String> {
    report
        .summary_value(name)
        .ok_or_else(|| format!("report lacks {name}"))
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn c1_rank_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut instances = 0;
    for t in 0..1000 {
        let p = rng.random_range(2..=8);
        let g = rng.random_range(2..=5);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..p)
                .map(|_| (0..g).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let obs = draw(&mut rng);
        let mut preds = draw(&mut rng);
        // Some instances carry exact ties.
        if t % 10 == 0 {
            for i in 1..p {
                preds[i] = preds[0].clone();
            }
        }
        if t % 10 == 1 {
            preds = obs.clone();
        }
        let pa = aggs_from(&preds);
        let oa = aggs_from(&obs);
        for (metric, dist) in [
            (FitMetric::Rmse, ref_rmse as fn(&[f64], &[f64]) -> f64),
            (FitMetric::Cosine, |a: &[f64], b: &[f64]| {
                1.0 - ref_cosine(a, b)
            }),
        ] {
            let (want_r, want_t) = brute_ranks(&preds, &obs, dist);
            let got_r = rank_metric(&pa, &oa, metric, RankScope::Global).map_err(err)?;
            let got_t = transposed_rank_metric(&pa, &oa, metric, RankScope::Global).map_err(err)?;
            let got_r: Vec<f64> = got_r
                .per_condition
                .into_iter()
                .map(Option::unwrap)
                .collect();
            let got_t: Vec<f64> = got_t
                .per_condition
                .into_iter()
                .map(Option::unwrap)
                .collect();
            ensure(got_r == want_r, || {
                format!("instance {t} ({metric}): rank {got_r:?} vs oracle {want_r:?}")
            })?;
            ensure(got_t == want_t, || {
                format!("instance {t} ({metric}): transposed {got_t:?} vs oracle {want_t:?}")
            })?;
        }
        instances += 1;
    }
    // Worked example: 7 predictions. Case A: X is strictly closest to its
    // observation. Case B: 4 of the 6 foreign predictions are closer to Y's
    // observation than Y's own prediction.
    let far = |k: usize| vec![10.0 * (k as f64 + 1.0), -5.0 * k as f64];
    let mut obs: Vec<Vec<f64>> = (0..7).map(far).collect();
    let mut preds: Vec<Vec<f64>> = (0..7)
        .map(|k| far(k).iter().map(|v| v + 0.5).collect())
        .collect();
    obs[0] = vec![0.0, 0.0];
    preds[0] = vec![0.1, 0.0];
    let case_a = brute_ranks(&preds, &obs, ref_rmse).0[0];
    let got_a = rank_metric(
        &aggs_from(&preds),
        &aggs_from(&obs),
        FitMetric::Rmse,
        RankScope::Global,
    )
    .map_err(err)?
    .per_condition[0]
        .unwrap();
    preds[0] = vec![3.0, 0.0];
    for (k, p) in preds.iter_mut().enumerate().skip(1).take(4) {
        *p = vec![0.5 * k as f64 / 4.0, 0.2];
    }
    let got_b = rank_metric(
        &aggs_from(&preds),
        &aggs_from(&obs),
        FitMetric::Rmse,
        RankScope::Global,
    )
    .map_err(err)?
    .per_condition[0]
        .unwrap();
    ensure(case_a == 0.0 && got_a == 0.0, || {
        format!("case A rank {got_a}, expected 0")
    })?;
    ensure(got_b == 4.0 / 6.0, || {
        format!("case B rank {got_b}, expected 4/6")
    })?;
    Ok(format!(
        "{instances} random instances identical to brute force; case A = 0, case B = 4/6"
    ))
}

fn c2_random_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (p, g, draws) = (10, 20, 1000);
    let mut averages = Vec::with_capacity(draws);
    for _ in 0..draws {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..p)
                .map(|_| (0..g).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect()
        };
        let obs = aggs_from(&draw(&mut rng));
        let preds = aggs_from(&draw(&mut rng));
        averages.push(
            rank_metric(&preds, &obs, FitMetric::Rmse, RankScope::Global)
                .map_err(err)?
                .average,
        );
    }
    let m = mean(&averages);
    ensure((m - 0.5).abs() <= 0.03, || {
        format!("mean rank {m:.4} outside 0.5 +- 0.03")
    })?;
    Ok(format!("mean rank over {draws} draws = {m:.4}"))
}

fn c3_imbalance() -> Outcome {
    let rows: [([usize; 3], f64); 3] = [
        ([188, 50, 117], 0.9),
        ([188, 81, 30], 0.8),
        ([188, 33, 33], 0.7),
    ];
    let mut detail = Vec::new();
    for (counts, want) in rows {
        let balance = 1.0 - compute_imbalance(&counts).map_err(err)?;
        ensure((balance - want).abs() <= 0.02, || {
            format!("{counts:?}: balance {balance:.4}, expected {want}")
        })?;
        detail.push(format!("{balance:.3}"));
    }
    let uniform = compute_imbalance(&[40, 40, 40, 40]).map_err(err)?;
    ensure(uniform == 0.0, || format!("uniform imbalance {uniform}"))?;
    Ok(format!(
        "balances {}; uniform imbalance exactly 0",
        detail.join(", ")
    ))
}

fn c4_collapse_separation() -> Outcome {
    let spec = SynthSpec {
        n_genes: 200,
        n_perturbations: 20,
        covariates: vec![("cell_type".into(), 3)],
        cells_per_condition: 200,
        effect_sparsity: 10,
        effect_scale: 0.5,
        covariate_scale: 0.01,
        seed: 4,
        ..Default::default()
    };
    let (d, truth) = lognorm_synth(&spec)?;
    let observed =
        compute_logfc(&aggregate_means(&d, 10).map_err(err)?, d.control_value()).map_err(err)?;
    let reference = table_for(&d, observed);
    let targets: Vec<Condition> = reference
        .without_controls()
        .rows
        .iter()
        .map(|a| a.condition.clone())
        .collect();
    let oracle = |kind, jitter| -> Result<AggregateTable, String> {
        Ok(table_for(
            &d,
            oracle_predict(kind, &truth, &targets, jitter, 7).map_err(err)?,
        ))
    };
    let cfg = MetricConfig {
        fit_metrics: vec![FitMetric::Rmse, FitMetric::Cosine],
        rank_metrics: vec![FitMetric::Rmse],
        rank_scope: RankScope::Global,
    };
    let perfect = evaluate(&oracle(OracleKind::Perfect, 0.0)?, &reference, &cfg).map_err(err)?;
    let noisy = evaluate(&oracle(OracleKind::Noisy, 0.05)?, &reference, &cfg).map_err(err)?;
    let collapsed_table = oracle(OracleKind::Collapsed, 0.05)?;
    let collapsed = evaluate(&collapsed_table, &reference, &cfg).map_err(err)?;
    let (rp, rc) = (
        summary(&perfect, "rank_rmse_mean")?,
        summary(&collapsed, "rank_rmse_mean")?,
    );
    let (en, ec) = (
        summary(&noisy, "rmse_mean")?,
        summary(&collapsed, "rmse_mean")?,
    );
    let dp = diagnose_collapse(&oracle(OracleKind::Perfect, 0.0)?, &reference).map_err(err)?;
    let dc = diagnose_collapse(&collapsed_table, &reference).map_err(err)?;
    let detail = format!(
        "rank perfect {rp:.3} vs collapsed {rc:.3}; rmse noisy {en:.4} vs collapsed {ec:.4}; \
         matrix distance perfect {:.2} vs collapsed {:.2} ({})",
        dp.matrix_distance,
        dc.matrix_distance,
        dc.verdict.as_str()
    );
    ensure(rc - rp >= 0.3, || format!("rank gap below 0.3: {detail}"))?;
    ensure(ec <= 2.5 * en, || {
        format!("collapsed rmse above 2.5x noisy: {detail}")
    })?;
    ensure(dc.matrix_distance > dp.matrix_distance, || {
        format!("matrix distance not larger: {detail}")
    })?;
    Ok(detail)
}

fn linear_config(seed: u64) -> ModelConfig {
    ModelConfig {
        architecture: Architecture::Linear,
        weight_decay: 1e-8,
        batch_size: 256,
        max_epochs: 200,
        patience: 10,
        lr: 5e-3,
        seed,
        ..Default::default()
    }
}

fn c5_baseline_learning() -> Outcome {
    let spec = SynthSpec {
        n_genes: 200,
        n_perturbations: 20,
        covariates: vec![("cell_type".into(), 3)],
        cells_per_condition: 100,
        seed: 5,
        ..Default::default()
    };
    let (d, _) = lognorm_synth(&spec)?;
    let split = generate_split(
        &d,
        &SplitSpec {
            kind: SplitKind::CovariateTransfer,
            m: 3,
            f: 0.3,
            min_perturbations_per_level: 10,
            seed: 5,
            ..Default::default()
        },
    )
    .map_err(err)?;
    // Trained to convergence so the weights can be compared with the
    // closed-form optimum; early stopping leaves the noise genes unfit.
    let cfg = ModelConfig {
        max_epochs: 1000,
        patience: 1000,
        ..linear_config(5)
    };
    let state = pertbench::train_model(&d, &split, &cfg).map_err(err)?;
    let (pred, obs) = predict_split(&state, &d, &split, SplitLabel::Test, 5).map_err(err)?;
    let report = evaluate(&pred, &obs, &MetricConfig::default()).map_err(err)?;
    let cos = summary(&report, "cosine_logfc")?;
    let rank = summary(&report, "rank_rmse_mean")?;

    // Closed-form ridge regression on [p; cov; 1] over the training cells.
    // The target is each cell minus the mean of the training controls of its
    // covariate level: the expectation of the matched-control objective.
    let labels = split.labels_for(&d).map_err(err)?;
    let train: Vec<usize> = (0..d.n_cells())
        .filter(|&r| labels[r] == SplitLabel::Train)
        .collect();
    let mut ctrl_sum: BTreeMap<&Covariates, (Vec<f64>, usize)> = BTreeMap::new();
    for &r in train.iter().filter(|&&r| d.is_control(r)) {
        let e = ctrl_sum
            .entry(d.covariates(r))
            .or_insert_with(|| (vec![0.0; d.n_genes()], 0));
        e.0.iter_mut()
            .zip(dense_row(&d, r))
            .for_each(|(s, x)| *s += x);
        e.1 += 1;
    }
    let vocab = OneHotVocab::from_dataset(&d);
    let k = vocab.n_pert() + vocab.n_cov() + 1;
    let g = d.n_genes();
    let mut xtx = vec![vec![0.0; k]; k];
    let mut xty = vec![vec![0.0; g]; k];
    for &r in &train {
        let mut u = vocab.encode(d.condition(r)).map_err(err)?;
        u.push(1.0);
        let (sum, n) = &ctrl_sum[d.covariates(r)];
        let x = dense_row(&d, r);
        for a in 0..k {
            if u[a] == 0.0 {
                continue;
            }
            for b in 0..k {
                xtx[a][b] += u[a] * u[b];
            }
            for j in 0..g {
                xty[a][j] += u[a] * (x[j] - sum[j] / *n as f64);
            }
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += 1e-6 * train.len() as f64;
    }
    let mut beta = vec![vec![0.0; g]; k];
    for j in 0..g {
        let rhs: Vec<f64> = (0..k).map(|a| xty[a][j]).collect();
        for (a, v) in cholesky_solve(&xtx, &rhs).into_iter().enumerate() {
            beta[a][j] = v;
        }
    }
    let w = state
        .params
        .tensors
        .iter()
        .find(|t| t.name == "linear.weight")
        .ok_or("no linear weight tensor")?;
    let mut worst = f64::INFINITY;
    for p in 0..vocab.n_pert() {
        let learned = &state.params.data[w.offset + p * g..w.offset + (p + 1) * g];
        worst = worst.min(ref_cosine(learned, &beta[p]));
    }
    let detail = format!(
        "test cosine-LogFC {cos:.3}, rank {rank:.3}, min column cosine vs ridge {worst:.3} ({} epochs)",
        state.loss_trace.len()
    );
    ensure(cos >= 0.9, || format!("cosine below 0.9: {detail}"))?;
    ensure(rank <= 0.1, || format!("rank above 0.1: {detail}"))?;
    ensure(worst >= 0.95, || {
        format!("effect columns disagree with ridge: {detail}")
    })?;
    Ok(detail)
}

fn c6_nonlinearity() -> Outcome {
    let spec = SynthSpec {
        n_genes: 200,
        n_perturbations: 20,
        covariates: vec![("cell_type".into(), 1)],
        cells_per_condition: 50,
        n_combinations: 80,
        effect_scale: 1.0,
        interaction_fraction: 0.5,
        interaction_scale: 1.0,
        // A dense interaction: with the sparsity of a single effect the
        // additive model already leaves less than 0.05 cosine to gain.
        interaction_sparsity: Some(200),
        seed: 6,
        ..Default::default()
    };
    let (d, _) = lognorm_synth(&spec)?;
    let mut gaps = Vec::new();
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let split = generate_split(
            &d,
            &SplitSpec {
                kind: SplitKind::Combo,
                f: 0.4,
                seed,
                ..Default::default()
            },
        )
        .map_err(err)?;
        let score = |cfg: &ModelConfig| -> Result<f64, String> {
            let state = pertbench::train_model(&d, &split, cfg).map_err(err)?;
            let (pred, obs) =
                predict_split(&state, &d, &split, SplitLabel::Test, seed).map_err(err)?;
            let report = evaluate(&pred, &obs, &MetricConfig::default()).map_err(err)?;
            summary(&report, "cosine_logfc")
        };
        let lin = score(&linear_config(seed))?;
        let la = score(&ModelConfig {
            architecture: Architecture::LatentAdditive,
            latent_dim: 64,
            mlp: MlpSpec {
                n_layers: 1,
                width: 256,
                dropout: 0.0,
                ..Default::default()
            },
            lr: 3e-3,
            weight_decay: 1e-8,
            max_epochs: 400,
            patience: 100,
            seed,
            ..Default::default()
        })?;
        gaps.push(la - lin);
        pairs.push(format!("{la:.3}/{lin:.3}"));
    }
    let m = median(&mut gaps.clone());
    let detail = format!(
        "median gap {m:.3}; latent additive / linear per seed: {}",
        pairs.join(", ")
    );
    ensure(m >= 0.05, || format!("gap below 0.05: {detail}"))?;
    Ok(detail)
}

fn c7_gradients() -> Outcome {
    let vocab = OneHotVocab::new(
        vec!["p0".into(), "p1".into()],
        vec![("cell_type".into(), vec!["x".into(), "y".into()])],
        "control".into(),
    )
    .map_err(err)?;
    let genes: Vec<String> = (0..5).map(|i| format!("g{i}")).collect();
    let batch = Batch {
        ctrl: Array2::from_shape_fn((4, 5), |(i, j)| ((i * 3 + j * 5) % 7) as f64 / 4.0),
        pert: Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
            .map_err(err)?,
        cov: Array2::from_shape_vec((4, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
            .map_err(err)?,
    };
    let target = Array2::from_shape_fn((4, 5), |(i, j)| (i as f64 * 0.3 - j as f64 * 0.2).sin());
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for arch in Architecture::ALL {
        let cfg = ModelConfig {
            architecture: arch,
            latent_dim: 3,
            mlp: MlpSpec {
                n_layers: 2,
                width: 4,
                dropout: 0.0,
                softplus_output: arch == Architecture::DecoderOnly,
                ..Default::default()
            },
            seed: 17,
            ..Default::default()
        };
        let mut state = TrainState::init(cfg, vocab.clone(), genes.clone()).map_err(err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in state.params.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (_, grad) = state.loss_gradient(&batch, &target).map_err(err)?;
        let h = 1e-6;
        for i in 0..grad.len() {
            let orig = state.params.data[i];
            state.params.data[i] = orig + h;
            let up = state.loss(&batch, &target).map_err(err)?;
            state.params.data[i] = orig - h;
            let down = state.loss(&batch, &target).map_err(err)?;
            state.params.data[i] = orig;
            let num = (up - down) / (2.0 * h);
            let diff = (num - grad[i]).abs();
            let scale = num.abs().max(grad[i].abs());
            ensure(diff <= 1e-4 * scale + 1e-8, || {
                format!(
                    "{arch} parameter {i}: analytic {} vs numeric {num}",
                    grad[i]
                )
            })?;
            if scale > 1e-6 {
                worst = worst.max(diff / scale);
            }
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} parameters over 3 architectures; worst relative error {worst:.2e}"
    ))
}

fn check_split(
    d: &PerturbationDataset,
    a: &SplitAssignment,
    kind: SplitKind,
) -> Result<(), String> {
    ensure(a.len() == d.n_cells(), || {
        format!("{} labels for {} cells", a.len(), d.n_cells())
    })?;
    let ids: BTreeSet<&str> = a.iter().map(|(c, _)| c).collect();
    ensure(ids.len() == d.n_cells(), || {
        "duplicate cell ids in assignment".into()
    })?;
    let labels = a.labels_for(d).map_err(err)?;
    let cv = d.control_value();
    let mut train: BTreeSet<&Condition> = BTreeSet::new();
    let mut held: BTreeSet<&Condition> = BTreeSet::new();
    for r in 0..d.n_cells() {
        if labels[r] == SplitLabel::Train {
            train.insert(d.condition(r));
        } else {
            held.insert(d.condition(r));
        }
    }
    ensure(held.iter().all(|c| !c.is_control(cv)), || {
        "control cells held out".into()
    })?;
    match kind {
        SplitKind::CovariateTransfer => {
            for c in &held {
                let covered = train
                    .iter()
                    .any(|t| t.perturbations == c.perturbations && t.covariates != c.covariates);
                ensure(covered, || {
                    format!("{c} not seen in training under another level")
                })?;
            }
        }
        _ => {
            for r in 0..d.n_cells() {
                let c = d.condition(r);
                if !c.is_control(cv) && !c.is_combination() {
                    ensure(labels[r] == SplitLabel::Train, || {
                        format!("singleton {c} not in train")
                    })?;
                }
            }
            for c in held.iter().filter(|c| c.is_combination()) {
                for p in &c.perturbations {
                    let single = Condition::new([p.as_str()], c.covariates.clone());
                    ensure(train.contains(&single), || {
                        format!("{single} of held-out {c} not in train")
                    })?;
                }
            }
        }
    }
    Ok(())
}

fn csv_bytes(a: &SplitAssignment) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("split.csv");
    a.write_csv(&path).map_err(err)?;
    std::fs::read(&path).map_err(err)
}

fn c8_split_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut done: BTreeMap<&str, usize> = BTreeMap::new();
    let mut rejected = 0;
    for kind in [SplitKind::CovariateTransfer, SplitKind::Combo] {
        let name = kind.as_str();
        let mut attempts = 0;
        while done.get(name).copied().unwrap_or(0) < 100 {
            attempts += 1;
            ensure(attempts <= 400, || {
                format!("{name}: too many unsatisfiable draws")
            })?;
            let levels = rng.random_range(1..=4);
            let n_pert = rng.random_range(4..=12);
            let synth = SynthSpec {
                n_genes: 8,
                n_perturbations: n_pert,
                covariates: vec![(
                    "cell_type".into(),
                    if kind == SplitKind::Combo {
                        levels
                    } else {
                        levels.max(2)
                    },
                )],
                cells_per_condition: 3,
                n_combinations: if kind == SplitKind::Combo {
                    rng.random_range(2..=n_pert)
                } else {
                    0
                },
                effect_sparsity: 2,
                library_log_mean: 4.0,
                seed: rng.random(),
                ..Default::default()
            };
            let (d, _) = generate(&synth).map_err(err)?;
            let spec = SplitSpec {
                kind,
                m: rng.random_range(1..=3),
                f: rng.random_range(0.1..0.8),
                min_perturbations_per_level: rng.random_range(1..=3),
                seed: rng.random(),
                ..Default::default()
            };
            let a = match generate_split(&d, &spec) {
                Ok(a) => a,
                Err(pertbench::Error::Split(_)) => {
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(format!("{name}: unexpected error {e}")),
            };
            check_split(&d, &a, kind).map_err(|e| format!("{name}: {e}"))?;
            let again = generate_split(&d, &spec).map_err(err)?;
            ensure(csv_bytes(&a)? == csv_bytes(&again)?, || {
                format!("{name}: same seed, different split")
            })?;
            *done.entry(name).or_default() += 1;
        }
    }
    Ok(format!(
        "{} covariate-transfer and {} combo splits valid and reproducible ({rejected} unsatisfiable draws rejected)",
        done["covariate_transfer"], done["combo"]
    ))
}

fn c9_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for _ in 0..20 {
        let n = rng.random_range(1..30);
        let g = rng.random_range(1..50);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut r: Vec<f64> = (0..g)
                    .map(|_| {
                        if rng.random_bool(0.6) {
                            0.0
                        } else {
                            rng.random_range(1..500) as f64
                        }
                    })
                    .collect();
                r[0] += 1.0;
                r
            })
            .collect();
        let d = PerturbationDataset::new(
            CsrMatrix::from_dense_rows(&rows, g).map_err(err)?,
            (0..n).map(|i| format!("c{i}")).collect(),
            vec![["control".to_string()].into_iter().collect(); n],
            vec![Covariates::default(); n],
            (0..g).map(|i| format!("g{i}")).collect(),
            Default::default(),
        )
        .map_err(err)?;
        let ln = log_normalize(&d).map_err(err)?;
        for (r, raw) in rows.iter().enumerate() {
            let x = dense_row(&ln, r);
            let total: f64 = x.iter().map(|v| v.exp_m1()).sum();
            worst = worst.max((total - 1e4).abs() / 1e4);
            for (a, b) in raw.iter().zip(&x) {
                ensure((*a == 0.0) == (*b == 0.0), || {
                    format!("zero pattern changed in cell {r}")
                })?;
            }
            cells += 1;
        }
    }
    ensure(worst <= 1e-6, || format!("relative deviation {worst:e}"))?;
    Ok(format!(
        "{cells} cells; worst relative deviation of the total {worst:.2e}; zeros preserved"
    ))
}

fn c10_hpo() -> Outcome {
    let spec = SynthSpec {
        n_genes: 100,
        n_perturbations: 12,
        covariates: vec![("cell_type".into(), 3)],
        cells_per_condition: 40,
        seed: 10,
        ..Default::default()
    };
    let (d, _) = lognorm_synth(&spec)?;
    let split = generate_split(
        &d,
        &SplitSpec {
            kind: SplitKind::CovariateTransfer,
            m: 3,
            f: 0.4,
            min_perturbations_per_level: 5,
            seed: 10,
            ..Default::default()
        },
    )
    .map_err(err)?;
    let base = ModelConfig {
        max_epochs: 30,
        patience: 5,
        ..linear_config(0)
    };
    let space = SearchSpace::default_for(Architecture::Linear);
    let (best, trials) = hpo_search(&d, &split, &base, &space, 20, 10).map_err(err)?;
    ensure(trials.len() == 20, || {
        format!("{} trials recorded", trials.len())
    })?;
    let ok: Vec<_> = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .collect();
    let argmin = ok
        .iter()
        .min_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()))
        .ok_or("no successful trial")?;
    ensure(best.seed == argmin.seed, || {
        "returned config is not the argmin trial".into()
    })?;
    for (k, v) in &argmin.params {
        let want: f64 = v.parse().map_err(err)?;
        let got = if k == "lr" {
            best.lr
        } else {
            best.weight_decay
        };
        ensure(got == want, || {
            format!("{k}: returned {got}, argmin trial {want}")
        })?;
    }

    // Recompute the winning objective from scratch: retrain, predict the val
    // conditions and apply L = RMSE + 0.1 * rank_RMSE with reference formulas.
    let state = pertbench::train_model(&d, &split, &best).map_err(err)?;
    let (pred, obs) = predict_split(&state, &d, &split, SplitLabel::Val, best.seed).map_err(err)?;
    let p: Vec<Vec<f64>> = pred.rows.iter().map(|a| a.mean.clone()).collect();
    let o: Vec<Vec<f64>> = obs.rows.iter().map(|a| a.mean.clone()).collect();
    let rmse = mean(
        &p.iter()
            .zip(&o)
            .map(|(a, b)| ref_rmse(a, b))
            .collect::<Vec<_>>(),
    );
    let rank = mean(&brute_ranks(&p, &o, ref_rmse).0);
    let l = rmse + 0.1 * rank;
    let reported = argmin.objective.unwrap();
    ensure((l - reported).abs() <= 1e-9 * l.abs().max(1.0), || {
        format!("recomputed objective {l} differs from trial objective {reported}")
    })?;

    let stab = stability_reruns(
        &d,
        &split,
        &best,
        &stability_seeds(100, 3),
        &MetricConfig::default(),
    )
    .map_err(err)?;
    ensure(stab.runs.iter().all(Result::is_ok), || {
        "a stability rerun failed".into()
    })?;
    let cos = stab
        .summary
        .iter()
        .find(|e| e.metric == "cosine_logfc")
        .ok_or("no cosine summary")?;
    ensure(cos.std.is_some() && cos.n == 3, || {
        "summary lacks a standard deviation".into()
    })?;
    let worst_trial = ok
        .iter()
        .map(|t| t.objective.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(format!(
        "best L = {reported:.4} (worst {worst_trial:.4}) matches recomputation; cosine-LogFC over 3 seeds {}",
        format_mean_std(cos)
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("rank-metric exactness", c1_rank_exactness),
        ("random-prediction calibration", c2_random_calibration),
        ("imbalance reproduction", c3_imbalance),
        ("collapse separation", c4_collapse_separation),
        ("baseline learning", c5_baseline_learning),
        ("nonlinearity analogue", c6_nonlinearity),
        ("gradient checks", c7_gradients),
        ("split invariant fuzz", c8_split_fuzz),
        ("normalization conservation", c9_normalization),
        ("hpo protocol", c10_hpo),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} [{took}]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{took}]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
