use std::fmt::Write as _;
use std::path::Path;

use pertbench::evaluator::{
    diagnose_collapse, format_mean_std, summary_tsv, SIM_OBS_FILE, SIM_PRED_FILE,
};
use pertbench::model::archive::{load_model, save_model, write_config};
use pertbench::model::hpo::{hpo_search, stability_reruns, stability_seeds, trials_tsv};
use pertbench::model::predict_split;
use pertbench::preprocess::{aggregate_means, compute_logfc, log_normalize, select_genes};
use pertbench::splitter::{generate_split, SplitAssignment};
use pertbench::synthgen::{export_truth, generate};
use pertbench::{
    evaluate, load_dataset, save_dataset, train_model, AggregateTable, Error, PerturbationDataset,
    ValueSpace,
};

use crate::config::RunConfig;
use crate::CliError;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::io(path, e)))
}

fn dataset(cfg: &RunConfig) -> Result<PerturbationDataset, CliError> {
    Ok(load_dataset(cfg.input("dataset")?)?)
}

fn split_for(cfg: &RunConfig, d: &PerturbationDataset) -> Result<SplitAssignment, CliError> {
    match cfg.optional_input("split")? {
        Some(p) => Ok(SplitAssignment::read_csv(p, d)?),
        None => {
            log::warn!("no input.split given; every cell is used for training");
            Ok(SplitAssignment::all_train(d))
        }
    }
}

/// Draws a synthetic dataset and exports its exact ground truth.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (d, truth) = generate(&cfg.synth_spec()?)?;
    save_dataset(&d, out.join("dataset"))?;
    export_truth(&truth, out.join("truth"))?;
    log::info!("simulated {} cells x {} genes", d.n_cells(), d.n_genes());
    Ok(())
}

/// Normalizes, optionally selects genes, and writes observed aggregates.
pub fn preprocess(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut d = dataset(cfg)?;
    if cfg.parse::<bool>("preprocess.normalize")? && d.value_space() == ValueSpace::Counts {
        d = log_normalize(&d)?;
    }
    let (n_hvg, n_de): (usize, usize) = (
        cfg.parse("preprocess.n_hvg")?,
        cfg.parse("preprocess.n_de")?,
    );
    if n_hvg > 0 || n_de > 0 {
        let (selected, genes) =
            select_genes(&d, n_hvg, n_de, cfg.parse("preprocess.include_perturbed")?)?;
        log::info!("kept {} of {} genes", genes.len(), d.n_genes());
        d = selected;
    }
    save_dataset(&d, out.join("dataset"))?;
    let aggs = compute_logfc(
        &aggregate_means(&d, cfg.parse("preprocess.min_cells")?)?,
        d.control_value(),
    )?;
    pertbench::model::table_for(&d, aggs).write(out.join("aggregates"))?;
    Ok(())
}

pub fn split(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = dataset(cfg)?;
    let a = generate_split(&d, &cfg.split_spec()?)?;
    a.write_csv(out.join("split.csv"))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = dataset(cfg)?;
    let split = split_for(cfg, &d)?;
    let state = train_model(&d, &split, &cfg.model_config()?)?;
    save_model(&state, out.join("model"))?;
    Ok(())
}

/// Predicted and observed aggregates for the configured split label.
fn predicted_tables(cfg: &RunConfig) -> Result<(AggregateTable, AggregateTable), CliError> {
    let d = dataset(cfg)?;
    let split = SplitAssignment::read_csv(cfg.input("split")?, &d)?;
    let state = load_model(cfg.input("model")?)?;
    Ok(predict_split(
        &state,
        &d,
        &split,
        cfg.label()?,
        cfg.seed()?,
    )?)
}

/// Prediction and reference tables, read from aggregate directories when
/// `input.predictions` is set and produced from a model otherwise.
fn tables(cfg: &RunConfig) -> Result<(AggregateTable, AggregateTable), CliError> {
    match cfg.optional_input("predictions")? {
        Some(p) => {
            let (delim, control) = (
                cfg.get("aggregates.delimiter"),
                cfg.get("aggregates.control_value"),
            );
            let preds = AggregateTable::read(p, delim, control)?;
            let reference = AggregateTable::read(cfg.input("reference")?, delim, control)?;
            Ok((preds, reference))
        }
        None => predicted_tables(cfg),
    }
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (preds, observed) = predicted_tables(cfg)?;
    preds.write(out.join("predictions"))?;
    observed.write(out.join("observed"))?;
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (preds, reference) = tables(cfg)?;
    let mut report = evaluate(&preds, &reference, &cfg.metric_config()?)?;
    report
        .provenance
        .push(("seed".into(), cfg.get("seed").into()));
    if cfg.optional_input("predictions")?.is_none() {
        report
            .provenance
            .push(("model".into(), cfg.get("input.model").into()));
        report
            .provenance
            .push(("label".into(), cfg.get("eval.label").into()));
    }
    report.write(out)?;
    Ok(())
}

pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (preds, reference) = tables(cfg)?;
    let d = diagnose_collapse(&preds, &reference)?;
    let mut s = String::from("signal\tvalue\n");
    let _ = writeln!(s, "rmse_mean\t{}", d.rmse_mean);
    let _ = writeln!(s, "rank_rmse_mean\t{}", d.rank);
    let _ = writeln!(s, "transposed_rank_rmse_mean\t{}", d.transposed_rank);
    let _ = writeln!(s, "matrix_distance\t{}", d.matrix_distance);
    let _ = writeln!(
        s,
        "relative_matrix_distance\t{}",
        d.relative_matrix_distance
    );
    let _ = writeln!(s, "verdict\t{}", d.verdict.as_str());
    write(&out.join("diagnostics.tsv"), &s)?;
    write(&out.join(SIM_PRED_FILE), &d.sim_pred.to_tsv())?;
    write(&out.join(SIM_OBS_FILE), &d.sim_obs.to_tsv())?;
    Ok(())
}

/// Random search, then optional stability reruns of the winning configuration.
pub fn hpo(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let d = dataset(cfg)?;
    let split = SplitAssignment::read_csv(cfg.input("split")?, &d)?;
    let base = cfg.model_config()?;
    let space = cfg.search_space(base.architecture)?;
    let (best, trials) = hpo_search(
        &d,
        &split,
        &base,
        &space,
        cfg.parse("hpo.n_trials")?,
        cfg.seed()?,
    )?;
    write(&out.join("trials.tsv"), &trials_tsv(&trials))?;
    write_config(&best, &out.join("best_config.tsv"))?;

    let n: usize = cfg.parse("hpo.stability_seeds")?;
    if n > 0 {
        let seeds = stability_seeds(cfg.seed()?, n);
        let report = stability_reruns(&d, &split, &best, &seeds, &cfg.metric_config()?)?;
        write(
            &out.join("stability_summary.tsv"),
            &summary_tsv(&report.summary),
        )?;
        let mut s = String::new();
        for e in &report.summary {
            let _ = writeln!(s, "{}\t{}", e.metric, format_mean_std(e));
        }
        for (seed, r) in report.seeds.iter().zip(&report.runs) {
            if let Err(e) = r {
                let _ = writeln!(s, "# seed {seed} failed: {e}");
            }
        }
        write(&out.join("stability.txt"), &s)?;
    }
    Ok(())
}
