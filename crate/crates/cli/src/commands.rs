//! Command implementations: merge, inspect, diff, theory.

use std::io::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use taskfuse_core::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, LoraAdapter};
use taskfuse_core::merge::{apply_merged, lambda_sweep};
use taskfuse_core::pipeline::{effective_lambda, merge_task_vectors, MergeRun};
use taskfuse_core::taskvec::{
    compute_task_vectors_with, csv_field, task_vector_stats, write_histogram_csv,
    write_layer_norms_csv, PartitionOverride, TaskVectorSet,
};
use taskfuse_core::theory::{bound_grid, steps_sweep, write_bound_report_csv, write_sweep_csv};
use taskfuse_core::wudi::write_report_csv;

use crate::config::ResolvedConfig;
use crate::manifest::write_manifest;
use crate::CliError;

fn ensure_dir(path: &PathBuf) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))
}

fn load(path: &PathBuf) -> Result<Checkpoint, CliError> {
    read_checkpoint(path)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))
}

/// Keys the merged vector never received, i.e. copied verbatim from base.
fn skipped_keys(base: &Checkpoint, tv: &TaskVectorSet) -> usize {
    base.keys().filter(|k| tv.class_of(k).is_none()).count()
}

fn build_task_vectors(cfg: &ResolvedConfig) -> Result<(Arc<Checkpoint>, TaskVectorSet), CliError> {
    let base_path = cfg.base_path.as_ref().expect("validated");
    let base = Arc::new(load(base_path)?);
    let mut experts = Vec::new();
    for path in &cfg.expert_paths {
        experts.push(load(path)?);
    }
    for path in &cfg.lora_paths {
        let adapter_ckpt = load(path)?;
        let adapter = LoraAdapter::from_checkpoint(&adapter_ckpt)
            .map_err(|e| CliError::runtime(format!("adapter {}: {e}", path.display())))?;
        experts.push(
            adapter
                .apply_to_base(&base)
                .map_err(|e| CliError::runtime(format!("adapter {}: {e}", path.display())))?,
        );
    }
    let overrides: Vec<PartitionOverride> = cfg
        .partition_overrides
        .iter()
        .map(|s| PartitionOverride::parse(s))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let tv = compute_task_vectors_with(base.clone(), &experts, &overrides, &cfg.key_filter)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    Ok((base, tv))
}

fn sanitize_filename(key: &str) -> String {
    key.chars()
        .map(|c| if c == '/' || c == '\\' || c == ':' { '_' } else { c })
        .collect()
}

pub fn run_merge(cfg: &ResolvedConfig, quiet: bool) -> Result<(), CliError> {
    let started = Instant::now();
    let (base, tv) = build_task_vectors(cfg)?;
    let run: MergeRun =
        merge_task_vectors(&tv, &cfg.recipe).map_err(|e| CliError::runtime(e.to_string()))?;

    // λ: explicit from the recipe, or grid-searched against a target.
    let (lambda, sweep_table) = match &cfg.sweep_target {
        None => (effective_lambda(cfg.recipe.method, cfg.recipe.lambda), None),
        Some(target_path) => {
            let target = load(target_path)?;
            let (best, table) =
                lambda_sweep(&base, &run.merged_vector, &cfg.sweep_grid, |candidate| {
                    let mut dist = 0.0;
                    for (key, tensor) in candidate.iter() {
                        if let Some(want) = target.get(key) {
                            dist += tensor
                                .sub(want)
                                .map_err(|e| Box::new(e) as Box<dyn std::error::Error + Send + Sync>)?
                                .frobenius_norm();
                        }
                    }
                    Ok(-dist)
                })
                .map_err(|e| CliError::runtime(e.to_string()))?;
            (effective_lambda(cfg.recipe.method, best), Some(table))
        }
    };

    let merged = apply_merged(&base, &run.merged_vector, lambda)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let output_path = cfg.output_path.clone().expect("validated");
    write_checkpoint(&merged, &output_path)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", output_path.display())))?;

    let mut outputs = vec![output_path.clone()];
    let report_dir = cfg.report_dir.as_ref().expect("validated");
    ensure_dir(report_dir)?;
    let layer_dir = report_dir.join("layers");
    if !run.reports.is_empty() {
        ensure_dir(&layer_dir)?;
    }
    for (key, report) in &run.reports {
        let path = layer_dir.join(format!("{}.csv", sanitize_filename(key)));
        write_report_csv(report, &path)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        outputs.push(path);
    }
    let summary_path = report_dir.join("merge_summary.csv");
    write_summary_csv(&summary_path, &tv, &run)?;
    outputs.push(summary_path);
    if let Some(table) = &sweep_table {
        let sweep_path = report_dir.join("lambda_sweep.csv");
        let mut f = std::fs::File::create(&sweep_path)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", sweep_path.display())))?;
        writeln!(f, "lambda,score").map_err(|e| CliError::runtime(e.to_string()))?;
        for (l, s) in table {
            writeln!(f, "{l},{s}").map_err(|e| CliError::runtime(e.to_string()))?;
        }
        outputs.push(sweep_path);
    }
    let mut inputs: Vec<PathBuf> = cfg.expert_paths.clone();
    inputs.extend(cfg.lora_paths.clone());
    inputs.insert(0, cfg.base_path.clone().expect("validated"));
    if let Some(t) = &cfg.sweep_target {
        inputs.push(t.clone());
    }
    // The manifest hashes every artifact written so far (it cannot hash itself).
    outputs.push(write_manifest(report_dir, cfg, &inputs, &outputs.clone())?);

    if !quiet {
        let merged_keys = run.merged_vector.by_key.len();
        println!("method            {:?}", cfg.recipe.method);
        println!("lambda            {lambda}");
        println!("keys merged       {merged_keys}");
        println!("keys skipped      {}", skipped_keys(&base, &tv));
        if !run.reports.is_empty() {
            println!(
                "loss reduction    {:.6e} -> {:.6e}",
                run.initial_loss(),
                run.final_loss()
            );
        }
        for warning in &run.warnings {
            println!("warning           {warning}");
        }
        println!("wall time         {:.3}s", started.elapsed().as_secs_f64());
        println!("wrote             {}", output_path.display());
    }
    Ok(())
}

fn write_summary_csv(
    path: &PathBuf,
    tv: &TaskVectorSet,
    run: &MergeRun,
) -> Result<(), CliError> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(f, "key,class,initial_loss,final_loss,ranks")?;
        for key in tv.keys() {
            let class = match tv.class_of(key) {
                Some(taskfuse_core::taskvec::KeyClass::LinearMatrix) => "linear",
                _ => "other",
            };
            match run.reports.get(key) {
                Some(report) => {
                    let ranks = report
                        .ranks
                        .iter()
                        .map(|r| r.to_string())
                        .collect::<Vec<_>>()
                        .join("|");
                    writeln!(
                        f,
                        "{},{},{},{},{}",
                        csv_field(key),
                        class,
                        report.loss_history.first().copied().unwrap_or(0.0),
                        report.final_loss,
                        ranks
                    )?;
                }
                None => writeln!(f, "{},{},,,", csv_field(key), class)?,
            }
        }
        Ok(())
    };
    emit().map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

pub fn run_inspect(cfg: &ResolvedConfig, quiet: bool) -> Result<(), CliError> {
    let (_, tv) = build_task_vectors(cfg)?;
    let report_dir = cfg.report_dir.clone().expect("validated");
    ensure_dir(&report_dir)?;
    let mut outputs = Vec::new();
    for task in 0..tv.task_count() {
        let stats = task_vector_stats(&tv, task, cfg.histogram_bins)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let hist_path = report_dir.join(format!("task{task}_magnitude_histogram.csv"));
        write_histogram_csv(&stats.aggregate, &hist_path)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        let norms_path = report_dir.join(format!("task{task}_layer_norms.csv"));
        write_layer_norms_csv(&stats.normalized_fro, &norms_path)
            .map_err(|e| CliError::runtime(e.to_string()))?;
        outputs.push(hist_path);
        outputs.push(norms_path);
        if !quiet {
            println!(
                "task {task}: {} keys, underflow {} of {} entries",
                stats.normalized_fro.len(),
                stats.aggregate.underflow,
                stats.aggregate.total()
            );
        }
    }
    let mut inputs: Vec<PathBuf> = cfg.expert_paths.clone();
    inputs.extend(cfg.lora_paths.clone());
    inputs.insert(0, cfg.base_path.clone().expect("validated"));
    write_manifest(&report_dir, cfg, &inputs, &outputs)?;
    Ok(())
}

pub fn run_diff(cfg: &ResolvedConfig, quiet: bool) -> Result<(), CliError> {
    let left_path = cfg.base_path.clone().expect("validated");
    let right_path = cfg.expert_paths[0].clone();
    let left = load(&left_path)?;
    let right = load(&right_path)?;

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (key, lt) in left.iter() {
        match right.get(key) {
            None => rows.push((key.clone(), "missing_right".into(), f64::NAN)),
            Some(rt) if rt.shape() != lt.shape() => {
                rows.push((key.clone(), "shape_mismatch".into(), f64::NAN))
            }
            Some(rt) => {
                let max_abs = lt
                    .data()
                    .iter()
                    .zip(rt.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                let status = if max_abs == 0.0 { "equal" } else { "differs" };
                rows.push((key.clone(), status.into(), max_abs));
            }
        }
    }
    for key in right.keys() {
        if !left.contains(key) {
            rows.push((key.clone(), "missing_left".into(), f64::NAN));
        }
    }

    {
        let report_dir = cfg.report_dir.as_ref().expect("validated");
        ensure_dir(report_dir)?;
        let path = report_dir.join("diff.csv");
        let mut f = std::fs::File::create(&path)
            .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
        writeln!(f, "key,status,max_abs_diff").map_err(|e| CliError::runtime(e.to_string()))?;
        for (key, status, diff) in &rows {
            writeln!(f, "{},{},{}", csv_field(key), status, diff)
                .map_err(|e| CliError::runtime(e.to_string()))?;
        }
        write_manifest(report_dir, cfg, &[left_path, right_path], &[path])?;
    }
    if !quiet {
        for (key, status, diff) in &rows {
            if diff.is_nan() {
                println!("{status:>16}  {key}");
            } else {
                println!("{status:>16}  {key}  max|Δ| = {diff:.3e}");
            }
        }
    }
    Ok(())
}

pub fn run_theory(cfg: &ResolvedConfig, quiet: bool) -> Result<(), CliError> {
    let report_dir = cfg.report_dir.clone().expect("validated");
    ensure_dir(&report_dir)?;

    let reports = bound_grid(&cfg.theory_grid).map_err(|e| match e {
        taskfuse_core::theory::TheoryError::UnsoundRadius { .. } => {
            CliError::theory(e.to_string())
        }
        other => CliError::runtime(other.to_string()),
    })?;
    let bound_path = report_dir.join("bound_report.csv");
    write_bound_report_csv(&reports, &bound_path).map_err(|e| CliError::runtime(e.to_string()))?;

    let sweep_rows = steps_sweep(&cfg.theory_sweep).map_err(|e| CliError::runtime(e.to_string()))?;
    let sweep_path = report_dir.join("steps_sweep.csv");
    write_sweep_csv(&sweep_rows, &sweep_path).map_err(|e| CliError::runtime(e.to_string()))?;

    write_manifest(&report_dir, cfg, &[], &[bound_path, sweep_path])?;

    let failed: Vec<usize> = reports
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.all_pass())
        .map(|(i, _)| i)
        .collect();
    if !quiet {
        println!(
            "bound grid        {} cells, {} passed",
            reports.len(),
            reports.len() - failed.len()
        );
        println!("sweep rows        {}", sweep_rows.len());
    }
    if !failed.is_empty() {
        return Err(CliError::theory(format!(
            "bound violated in {} of {} grid cells (indices {failed:?})",
            failed.len(),
            reports.len()
        )));
    }
    Ok(())
}
