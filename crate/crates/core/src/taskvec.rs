//! Task vectors and their diagnostics.
//!
//! A task vector is the per-parameter difference between a fine-tuned expert
//! and the shared base model. This module computes them over the compatible
//! key set, partitions keys into 2-D linear weights vs. everything else
//! (optimization-based merging applies only to the former), and emits the
//! magnitude-histogram / per-layer-norm diagnostics as CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::checkpoint::{validate_compat, Checkpoint, CheckpointError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TaskVecError {
    #[error("no shared keys between base and experts{0}")]
    NoSharedKeys(String),
    #[error("need at least one expert checkpoint")]
    NoExperts,
    #[error("task index {index} out of range for {tasks} tasks")]
    TaskIndexOutOfRange { index: usize, tasks: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Merge treatment of a parameter key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KeyClass {
    /// 2-D linear-layer weight, eligible for SVD/optimization methods.
    LinearMatrix,
    /// Bias / norm / embedding / 1-D parameter; merged by task arithmetic.
    Other,
}

impl KeyClass {
    pub fn parse(s: &str) -> Option<KeyClass> {
        match s {
            "LinearMatrix" | "linear" => Some(KeyClass::LinearMatrix),
            "Other" | "other" => Some(KeyClass::Other),
            _ => None,
        }
    }
}

/// User override: first matching glob wins, ahead of the default rule.
#[derive(Debug, Clone)]
pub struct PartitionOverride {
    pub pattern: String,
    pub class: KeyClass,
}

impl PartitionOverride {
    /// Parse `"<glob>=<LinearMatrix|Other>"`.
    pub fn parse(spec: &str) -> Result<PartitionOverride, TaskVecError> {
        let (pattern, label) = spec
            .rsplit_once('=')
            .ok_or_else(|| TaskVecError::Config(format!("override {spec:?} has no '='")))?;
        if pattern.is_empty() {
            return Err(TaskVecError::Config(format!("override {spec:?} has an empty pattern")));
        }
        let class = KeyClass::parse(label).ok_or_else(|| {
            TaskVecError::Config(format!(
                "override {spec:?} has unknown label {label:?} (want LinearMatrix or Other)"
            ))
        })?;
        Ok(PartitionOverride {
            pattern: pattern.to_string(),
            class,
        })
    }
}

/// Glob match supporting `*` (any run) and `?` (any one char).
pub fn glob_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    // Iterative matcher with star backtracking.
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut star_ti) = (usize::MAX, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = pi;
            star_ti = ti;
            pi += 1;
        } else if star != usize::MAX {
            pi = star + 1;
            star_ti += 1;
            ti = star_ti;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}

/// Base checkpoint plus per-task delta maps over the shared key set.
#[derive(Debug, Clone)]
pub struct TaskVectorSet {
    base: Arc<Checkpoint>,
    deltas: Vec<BTreeMap<String, Tensor>>,
    partition: BTreeMap<String, KeyClass>,
}

impl TaskVectorSet {
    pub fn base(&self) -> &Checkpoint {
        &self.base
    }

    pub fn task_count(&self) -> usize {
        self.deltas.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.partition.keys()
    }

    pub fn class_of(&self, key: &str) -> Option<KeyClass> {
        self.partition.get(key).copied()
    }

    pub fn partition(&self) -> &BTreeMap<String, KeyClass> {
        &self.partition
    }

    pub fn delta(&self, task: usize, key: &str) -> Option<&Tensor> {
        self.deltas.get(task).and_then(|m| m.get(key))
    }

    /// All tasks' deltas for one key, in ascending task order.
    pub fn deltas_for(&self, key: &str) -> Vec<&Tensor> {
        self.deltas.iter().filter_map(|m| m.get(key)).collect()
    }

    pub fn task(&self, task: usize) -> Result<&BTreeMap<String, Tensor>, TaskVecError> {
        self.deltas.get(task).ok_or(TaskVecError::TaskIndexOutOfRange {
            index: task,
            tasks: self.deltas.len(),
        })
    }

    /// Replace one task/key delta; used by the DARE pre-transform.
    pub(crate) fn replace_delta(&mut self, task: usize, key: &str, tensor: Tensor) {
        if let Some(map) = self.deltas.get_mut(task) {
            map.insert(key.to_string(), tensor);
        }
    }
}

/// τ_i = θ_i − θ_0 over the shared, shape-consistent key set, with the
/// default key partition.
pub fn compute_task_vectors(
    base: Arc<Checkpoint>,
    experts: &[Checkpoint],
) -> Result<TaskVectorSet, TaskVecError> {
    compute_task_vectors_with(base, experts, &[], &[])
}

/// As [`compute_task_vectors`], with partition overrides and an optional
/// name filter (empty = keep every shared key; otherwise a key must match
/// one of the globs to participate in merging at all).
pub fn compute_task_vectors_with(
    base: Arc<Checkpoint>,
    experts: &[Checkpoint],
    overrides: &[PartitionOverride],
    key_filter: &[String],
) -> Result<TaskVectorSet, TaskVecError> {
    if experts.is_empty() {
        return Err(TaskVecError::NoExperts);
    }
    let mut all: Vec<&Checkpoint> = vec![&base];
    all.extend(experts.iter());
    let report = validate_compat(&all)?;
    let shared: Vec<String> = report
        .shared
        .into_iter()
        .filter(|k| key_filter.is_empty() || key_filter.iter().any(|g| glob_match(g, k)))
        .collect();
    if shared.is_empty() {
        let hint = if key_filter.is_empty() {
            String::new()
        } else {
            format!(" after key filter {key_filter:?}")
        };
        return Err(TaskVecError::NoSharedKeys(hint));
    }

    let partition = classify_keys_subset(&base, shared.iter(), overrides)?;
    let mut deltas = Vec::with_capacity(experts.len());
    for expert in experts {
        let mut map = BTreeMap::new();
        for key in &shared {
            let theta0 = base.get(key).expect("shared key in base");
            let theta = expert.get(key).expect("shared key in expert");
            map.insert(key.clone(), theta.sub(theta0)?);
        }
        deltas.push(map);
    }
    Ok(TaskVectorSet {
        base,
        deltas,
        partition,
    })
}

/// Label every key of a checkpoint. Default rule: 2-D tensors named
/// `*.weight` that are not embedding tables are `LinearMatrix`; overrides
/// win in order.
pub fn classify_keys(
    ckpt: &Checkpoint,
    overrides: &[PartitionOverride],
) -> Result<BTreeMap<String, KeyClass>, TaskVecError> {
    classify_keys_subset(ckpt, ckpt.keys(), overrides)
}

fn classify_keys_subset<'a>(
    ckpt: &Checkpoint,
    keys: impl Iterator<Item = &'a String>,
    overrides: &[PartitionOverride],
) -> Result<BTreeMap<String, KeyClass>, TaskVecError> {
    let mut out = BTreeMap::new();
    for key in keys {
        let class = overrides
            .iter()
            .find(|ov| glob_match(&ov.pattern, key))
            .map(|ov| ov.class)
            .unwrap_or_else(|| {
                let tensor = ckpt.get(key);
                let is_matrix = tensor.map(|t| t.shape().len() == 2).unwrap_or(false);
                if is_matrix && key.ends_with(".weight") && !key.contains("embed") {
                    KeyClass::LinearMatrix
                } else {
                    KeyClass::Other
                }
            });
        out.insert(key.clone(), class);
    }
    Ok(out)
}

/// Histogram of absolute entry magnitudes over log-spaced bins spanning
/// [1e-8, 1e0]. Zeros and values below the span land in the underflow bin;
/// values at or above 1 land in the overflow bin, so counts always sum to
/// the element count.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub underflow: u64,
    pub counts: Vec<u64>,
    pub overflow: u64,
}

const HIST_LO_EXP: f64 = -8.0;
const HIST_HI_EXP: f64 = 0.0;

impl Histogram {
    fn new(bins: usize) -> Histogram {
        let span = HIST_HI_EXP - HIST_LO_EXP;
        let edges = (0..=bins)
            .map(|k| 10f64.powf(HIST_LO_EXP + span * k as f64 / bins as f64))
            .collect();
        Histogram {
            edges,
            underflow: 0,
            counts: vec![0; bins],
            overflow: 0,
        }
    }

    fn record(&mut self, value: f64) {
        let bins = self.counts.len();
        let mag = value.abs();
        if mag < self.edges[0] {
            self.underflow += 1;
        } else if mag >= self.edges[bins] {
            self.overflow += 1;
        } else {
            let span = HIST_HI_EXP - HIST_LO_EXP;
            let mut idx = ((mag.log10() - HIST_LO_EXP) / span * bins as f64).floor() as usize;
            idx = idx.min(bins - 1);
            // log10 rounding can land one bin off near an edge.
            if mag < self.edges[idx] {
                idx -= 1;
            } else if mag >= self.edges[idx + 1] {
                idx += 1;
            }
            self.counts[idx] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.counts.iter().sum::<u64>() + self.overflow
    }
}

/// Fig.-2-style statistics for one task: per-key and aggregate magnitude
/// histograms plus per-key normalized Frobenius norms.
#[derive(Debug, Clone)]
pub struct TaskVectorStats {
    pub task: usize,
    pub per_key: BTreeMap<String, Histogram>,
    pub aggregate: Histogram,
    pub normalized_fro: Vec<(String, f64)>,
}

/// Magnitude histograms for one task's deltas, `bins >= 2`.
pub fn magnitude_histogram(
    tv: &TaskVectorSet,
    task: usize,
    bins: usize,
) -> Result<(BTreeMap<String, Histogram>, Histogram), TaskVecError> {
    if bins < 2 {
        return Err(TaskVecError::Config(format!("need at least 2 bins, got {bins}")));
    }
    let deltas = tv.task(task)?;
    let mut per_key = BTreeMap::new();
    let mut aggregate = Histogram::new(bins);
    for (key, tensor) in deltas {
        let mut h = Histogram::new(bins);
        for &v in tensor.data() {
            h.record(v);
            aggregate.record(v);
        }
        per_key.insert(key.clone(), h);
    }
    Ok((per_key, aggregate))
}

/// Per-key ‖τ‖_F divided by the element count, in canonical key order.
pub fn normalized_fro_by_layer(
    tv: &TaskVectorSet,
    task: usize,
) -> Result<Vec<(String, f64)>, TaskVecError> {
    let deltas = tv.task(task)?;
    Ok(deltas
        .iter()
        .map(|(key, tensor)| {
            let count = tensor.element_count().max(1) as f64;
            (key.clone(), tensor.frobenius_norm() / count)
        })
        .collect())
}

/// Full diagnostics bundle for one task.
pub fn task_vector_stats(
    tv: &TaskVectorSet,
    task: usize,
    bins: usize,
) -> Result<TaskVectorStats, TaskVecError> {
    let (per_key, aggregate) = magnitude_histogram(tv, task, bins)?;
    let normalized_fro = normalized_fro_by_layer(tv, task)?;
    Ok(TaskVectorStats {
        task,
        per_key,
        aggregate,
        normalized_fro,
    })
}

/// CSV rows `(bin_low, bin_high, count)`, underflow first, overflow last.
pub fn write_histogram_csv(h: &Histogram, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "bin_low,bin_high,count")?;
    writeln!(f, "0,{},{}", h.edges[0], h.underflow)?;
    for (i, count) in h.counts.iter().enumerate() {
        writeln!(f, "{},{},{}", h.edges[i], h.edges[i + 1], count)?;
    }
    writeln!(f, "{},inf,{}", h.edges[h.counts.len()], h.overflow)?;
    Ok(())
}

/// CSV rows `(key, normalized_fro)` in canonical key order.
pub fn write_layer_norms_csv(
    series: &[(String, f64)],
    path: impl AsRef<Path>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "key,normalized_fro")?;
    for (key, value) in series {
        writeln!(f, "{},{}", csv_field(key), value)?;
    }
    Ok(())
}

/// Quote a CSV field only when it needs it.
///
/// Shared by every report writer in and above this crate.
pub fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
