//! Static merging baselines and recipe plumbing.
//!
//! All methods here produce a merged task vector τ_m over the shared keys;
//! [`apply_merged`] then forms θ_0 + λ·τ_m. Per-entry methods (averaging,
//! task arithmetic, TIES, DARE) treat every key alike; the spectral methods
//! (singular-subspace decorrelation, spectrum flattening) act on 2-D linear
//! weights and fall back to task arithmetic elsewhere. Summation order is
//! fixed (ascending task index) so results do not depend on scheduling.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::checkpoint::{validate_compat, Checkpoint, CheckpointError};
use crate::taskvec::{KeyClass, TaskVecError, TaskVectorSet};
use crate::tensor::{RankPolicy, SeededRng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch for key {key:?}: base {base:?} vs merged {merged:?}")]
    KeyShapeMismatch {
        key: String,
        base: Vec<usize>,
        merged: Vec<usize>,
    },
    #[error("merged vector contains key {0:?} absent from the base checkpoint")]
    UnknownKey(String),
    #[error("scorer failed at lambda {lambda}: {source}")]
    ScorerFailed {
        lambda: f64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    TaskVec(#[from] TaskVecError),
}

/// Merging algorithm selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    WeightAverage,
    TaskArithmetic,
    Ties,
    TsvMerge,
    IsoC,
    Wudi,
    WudiV2Full,
    WudiV2Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Zero,
    MeanOfTaskVectors,
}

/// Drop-and-rescale pre-transform settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DareConfig {
    pub drop_rate: f64,
    pub seed: u64,
}

impl Default for DareConfig {
    fn default() -> Self {
        DareConfig {
            drop_rate: 0.5,
            seed: 0,
        }
    }
}

/// The default λ search grid.
pub const LAMBDA_GRID: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 1.0, 1.5];

/// Algorithm selector plus every merging hyperparameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub dare: Option<DareConfig>,
    pub ties_density: f64,
    pub rank_policy: RankPolicy,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub iterations: usize,
    pub init: InitKind,
    pub seed: u64,
}

impl Default for MergeRecipe {
    fn default() -> Self {
        MergeRecipe {
            method: MergeMethod::TaskArithmetic,
            lambda: 1.0,
            lambda_grid: LAMBDA_GRID.to_vec(),
            dare: None,
            ties_density: 0.2,
            rank_policy: RankPolicy::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            iterations: 300,
            init: InitKind::MeanOfTaskVectors,
            seed: 0,
        }
    }
}

impl MergeRecipe {
    /// Full-fine-tuning preset: Adam at 1e-5 over the centered low-rank loss.
    pub fn preset_internvl_full() -> MergeRecipe {
        MergeRecipe {
            method: MergeMethod::WudiV2Full,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-5,
            ..MergeRecipe::default()
        }
    }

    /// LoRA preset: SGD at 1e-4, uncentered low-rank loss, mean init.
    pub fn preset_qwenvl_lora() -> MergeRecipe {
        MergeRecipe {
            method: MergeMethod::WudiV2Lora,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-4,
            init: InitKind::MeanOfTaskVectors,
            ..MergeRecipe::default()
        }
    }
}

/// A merged task vector: name → tensor over the shared key set.
#[derive(Debug, Clone, Default)]
pub struct MergedVector {
    pub by_key: BTreeMap<String, Tensor>,
}

/// Elementwise mean of ≥ 1 compatible checkpoints over their shared keys.
pub fn weight_average(experts: &[&Checkpoint]) -> Result<Checkpoint, MergeError> {
    match experts {
        [] => Err(MergeError::Config("weight average needs at least one checkpoint".into())),
        [only] => Ok((*only).clone()),
        _ => {
            let report = validate_compat(experts)?;
            let mut out = Checkpoint::new();
            let n = experts.len() as f64;
            for key in &report.shared {
                let mut acc = experts[0].get(key).unwrap().clone();
                for e in &experts[1..] {
                    acc = acc.add(e.get(key).unwrap())?;
                }
                let dtype = experts[0].get(key).unwrap().dtype();
                out.insert(key.clone(), acc.scale(1.0 / n).with_dtype(dtype))?;
            }
            Ok(out)
        }
    }
}

/// τ_m = Σ_i τ_i per key (λ is applied later).
pub fn task_arithmetic(tv: &TaskVectorSet) -> Result<MergedVector, MergeError> {
    let mut by_key = BTreeMap::new();
    for key in tv.keys() {
        by_key.insert(key.clone(), sum_deltas(&tv.deltas_for(key))?);
    }
    Ok(MergedVector { by_key })
}

fn sum_deltas(taus: &[&Tensor]) -> Result<Tensor, MergeError> {
    let mut acc = taus[0].clone();
    for t in &taus[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// Trim → elect sign → disjoint merge.
///
/// Each task keeps its top ⌈density·count⌉ entries by magnitude; per entry
/// the sign of the trimmed sum is elected (exact zero resolves to +), and the
/// output is the mean of trimmed values agreeing with that sign.
pub fn ties_merge(tv: &TaskVectorSet, density: f64) -> Result<MergedVector, MergeError> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(MergeError::Config(format!(
            "ties density must lie in (0, 1], got {density}"
        )));
    }
    let mut by_key = BTreeMap::new();
    for key in tv.keys() {
        let taus = tv.deltas_for(key);
        let count = taus[0].element_count();
        if count == 0 {
            by_key.insert(key.clone(), taus[0].clone());
            continue;
        }
        let keep = ((density * count as f64).ceil() as usize).clamp(1, count);

        let mut trimmed: Vec<Vec<f64>> = Vec::with_capacity(taus.len());
        for tau in &taus {
            let mut order: Vec<usize> = (0..count).collect();
            order.sort_by(|&a, &b| {
                tau.data()[b]
                    .abs()
                    .partial_cmp(&tau.data()[a].abs())
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut kept = vec![0.0; count];
            for &idx in &order[..keep] {
                kept[idx] = tau.data()[idx];
            }
            trimmed.push(kept);
        }

        let mut out = vec![0.0; count];
        for e in 0..count {
            let sum: f64 = trimmed.iter().map(|t| t[e]).sum();
            let elected_positive = sum >= 0.0;
            let mut acc = 0.0;
            let mut matches = 0usize;
            for t in &trimmed {
                let v = t[e];
                if (elected_positive && v > 0.0) || (!elected_positive && v < 0.0) {
                    acc += v;
                    matches += 1;
                }
            }
            out[e] = if matches > 0 { acc / matches as f64 } else { 0.0 };
        }
        let shape = taus[0].shape().to_vec();
        by_key.insert(
            key.clone(),
            Tensor::new(shape, taus[0].dtype(), out).map_err(MergeError::Tensor)?,
        );
    }
    Ok(MergedVector { by_key })
}

/// Drop each entry with probability p and rescale survivors by 1/(1−p).
/// Deterministic given the stream; p = 0 is a bit-exact identity.
pub fn dare(tau: &Tensor, drop_rate: f64, rng: &mut SeededRng) -> Result<Tensor, MergeError> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(MergeError::Config(format!(
            "dare drop rate must lie in [0, 1), got {drop_rate}"
        )));
    }
    if drop_rate == 0.0 {
        return Ok(tau.clone());
    }
    let rescale = 1.0 / (1.0 - drop_rate);
    let data = tau
        .data()
        .iter()
        .map(|&v| {
            if rng.next_uniform() < drop_rate {
                0.0
            } else {
                v * rescale
            }
        })
        .collect();
    Ok(Tensor::new(tau.shape().to_vec(), tau.dtype(), data)?)
}

/// Apply DARE to every task vector, one child stream per (task, key) so the
/// result is independent of iteration order.
pub fn dare_transform(tv: &TaskVectorSet, cfg: DareConfig) -> Result<TaskVectorSet, MergeError> {
    let mut out = tv.clone();
    let keys: Vec<String> = tv.keys().cloned().collect();
    for task in 0..tv.task_count() {
        for key in &keys {
            let tau = tv.delta(task, key).expect("key in every task");
            let mut rng = SeededRng::derive(
                cfg.seed,
                &[b"dare", &(task as u64).to_le_bytes(), key.as_bytes()],
            );
            out.replace_delta(task, key, dare(tau, cfg.drop_rate, &mut rng)?);
        }
    }
    Ok(out)
}

/// Non-fatal findings produced while merging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeWarning {
    pub key: String,
    pub message: String,
}

/// Singular-subspace decorrelation.
///
/// Each task vector is truncated to rank ⌊min(m,n)/n_tasks⌋ (clamped at 1),
/// the truncated bases are stacked, and the stacks are replaced by their
/// nearest orthonormal-column matrices (orthogonal Procrustes via SVD).
/// Reconstruction reuses each task's column block of the decorrelated bases.
pub fn tsv_merge(tv: &TaskVectorSet) -> Result<(MergedVector, Vec<MergeWarning>), MergeError> {
    let mut by_key = BTreeMap::new();
    let mut warnings = Vec::new();
    for key in tv.keys() {
        let taus = tv.deltas_for(key);
        if tv.class_of(key) != Some(KeyClass::LinearMatrix) {
            by_key.insert(key.clone(), sum_deltas(&taus)?);
            continue;
        }
        let (m, n) = taus[0].dims2()?;
        let n_tasks = taus.len();
        let min_dim = m.min(n);
        let target_rank = min_dim / n_tasks;
        let target_rank = if target_rank == 0 {
            warnings.push(MergeWarning {
                key: key.clone(),
                message: format!(
                    "{n_tasks} tasks exceed min(m, n) = {min_dim}; per-task rank clamped to 1"
                ),
            });
            1
        } else {
            target_rank
        };

        // Truncate each task, dropping numerically-zero singular values so
        // null-space padding cannot contaminate the Procrustes step.
        let mut blocks = Vec::with_capacity(n_tasks);
        for tau in &taus {
            let f = tau.svd()?;
            let numerical = f
                .s
                .iter()
                .take_while(|&&s| s > f.s[0] * 1e-12 && s > 0.0)
                .count();
            blocks.push(f.truncate(target_rank.min(numerical)));
        }
        let total: usize = blocks.iter().map(|b| b.s.len()).sum();
        if total == 0 {
            by_key.insert(key.clone(), Tensor::zeros(vec![m, n], taus[0].dtype()));
            continue;
        }

        let u_cat = hstack(blocks.iter().map(|b| &b.u), m)?;
        let v_cat = hstack(blocks.iter().map(|b| &b.v), n)?;
        let u_orth = nearest_orthonormal(&u_cat)?;
        let v_orth = nearest_orthonormal(&v_cat)?;

        let mut merged = Tensor::zeros(vec![m, n], taus[0].dtype());
        let mut col = 0usize;
        for block in &blocks {
            for (j, &sigma) in block.s.iter().enumerate() {
                let c = col + j;
                for i in 0..m {
                    let us = u_orth.get2(i, c) * sigma;
                    if us == 0.0 {
                        continue;
                    }
                    for l in 0..n {
                        let cur = merged.get2(i, l);
                        merged.set2(i, l, cur + us * v_orth.get2(l, c));
                    }
                }
            }
            col += block.s.len();
        }
        by_key.insert(key.clone(), merged);
    }
    Ok((MergedVector { by_key }, warnings))
}

fn hstack<'a>(parts: impl Iterator<Item = &'a Tensor>, rows: usize) -> Result<Tensor, MergeError> {
    let parts: Vec<&Tensor> = parts.collect();
    let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Tensor::zeros(vec![rows, cols], crate::tensor::DType::F32);
    let mut base = 0usize;
    for p in parts {
        let (r, c) = p.dims2()?;
        debug_assert_eq!(r, rows);
        for i in 0..r {
            for j in 0..c {
                out.set2(i, base + j, p.get2(i, j));
            }
        }
        base += c;
    }
    Ok(out)
}

/// Polar factor P·Qᵀ of the thin SVD — the orthogonal Procrustes solution.
fn nearest_orthonormal(m: &Tensor) -> Result<Tensor, MergeError> {
    let f = m.svd()?;
    Ok(f.u.matmul(&f.v.transpose()?)?)
}

/// Spectrum flattening: SVD the summed task vector and replace every
/// singular value by their mean.
pub fn iso_c(tv: &TaskVectorSet) -> Result<MergedVector, MergeError> {
    let mut by_key = BTreeMap::new();
    for key in tv.keys() {
        let taus = tv.deltas_for(key);
        let summed = sum_deltas(&taus)?;
        if tv.class_of(key) != Some(KeyClass::LinearMatrix) {
            by_key.insert(key.clone(), summed);
            continue;
        }
        let f = summed.svd()?;
        let sigma_bar = f.s.iter().sum::<f64>() / f.s.len() as f64;
        let flat = crate::tensor::SvdFactors {
            u: f.u,
            s: vec![sigma_bar; f.s.len()],
            v: f.v,
        };
        by_key.insert(key.clone(), flat.reconstruct()?);
    }
    Ok(MergedVector { by_key })
}

/// θ_m = θ_0 + λ·τ_m per key; keys without a merged delta are copied
/// verbatim and output dtypes follow the base.
pub fn apply_merged(
    base: &Checkpoint,
    tm: &MergedVector,
    lambda: f64,
) -> Result<Checkpoint, MergeError> {
    let mut out = base.clone();
    for (key, tau) in &tm.by_key {
        let theta0 = base
            .get(key)
            .ok_or_else(|| MergeError::UnknownKey(key.clone()))?;
        if theta0.shape() != tau.shape() {
            return Err(MergeError::KeyShapeMismatch {
                key: key.clone(),
                base: theta0.shape().to_vec(),
                merged: tau.shape().to_vec(),
            });
        }
        let mut merged = theta0.clone();
        merged.axpy(lambda, tau)?;
        out.insert(key.clone(), merged.with_dtype(theta0.dtype()))?;
    }
    Ok(out)
}

/// Evaluate every λ in the grid through the injected scorer (higher is
/// better) and return the winner plus the full score table. Ties break
/// toward the smaller λ.
pub fn lambda_sweep<F>(
    base: &Checkpoint,
    tm: &MergedVector,
    grid: &[f64],
    mut scorer: F,
) -> Result<(f64, Vec<(f64, f64)>), MergeError>
where
    F: FnMut(&Checkpoint) -> Result<f64, Box<dyn std::error::Error + Send + Sync>>,
{
    if grid.is_empty() {
        return Err(MergeError::Config("lambda grid is empty".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let candidate = apply_merged(base, tm, lambda)?;
        let score = scorer(&candidate).map_err(|source| MergeError::ScorerFailed { lambda, source })?;
        table.push((lambda, score));
    }
    let mut best = table[0];
    for &(lambda, score) in &table[1..] {
        if score > best.1 || (score == best.1 && lambda < best.0) {
            best = (lambda, score);
        }
    }
    Ok((best.0, table))
}
