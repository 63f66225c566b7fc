//! End-to-end merge driver: task vectors in, merged checkpoint out.
//!
//! Every method reduces to "build a merged task vector, then apply
//! θ_0 + λ·τ_m". Per-entry methods cover all shared keys; spectral and
//! optimization methods act on 2-D linear weights with task-arithmetic
//! fallback for the rest. Optimization runs layer-by-layer and in parallel
//! across layers; results are keyed, so output is independent of scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::merge::{
    apply_merged, dare_transform, iso_c, task_arithmetic, ties_merge, tsv_merge, MergeError,
    MergeMethod, MergeRecipe, MergedVector,
};
use crate::taskvec::{KeyClass, TaskVectorSet};
use crate::tensor::{RankPolicy, Tensor};
use crate::wudi::{optimize_layer, OptimReport, WudiVariant};

type KeyedOutcome = (String, Result<(Tensor, Option<OptimReport>), MergeError>);

/// Outcome of building a merged task vector.
#[derive(Debug, Default)]
pub struct MergeRun {
    pub merged_vector: MergedVector,
    /// Per-layer optimization traces (optimization methods only).
    pub reports: BTreeMap<String, OptimReport>,
    pub warnings: Vec<String>,
}

impl MergeRun {
    /// Summed first-iteration loss across optimized layers.
    pub fn initial_loss(&self) -> f64 {
        self.reports
            .values()
            .filter_map(|r| r.loss_history.first())
            .sum()
    }

    pub fn final_loss(&self) -> f64 {
        self.reports.values().map(|r| r.final_loss).sum()
    }
}

/// Build τ_m for the recipe's method. The DARE pre-transform, when
/// configured, rewrites the task vectors first.
pub fn merge_task_vectors(
    tv: &TaskVectorSet,
    recipe: &MergeRecipe,
) -> Result<MergeRun, MergeError> {
    let dared;
    let tv = match recipe.dare {
        Some(cfg) => {
            dared = dare_transform(tv, cfg)?;
            &dared
        }
        None => tv,
    };

    match recipe.method {
        MergeMethod::WeightAverage => {
            // Mean of experts as a task vector: (1/n)·Στ_i at λ = 1.
            let n = tv.task_count() as f64;
            let mut tm = task_arithmetic(tv)?;
            for tensor in tm.by_key.values_mut() {
                *tensor = tensor.scale(1.0 / n);
            }
            Ok(MergeRun {
                merged_vector: tm,
                ..MergeRun::default()
            })
        }
        MergeMethod::TaskArithmetic => Ok(MergeRun {
            merged_vector: task_arithmetic(tv)?,
            ..MergeRun::default()
        }),
        MergeMethod::Ties => Ok(MergeRun {
            merged_vector: ties_merge(tv, recipe.ties_density)?,
            ..MergeRun::default()
        }),
        MergeMethod::TsvMerge => {
            let (tm, warnings) = tsv_merge(tv)?;
            Ok(MergeRun {
                merged_vector: tm,
                warnings: warnings
                    .into_iter()
                    .map(|w| format!("{}: {}", w.key, w.message))
                    .collect(),
                ..MergeRun::default()
            })
        }
        MergeMethod::IsoC => Ok(MergeRun {
            merged_vector: iso_c(tv)?,
            ..MergeRun::default()
        }),
        MergeMethod::Wudi => {
            // The baseline interference loss is the uncentered loss at full
            // rank (right-multiplying by the orthonormal row factor of τᵀ
            // preserves Frobenius norms), so it shares the optimizer path.
            let full_rank = MergeRecipe {
                rank_policy: RankPolicy::Fixed(usize::MAX),
                ..recipe.clone()
            };
            optimize_linear_keys(tv, WudiVariant::Lora, &full_rank)
        }
        MergeMethod::WudiV2Full => optimize_linear_keys(tv, WudiVariant::FullFt, recipe),
        MergeMethod::WudiV2Lora => optimize_linear_keys(tv, WudiVariant::Lora, recipe),
    }
}

fn optimize_linear_keys(
    tv: &TaskVectorSet,
    variant: WudiVariant,
    recipe: &MergeRecipe,
) -> Result<MergeRun, MergeError> {
    let keys: Vec<String> = tv.keys().cloned().collect();
    let results: Vec<KeyedOutcome> = keys
        .par_iter()
        .map(|key| {
            let outcome = merge_one_key(tv, key, variant, recipe);
            (key.clone(), outcome)
        })
        .collect();

    let mut run = MergeRun::default();
    for (key, outcome) in results {
        let (tensor, report) = outcome?;
        if let Some(report) = report {
            for warning in &report.warnings {
                run.warnings.push(format!("{key}: {warning}"));
            }
            run.reports.insert(key.clone(), report);
        }
        run.merged_vector.by_key.insert(key, tensor);
    }
    Ok(run)
}

fn merge_one_key(
    tv: &TaskVectorSet,
    key: &str,
    variant: WudiVariant,
    recipe: &MergeRecipe,
) -> Result<(Tensor, Option<OptimReport>), MergeError> {
    let taus: Vec<Tensor> = tv.deltas_for(key).into_iter().cloned().collect();
    if tv.class_of(key) == Some(KeyClass::LinearMatrix) {
        let (tm, report) = optimize_layer(&taus, variant, recipe)
            .map_err(|e| MergeError::Config(format!("optimizing {key:?}: {e}")))?;
        Ok((tm, Some(report)))
    } else {
        // Non-linear parameters fall back to task arithmetic.
        let mut acc = taus[0].clone();
        for t in &taus[1..] {
            acc = acc.add(t)?;
        }
        Ok((acc, None))
    }
}

/// Apply λ. Weight averaging ignores the coefficient by construction.
pub fn effective_lambda(method: MergeMethod, lambda: f64) -> f64 {
    match method {
        MergeMethod::WeightAverage => 1.0,
        _ => lambda,
    }
}

/// Convenience wrapper: merge a task-vector set and apply the result to the
/// base in one call.
pub fn merge_to_checkpoint(
    tv: &TaskVectorSet,
    recipe: &MergeRecipe,
) -> Result<(Checkpoint, MergeRun), MergeError> {
    let run = merge_task_vectors(tv, recipe)?;
    let lambda = effective_lambda(recipe.method, recipe.lambda);
    let merged = apply_merged(tv.base(), &run.merged_vector, lambda)?;
    Ok((merged, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::{DareConfig, InitKind, OptimizerKind};
    use crate::taskvec::compute_task_vectors;
    use crate::tensor::{DType, SeededRng};
    use std::sync::Arc;

    fn fixture(n_tasks: usize, seed: u64) -> (Arc<Checkpoint>, Vec<Checkpoint>) {
        let mut rng = SeededRng::new(seed);
        let mut base = Checkpoint::new();
        let base_lin: Vec<f64> = (0..48).map(|_| rng.next_normal() as f32 as f64).collect();
        base.insert("blk.0.lin.weight", Tensor::matrix(6, 8, base_lin).unwrap())
            .unwrap();
        base.insert(
            "blk.0.norm.weight",
            Tensor::new(vec![8], DType::F32, vec![1.0; 8]).unwrap(),
        )
        .unwrap();
        let experts = (0..n_tasks)
            .map(|_| {
                let mut e = base.clone();
                let lin: Vec<f64> = base
                    .get("blk.0.lin.weight")
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| (v + 0.1 * rng.next_normal()) as f32 as f64)
                    .collect();
                e.insert("blk.0.lin.weight", Tensor::matrix(6, 8, lin).unwrap())
                    .unwrap();
                let norm: Vec<f64> = (0..8).map(|_| 1.0 + 0.01 * rng.next_normal()).collect();
                e.insert("blk.0.norm.weight", Tensor::new(vec![8], DType::F32, norm).unwrap())
                    .unwrap();
                e
            })
            .collect();
        (Arc::new(base), experts)
    }

    #[test]
    fn optimization_reduces_loss_on_linear_keys() {
        let (base, experts) = fixture(3, 71);
        let tv = compute_task_vectors(base, &experts).unwrap();
        let recipe = MergeRecipe {
            method: MergeMethod::WudiV2Full,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            iterations: 100,
            ..MergeRecipe::default()
        };
        let run = merge_task_vectors(&tv, &recipe).unwrap();
        assert_eq!(run.reports.len(), 1); // only the linear key is optimized
        let report = &run.reports["blk.0.lin.weight"];
        assert!(report.final_loss <= report.loss_history[0]);
        // Other keys fell back to task arithmetic.
        assert!(run.merged_vector.by_key.contains_key("blk.0.norm.weight"));
    }

    #[test]
    fn wudi_v1_matches_uncentered_full_rank_v2() {
        let (base, experts) = fixture(2, 72);
        let tv = compute_task_vectors(base, &experts).unwrap();
        let recipe = MergeRecipe {
            method: MergeMethod::Wudi,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            iterations: 50,
            init: InitKind::MeanOfTaskVectors,
            ..MergeRecipe::default()
        };
        let v1 = merge_task_vectors(&tv, &recipe).unwrap();
        let v2 = merge_task_vectors(
            &tv,
            &MergeRecipe {
                method: MergeMethod::WudiV2Lora,
                rank_policy: RankPolicy::Fixed(usize::MAX),
                ..recipe.clone()
            },
        )
        .unwrap();
        let a = &v1.merged_vector.by_key["blk.0.lin.weight"];
        let b = &v2.merged_vector.by_key["blk.0.lin.weight"];
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn weight_average_route_matches_direct_mean() {
        let (base, experts) = fixture(3, 73);
        let tv = compute_task_vectors(base.clone(), &experts).unwrap();
        let recipe = MergeRecipe {
            method: MergeMethod::WeightAverage,
            lambda: 0.3, // ignored for weight averaging
            ..MergeRecipe::default()
        };
        let (merged, _) = merge_to_checkpoint(&tv, &recipe).unwrap();
        let refs: Vec<&Checkpoint> = experts.iter().collect();
        let direct = crate::merge::weight_average(&refs).unwrap();
        for (key, tensor) in direct.iter() {
            let got = merged.get(key).unwrap();
            let diff = got.sub(tensor).unwrap().frobenius_norm();
            assert!(diff <= 1e-12, "{key}: {diff}");
        }
    }

    #[test]
    fn dare_zero_rate_changes_nothing() {
        let (base, experts) = fixture(2, 74);
        let tv = compute_task_vectors(base, &experts).unwrap();
        let plain = MergeRecipe {
            method: MergeMethod::TaskArithmetic,
            ..MergeRecipe::default()
        };
        let with_dare = MergeRecipe {
            dare: Some(DareConfig {
                drop_rate: 0.0,
                seed: 5,
            }),
            ..plain.clone()
        };
        let a = merge_task_vectors(&tv, &plain).unwrap();
        let b = merge_task_vectors(&tv, &with_dare).unwrap();
        for (key, tensor) in &a.merged_vector.by_key {
            assert_eq!(tensor.data(), b.merged_vector.by_key[key].data(), "{key}");
        }
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let (base, experts) = fixture(4, 75);
        let tv = compute_task_vectors(base, &experts).unwrap();
        let recipe = MergeRecipe {
            method: MergeMethod::WudiV2Lora,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 1e-2,
            iterations: 60,
            dare: Some(DareConfig {
                drop_rate: 0.3,
                seed: 9,
            }),
            ..MergeRecipe::default()
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| merge_task_vectors(&tv, &recipe)).unwrap();
        let b = pool4.install(|| merge_task_vectors(&tv, &recipe)).unwrap();
        for (key, tensor) in &a.merged_vector.by_key {
            assert_eq!(tensor.data(), b.merged_vector.by_key[key].data(), "{key}");
        }
    }
}
