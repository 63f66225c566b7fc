//! LoRA adapters and their expansion into dense weight deltas.
//!
//! Adapters arrive as a checkpoint whose tensor names follow
//! `<target>.lora_A.weight` / `<target>.lora_B.weight`, with `alpha` and
//! `rank` recorded in `__metadata__`. Deltas are always materialized dense
//! (ΔW = (alpha / rank) · B · A) before any merging; raw factors are never
//! merged directly.

use std::collections::BTreeMap;

use super::{Checkpoint, CheckpointError};
use crate::tensor::Tensor;

const A_SUFFIX: &str = ".lora_A.weight";
const B_SUFFIX: &str = ".lora_B.weight";

/// Low-rank factor pair for one target layer: `a` is r×n, `b` is m×r.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pairs: BTreeMap<String, LoraPair>,
    pub alpha: f64,
    pub rank: usize,
}

fn lora_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Lora(msg.into())
}

impl LoraAdapter {
    /// Parse an adapter checkpoint, validating factor shapes against the
    /// declared rank.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<LoraAdapter, CheckpointError> {
        let alpha: f64 = ckpt
            .metadata()
            .get("alpha")
            .ok_or_else(|| lora_err("missing \"alpha\" in __metadata__"))?
            .parse()
            .map_err(|e| lora_err(format!("alpha is not a number: {e}")))?;
        let rank: usize = ckpt
            .metadata()
            .get("rank")
            .ok_or_else(|| lora_err("missing \"rank\" in __metadata__"))?
            .parse()
            .map_err(|e| lora_err(format!("rank is not an integer: {e}")))?;
        if alpha <= 0.0 {
            return Err(lora_err(format!("alpha must be positive, got {alpha}")));
        }
        if rank == 0 {
            return Err(lora_err("rank must be positive"));
        }

        let mut a_parts: BTreeMap<String, &Tensor> = BTreeMap::new();
        let mut b_parts: BTreeMap<String, &Tensor> = BTreeMap::new();
        for (name, tensor) in ckpt.iter() {
            if let Some(target) = name.strip_suffix(A_SUFFIX) {
                a_parts.insert(target.to_string(), tensor);
            } else if let Some(target) = name.strip_suffix(B_SUFFIX) {
                b_parts.insert(target.to_string(), tensor);
            } else {
                return Err(lora_err(format!(
                    "tensor {name:?} matches neither {A_SUFFIX:?} nor {B_SUFFIX:?}"
                )));
            }
        }

        let mut pairs = BTreeMap::new();
        for (target, a) in &a_parts {
            let b = b_parts
                .remove(target)
                .ok_or_else(|| lora_err(format!("target {target:?} has lora_A but no lora_B")))?;
            let (ar, an) = a.dims2()?;
            let (bm, br) = b.dims2()?;
            if ar != rank || br != rank {
                return Err(lora_err(format!(
                    "target {target:?}: factor ranks {ar}/{br} disagree with declared rank {rank}"
                )));
            }
            if rank > bm.min(an) {
                return Err(lora_err(format!(
                    "target {target:?}: rank {rank} exceeds min({bm}, {an})"
                )));
            }
            pairs.insert(
                target.clone(),
                LoraPair {
                    a: (*a).clone(),
                    b: b.clone(),
                },
            );
        }
        if let Some(target) = b_parts.keys().next() {
            return Err(lora_err(format!("target {target:?} has lora_B but no lora_A")));
        }
        Ok(LoraAdapter { pairs, alpha, rank })
    }

    pub fn targets(&self) -> impl Iterator<Item = &String> {
        self.pairs.keys()
    }

    pub fn pair(&self, target: &str) -> Option<&LoraPair> {
        self.pairs.get(target)
    }

    /// Materialize a full expert checkpoint: base plus this adapter's dense
    /// deltas on `<target>.weight` keys, all other keys copied verbatim.
    pub fn apply_to_base(&self, base: &Checkpoint) -> Result<Checkpoint, CheckpointError> {
        let mut expert = base.clone();
        for (target, pair) in &self.pairs {
            let weight_key = format!("{target}.weight");
            let base_tensor = base.get(&weight_key).ok_or_else(|| {
                lora_err(format!("base checkpoint has no tensor {weight_key:?} for adapter target"))
            })?;
            let (m, n) = base_tensor.dims2()?;
            let delta = expand_lora((m, n), pair, self.alpha, self.rank)?;
            let merged = base_tensor.add(&delta)?.with_dtype(base_tensor.dtype());
            expert.insert(weight_key, merged)?;
        }
        Ok(expert)
    }
}

/// Dense task-vector contribution of one adapter pair: (alpha / r) · B · A.
pub fn expand_lora(
    base_shape: (usize, usize),
    pair: &LoraPair,
    alpha: f64,
    rank: usize,
) -> Result<Tensor, CheckpointError> {
    let (m, n) = base_shape;
    let (ar, an) = pair.a.dims2()?;
    let (bm, br) = pair.b.dims2()?;
    if ar != rank || br != rank || bm != m || an != n {
        return Err(lora_err(format!(
            "adapter shapes B {:?} x A {:?} with rank {rank} do not expand to base {m}x{n}",
            pair.b.shape(),
            pair.a.shape()
        )));
    }
    Ok(pair.b.matmul(&pair.a)?.scale(alpha / rank as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;

    fn pair_r1() -> LoraPair {
        LoraPair {
            b: Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap(),
            a: Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap(),
        }
    }

    #[test]
    fn hand_product_with_scale_two() {
        let delta = expand_lora((2, 2), &pair_r1(), 2.0, 1).unwrap();
        assert_eq!(delta.data(), &[6.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn zero_adapter_gives_zero_delta() {
        let pair = LoraPair {
            b: Tensor::matrix(3, 2, vec![1.0; 6]).unwrap(),
            a: Tensor::zeros(vec![2, 4], DType::F32),
        };
        let delta = expand_lora((3, 4), &pair, 16.0, 2).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_equal_rank_is_plain_product() {
        let pair = pair_r1();
        let delta = expand_lora((2, 2), &pair, 1.0, 1).unwrap();
        let plain = pair.b.matmul(&pair.a).unwrap();
        assert_eq!(delta.data(), plain.data());
    }

    #[test]
    fn alpha_linearity() {
        let d1 = expand_lora((2, 2), &pair_r1(), 1.5, 1).unwrap();
        let d2 = expand_lora((2, 2), &pair_r1(), 3.0, 1).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let err = expand_lora((3, 2), &pair_r1(), 1.0, 1).unwrap_err();
        assert!(matches!(err, CheckpointError::Lora(_)), "{err}");
    }

    fn adapter_checkpoint() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("layer0.lora_A.weight", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap())
            .unwrap();
        c.insert("layer0.lora_B.weight", Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap())
            .unwrap();
        c.metadata_mut().insert("alpha".into(), "2".into());
        c.metadata_mut().insert("rank".into(), "1".into());
        c
    }

    #[test]
    fn parse_adapter_checkpoint() {
        let adapter = LoraAdapter::from_checkpoint(&adapter_checkpoint()).unwrap();
        assert_eq!(adapter.alpha, 2.0);
        assert_eq!(adapter.rank, 1);
        assert_eq!(adapter.targets().collect::<Vec<_>>(), vec!["layer0"]);
    }

    #[test]
    fn missing_metadata_rejected() {
        let mut c = adapter_checkpoint();
        c.metadata_mut().remove("rank");
        assert!(LoraAdapter::from_checkpoint(&c).is_err());
    }

    #[test]
    fn unpaired_factor_rejected() {
        let mut c = adapter_checkpoint();
        c.insert("layer1.lora_A.weight", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap())
            .unwrap();
        let err = LoraAdapter::from_checkpoint(&c).unwrap_err();
        assert!(err.to_string().contains("layer1"), "{err}");
    }

    #[test]
    fn apply_to_base_adds_delta_on_weight_key() {
        let mut base = Checkpoint::new();
        base.insert("layer0.weight", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap())
            .unwrap();
        base.insert("layer0.bias", Tensor::new(vec![2], DType::F32, vec![0.0; 2]).unwrap())
            .unwrap();
        let adapter = LoraAdapter::from_checkpoint(&adapter_checkpoint()).unwrap();
        let expert = adapter.apply_to_base(&base).unwrap();
        assert_eq!(expert.get("layer0.weight").unwrap().data(), &[7.0, 9.0, 13.0, 17.0]);
        assert_eq!(expert.get("layer0.bias").unwrap().data(), &[0.0, 0.0]);
    }
}
