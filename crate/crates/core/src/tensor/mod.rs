//! Dense row-major tensors and the small deterministic linear algebra kernel
//! shared by every other module:
//!
//! - element-type tags matching the checkpoint container (F16/BF16/F32/F64)
//! - matrix products and Frobenius norms with float64 accumulation
//! - thin SVD (one-sided Jacobi) with a deterministic sign convention
//! - rank selection policies (fixed / spectral energy)
//! - seeded, stream-splittable random generation

mod rng;
mod svd;

pub use rng::SeededRng;
pub use svd::SvdFactors;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a 2-D tensor, got shape {0:?}")]
    NotMatrix(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("SVD failed to converge after {0} sweeps")]
    NoConvergence(usize),
}

/// Element type of a tensor as recorded in checkpoints. All in-memory
/// arithmetic runs in f64; the tag controls serialization width only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }

    /// Round a value to the nearest representable in this dtype
    /// (round-to-nearest-even). Useful for building fixtures that survive
    /// serialization bit-exactly.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F16 => f64::from(half::f16::from_f64(v)),
            DType::BF16 => f64::from(half::bf16::from_f64(v)),
            DType::F32 => f64::from(v as f32),
            DType::F64 => v,
        }
    }

    /// Common type for mixed-dtype arithmetic. Half types widen to F32.
    pub fn promote(self, other: DType) -> DType {
        use DType::*;
        match (self, other) {
            (F64, _) | (_, F64) => F64,
            (F32, _) | (_, F32) => F32,
            (a, b) if a == b => a,
            _ => F32, // F16 x BF16
        }
    }
}

/// Dense row-major numeric array. Values are kept finite: constructors and
/// every operation in this module reject NaN/Inf rather than propagate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Tensor, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite { index: i, value: v });
            }
        }
        Ok(Tensor { shape, dtype, data })
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            dtype,
            data: vec![0.0; n],
        }
    }

    /// 2-D constructor used throughout merging code and tests.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor, TensorError> {
        Tensor::new(vec![rows, cols], DType::F32, data)
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n], DType::F32);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn with_dtype(mut self, dtype: DType) -> Tensor {
        self.dtype = dtype;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix, erroring on any other dimensionality.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            _ => Err(TensorError::NotMatrix(self.shape.clone())),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            dtype: self.dtype,
            data: out,
        })
    }

    /// Standard matrix product with f64 accumulation.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = rhs.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps both operands in row-major streaming access.
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            dtype: self.dtype.promote(rhs.dtype),
            data: out,
        })
    }

    /// √(Σ xᵢ²), accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|&x| c * x).collect();
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data,
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype.promote(rhs.dtype),
            data,
        })
    }

    /// In-place `self += c * rhs`, the workhorse of the optimizers.
    pub fn axpy(&mut self, c: f64, rhs: &Tensor) -> Result<(), TensorError> {
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpy",
                left: self.shape.clone(),
                right: rhs.shape.clone(),
            });
        }
        for (d, &s) in self.data.iter_mut().zip(&rhs.data) {
            *d += c * s;
        }
        Ok(())
    }
}

/// Elementwise mean of same-shaped tensors.
pub fn mean_of(tensors: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = tensors
        .first()
        .ok_or_else(|| TensorError::Config("mean of empty tensor list".into()))?;
    let mut acc = (*first).clone();
    for t in &tensors[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / tensors.len() as f64))
}

/// Truncation-rank policy for singular spectra.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum RankPolicy {
    /// Keep min(k, available) components.
    Fixed(usize),
    /// Keep the smallest k whose squared singular values reach the given
    /// fraction of total spectral energy. Must lie in (0, 1].
    Energy(f64),
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Energy(0.95)
    }
}

/// Number of leading singular values to keep under `policy`.
///
/// `s` must be non-increasing and non-negative. An all-zero spectrum selects
/// rank 0 under every policy.
pub fn rank_select(s: &[f64], policy: RankPolicy) -> Result<usize, TensorError> {
    let total: f64 = s.iter().map(|&x| x * x).sum();
    if total == 0.0 {
        return Ok(0);
    }
    match policy {
        RankPolicy::Fixed(k) => Ok(k.min(s.len())),
        RankPolicy::Energy(eps) => {
            if !(eps > 0.0 && eps <= 1.0) {
                return Err(TensorError::Config(format!(
                    "energy threshold must lie in (0, 1], got {eps}"
                )));
            }
            let mut acc = 0.0;
            for (i, &v) in s.iter().enumerate() {
                acc += v * v;
                if acc >= eps * total {
                    return Ok(i + 1);
                }
            }
            Ok(s.len())
        }
    }
}
