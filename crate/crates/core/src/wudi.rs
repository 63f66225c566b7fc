//! Layer-wise merged-vector optimization under interference losses.
//!
//! The baseline loss measures interference of the merged vector with each
//! task vector through the task vector's own transpose:
//!
//!   L = Σ_i (1/‖τ_i‖_F²) · ‖(τ_m − τ_i) · τ_iᵀ‖_F²
//!
//! The improved variants first denoise each task vector by low-rank
//! truncation (centered by the mean task vector for full fine-tuning,
//! uncentered for LoRA) and replace the input subspace by Σ_k V_kᵀ:
//!
//!   L = Σ_i w_i · ‖(τ_m − A_i) · B_i‖_F²,  A_i = U_kΣ_kV_kᵀ (+ τ̄),
//!                                           B_i = (Σ_kV_kᵀ)ᵀ = V_kΣ_k
//!
//! The loss is quadratic in τ_m, so alongside the gradient-descent path this
//! module carries a closed-form solver used as an independent test oracle,
//! plus per-iteration loss/norm histories for the norm-inflation diagnostic.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::merge::{InitKind, MergeRecipe, OptimizerKind};
use crate::tensor::{mean_of, rank_select, RankPolicy, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum WudiError {
    #[error("need at least one task vector")]
    NoTasks,
    #[error("all task vectors are zero; layer is degenerate")]
    DegenerateLayer,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("diverged at iteration {iteration}: loss {loss:.3e} exceeds 1e3 x initial {initial:.3e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which interference loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WudiVariant {
    /// Full-fine-tuning variant: center by the mean task vector, then
    /// truncate (Eq.-3-style loss).
    FullFt,
    /// LoRA variant: truncate the raw task vector without centering.
    Lora,
}

/// Per-task pieces of the quadratic loss for one layer.
#[derive(Debug, Clone)]
pub struct TaskComponents {
    /// Original task index (zero-norm tasks are excluded).
    pub task_index: usize,
    /// Fit target A_i (m×n): truncated reconstruction, plus τ̄ when centered.
    pub target: Tensor,
    /// Input-subspace basis B_i = V_k·Σ_k (n×k).
    pub input_basis: Tensor,
    /// Cached Gram matrix B_i·B_iᵀ (n×n); equals V_k·Σ_k²·V_kᵀ.
    pub gram: Tensor,
    /// Loss weight w_i = 1/‖τ_i‖_F².
    pub weight: f64,
    /// Chosen truncation rank k_i.
    pub rank: usize,
    /// Largest retained singular value (σ_max(gram) = this squared).
    pub top_singular: f64,
}

/// All per-task components of one layer plus the mean task vector
/// (zero in the LoRA variant).
#[derive(Debug, Clone)]
pub struct LayerComponents {
    pub tasks: Vec<TaskComponents>,
    pub mean: Tensor,
    pub shape: (usize, usize),
    /// Indices of tasks dropped for having zero norm.
    pub excluded: Vec<usize>,
}

/// Baseline interference loss (transpose substitution), f64 accumulation.
/// Zero-norm task vectors contribute nothing.
pub fn wudi_loss(tm: &Tensor, taus: &[Tensor]) -> Result<f64, WudiError> {
    let mut total = 0.0;
    for tau in taus {
        if tm.shape() != tau.shape() {
            return Err(WudiError::ShapeMismatch(
                tm.shape().to_vec(),
                tau.shape().to_vec(),
            ));
        }
        let norm = tau.frobenius_norm();
        if norm == 0.0 {
            continue;
        }
        let resid = tm.sub(tau)?.matmul(&tau.transpose()?)?;
        let f = resid.frobenius_norm();
        total += f * f / (norm * norm);
    }
    Ok(total)
}

/// Build the per-task loss components for one layer.
pub fn build_components(
    taus: &[Tensor],
    variant: WudiVariant,
    policy: RankPolicy,
) -> Result<LayerComponents, WudiError> {
    if taus.is_empty() {
        return Err(WudiError::NoTasks);
    }
    let (m, n) = taus[0].dims2()?;
    for tau in &taus[1..] {
        if tau.shape() != taus[0].shape() {
            return Err(WudiError::ShapeMismatch(
                taus[0].shape().to_vec(),
                tau.shape().to_vec(),
            ));
        }
    }
    // The mean is over all provided tasks; exclusion below only affects the
    // loss terms.
    let mean = match variant {
        WudiVariant::FullFt => mean_of(&taus.iter().collect::<Vec<_>>())?,
        WudiVariant::Lora => Tensor::zeros(vec![m, n], taus[0].dtype()),
    };

    let mut tasks = Vec::with_capacity(taus.len());
    let mut excluded = Vec::new();
    for (i, tau) in taus.iter().enumerate() {
        let norm = tau.frobenius_norm();
        if norm == 0.0 {
            excluded.push(i);
            continue;
        }
        let centered = match variant {
            WudiVariant::FullFt => tau.sub(&mean)?,
            WudiVariant::Lora => tau.clone(),
        };
        let factors = centered.svd()?;
        let k = rank_select(&factors.s, policy)?;
        let kept = factors.truncate(k);
        let low_rank = kept.reconstruct()?;
        let target = match variant {
            WudiVariant::FullFt => low_rank.add(&mean)?,
            WudiVariant::Lora => low_rank,
        };
        // B = V_k · Σ_k: scale each V column by its singular value.
        let mut input_basis = kept.v.clone();
        for (j, &sigma) in kept.s.iter().enumerate() {
            for row in 0..n {
                input_basis.set2(row, j, input_basis.get2(row, j) * sigma);
            }
        }
        let gram = input_basis.matmul(&input_basis.transpose()?)?;
        tasks.push(TaskComponents {
            task_index: i,
            target,
            input_basis,
            gram,
            weight: 1.0 / (norm * norm),
            rank: k,
            top_singular: kept.s.first().copied().unwrap_or(0.0),
        });
    }
    if tasks.is_empty() {
        return Err(WudiError::DegenerateLayer);
    }
    Ok(LayerComponents {
        tasks,
        mean,
        shape: (m, n),
        excluded,
    })
}

/// L = Σ_i w_i·‖(τ_m − A_i)·B_i‖_F². Tasks truncated to rank 0 contribute 0.
pub fn wudi2_loss(tm: &Tensor, comps: &LayerComponents) -> Result<f64, WudiError> {
    let mut total = 0.0;
    for task in &comps.tasks {
        if task.rank == 0 && task.input_basis.element_count() == 0 {
            continue;
        }
        let resid = tm.sub(&task.target)?.matmul(&task.input_basis)?;
        let f = resid.frobenius_norm();
        total += task.weight * f * f;
    }
    Ok(total)
}

/// ∇L = Σ_i 2·w_i·(τ_m − A_i)·(B_i·B_iᵀ).
pub fn analytic_gradient(tm: &Tensor, comps: &LayerComponents) -> Result<Tensor, WudiError> {
    let (m, n) = comps.shape;
    let mut grad = Tensor::zeros(vec![m, n], tm.dtype());
    for task in &comps.tasks {
        if task.rank == 0 {
            continue;
        }
        let term = tm.sub(&task.target)?.matmul(&task.gram)?;
        grad.axpy(2.0 * task.weight, &term)?;
    }
    Ok(grad)
}

/// Largest step size with guaranteed monotone SGD descent: 1/L̂ where
/// L̂ = 2·Σ_i w_i·σ_max(B_iB_iᵀ) bounds the loss curvature. `None` when the
/// loss is flat (every task truncated to rank 0).
pub fn descent_learning_rate(comps: &LayerComponents) -> Option<f64> {
    let l_hat: f64 = comps
        .tasks
        .iter()
        .map(|t| 2.0 * t.weight * t.top_singular * t.top_singular)
        .sum();
    (l_hat > 0.0).then(|| 1.0 / l_hat)
}

/// Direct minimizer of the quadratic loss: solves
/// τ_m · (Σ w_i B_iB_iᵀ) = Σ w_i A_i B_iB_iᵀ, adding a ridge of
/// 1e-8·trace/n when the system matrix is singular. Test oracle for the
/// iterative path; runs entirely in f64.
pub fn closed_form_solution(comps: &LayerComponents) -> Result<Tensor, WudiError> {
    let (m, n) = comps.shape;
    let mut system = Tensor::zeros(vec![n, n], crate::tensor::DType::F64);
    let mut rhs = Tensor::zeros(vec![m, n], crate::tensor::DType::F64);
    for task in &comps.tasks {
        system.axpy(task.weight, &task.gram)?;
        let term = task.target.matmul(&task.gram)?;
        rhs.axpy(task.weight, &term)?;
    }
    let trace: f64 = (0..n).map(|i| system.get2(i, i)).sum();
    if trace <= 0.0 {
        // Flat loss: every point is a minimizer; report the mean.
        return Ok(comps.mean.clone());
    }
    let solved = match cholesky_solve(&system, &rhs) {
        Some(x) => x,
        None => {
            let ridge = 1e-8 * trace / n as f64;
            let mut regularized = system.clone();
            for i in 0..n {
                regularized.set2(i, i, regularized.get2(i, i) + ridge);
            }
            cholesky_solve(&regularized, &rhs).expect("ridge makes the system positive definite")
        }
    };
    Ok(solved)
}

/// Solve X·S = R for X given symmetric positive-definite S (n×n) and R (m×n),
/// via S = LLᵀ and two triangular solves per row. Returns None if S is not
/// positive definite.
fn cholesky_solve(s: &Tensor, r: &Tensor) -> Option<Tensor> {
    let (n, _) = s.dims2().ok()?;
    let (m, _) = r.dims2().ok()?;
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get2(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Row x of X satisfies S·xᵀ = rᵀ (S symmetric).
    let mut out = Tensor::zeros(vec![m, n], crate::tensor::DType::F64);
    let mut y = vec![0.0f64; n];
    for row in 0..m {
        for i in 0..n {
            let mut sum = r.get2(row, i);
            for k in 0..i {
                sum -= l[i * n + k] * y[k];
            }
            y[i] = sum / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in i + 1..n {
                sum -= l[k * n + i] * out.get2(row, k);
            }
            out.set2(row, i, sum / l[i * n + i]);
        }
    }
    Some(out)
}

/// Optimizer state for one layer.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        step: u64,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, param_count: usize) -> OptimizerState {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; param_count],
                v: vec![0.0; param_count],
                step: 0,
            },
        }
    }
}

/// One parameter update in place. Rejects non-finite gradients.
pub fn optimizer_step(
    params: &mut Tensor,
    grad: &Tensor,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), WudiError> {
    if params.shape() != grad.shape() {
        return Err(WudiError::ShapeMismatch(
            params.shape().to_vec(),
            grad.shape().to_vec(),
        ));
    }
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(WudiError::NonFiniteGradient { iteration: 0 });
    }
    match state {
        OptimizerState::Sgd => {
            for (p, &g) in params.data_mut().iter_mut().zip(grad.data()) {
                *p -= lr * g;
            }
        }
        OptimizerState::Adam { m, v, step } => {
            *step += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
            for ((p, &g), (mi, vi)) in params
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(())
}

/// Per-layer optimization trace. Histories hold the state at the start of
/// each iteration; the final point is reported separately.
#[derive(Debug, Clone, Default)]
pub struct OptimReport {
    pub loss_history: Vec<f64>,
    pub norm_history: Vec<f64>,
    pub final_loss: f64,
    pub final_norm: f64,
    pub final_grad_norm: f64,
    /// Final per-task residual norms ‖(τ_m − A_i)·B_i‖_F, retained tasks only.
    pub final_residuals: Vec<f64>,
    /// Chosen truncation rank per retained task.
    pub ranks: Vec<usize>,
    pub iterations_run: usize,
    pub wall_time: std::time::Duration,
    /// Task indices excluded for zero norm, plus degenerate-layer notes.
    pub warnings: Vec<String>,
}

impl OptimReport {
    /// Largest merged-vector norm seen anywhere on the trajectory.
    pub fn peak_norm(&self) -> f64 {
        self.norm_history
            .iter()
            .cloned()
            .fold(self.final_norm, f64::max)
    }
}

/// Run exactly `recipe.iterations` optimizer steps on the analytic gradient.
///
/// Initialization follows the recipe (mean of task vectors by default; zero
/// available). Layers whose task vectors are all zero return a zero merged
/// vector with an explanatory warning instead of failing.
pub fn optimize_layer(
    taus: &[Tensor],
    variant: WudiVariant,
    recipe: &MergeRecipe,
) -> Result<(Tensor, OptimReport), WudiError> {
    let started = Instant::now();
    let comps = match build_components(taus, variant, recipe.rank_policy) {
        Ok(c) => c,
        Err(WudiError::DegenerateLayer) => {
            let (m, n) = taus[0].dims2()?;
            let report = OptimReport {
                warnings: vec!["all task vectors are zero; merged vector set to zero".into()],
                wall_time: started.elapsed(),
                ..OptimReport::default()
            };
            return Ok((Tensor::zeros(vec![m, n], taus[0].dtype()), report));
        }
        Err(e) => return Err(e),
    };

    let mut tm = match recipe.init {
        InitKind::Zero => Tensor::zeros(vec![comps.shape.0, comps.shape.1], taus[0].dtype()),
        InitKind::MeanOfTaskVectors => mean_of(&taus.iter().collect::<Vec<_>>())?,
    };
    let mut state = OptimizerState::new(recipe.optimizer, tm.element_count());

    let mut report = OptimReport {
        ranks: comps.tasks.iter().map(|t| t.rank).collect(),
        warnings: comps
            .excluded
            .iter()
            .map(|i| format!("task {i} excluded: zero-norm task vector"))
            .collect(),
        ..OptimReport::default()
    };

    let mut initial_loss = None;
    for iteration in 0..recipe.iterations {
        let loss = wudi2_loss(&tm, &comps)?;
        let initial = *initial_loss.get_or_insert(loss);
        if initial > 0.0 && loss > 1e3 * initial {
            return Err(WudiError::Diverged {
                iteration,
                loss,
                initial,
            });
        }
        report.loss_history.push(loss);
        report.norm_history.push(tm.frobenius_norm());

        let grad = analytic_gradient(&tm, &comps)?;
        optimizer_step(&mut tm, &grad, &mut state, recipe.learning_rate)
            .map_err(|e| match e {
                WudiError::NonFiniteGradient { .. } => WudiError::NonFiniteGradient { iteration },
                other => other,
            })?;
    }
    report.iterations_run = recipe.iterations;
    report.final_loss = wudi2_loss(&tm, &comps)?;
    report.final_norm = tm.frobenius_norm();
    report.final_grad_norm = analytic_gradient(&tm, &comps)?.frobenius_norm();
    for task in &comps.tasks {
        let resid = tm.sub(&task.target)?.matmul(&task.input_basis)?;
        report.final_residuals.push(resid.frobenius_norm());
    }
    report.wall_time = started.elapsed();
    Ok((tm, report))
}

/// CSV rows `(iteration, loss, fro_norm)` — the norm-history diagnostic.
pub fn write_report_csv(report: &OptimReport, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,loss,fro_norm")?;
    for (i, (loss, norm)) in report
        .loss_history
        .iter()
        .zip(&report.norm_history)
        .enumerate()
    {
        writeln!(f, "{i},{loss},{norm}")?;
    }
    Ok(())
}
