//! Synthetic-task simulator for the merging-error bound.
//!
//! Tasks are least-squares problems L_i(θ) = ½‖X_iθ − y_i‖² where every
//! quantity in the bound is measurable: experts come from T full-batch
//! gradient steps at rate η, the per-task Lipschitz constant C_i is
//! estimated over an explicit ball (quadratic losses have no global
//! constant), and G is the empirical max gradient norm along the
//! trajectories. The bound chain under test, with τ_m = Σ_j α_j τ_j and
//! Ψ_j^i = C_i·|α_j| (j ≠ i) or C_i·|1 − α_j| (j = i):
//!
//!   |L_i(θ_0+τ_m) − L_i(θ_0+τ_i)|  ≤  Σ_j Ψ_j^i·‖τ_j‖  ≤  (Σ_j Ψ_j^i)·G·η·T
//!
//! together with the trajectory inequality max_j ‖τ_j‖ ≤ η·T·G.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{SeededRng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("design matrix rank-deficient after {0} regenerations")]
    RankDeficient(usize),
    #[error("fine-tuning diverged at step {step} (|theta| = {norm:.3e})")]
    Diverged { step: usize, norm: f64 },
    #[error(
        "estimation radius {radius} is smaller than the required {required}; the bound would be unsound"
    )]
    UnsoundRadius { radius: f64, required: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One synthetic least-squares task.
#[derive(Debug, Clone)]
pub struct SynthTask {
    /// Design matrix X (s×d), full column rank.
    pub design: Tensor,
    /// Targets y (s).
    pub targets: Vec<f64>,
    /// Ground-truth parameter the targets were generated from.
    pub optimum: Vec<f64>,
}

impl SynthTask {
    pub fn dim(&self) -> usize {
        self.design.shape()[1]
    }

    /// L(θ) = ½‖Xθ − y‖².
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let r = self.residual(theta);
        0.5 * dot(&r, &r)
    }

    /// ∇L(θ) = Xᵀ(Xθ − y).
    #[allow(clippy::needless_range_loop)]
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let r = self.residual(theta);
        let (s, d) = self.design.dims2().expect("design is 2-D");
        let mut g = vec![0.0; d];
        for row in 0..s {
            let rv = r[row];
            if rv == 0.0 {
                continue;
            }
            for col in 0..d {
                g[col] += self.design.get2(row, col) * rv;
            }
        }
        g
    }

    #[allow(clippy::needless_range_loop)]
    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        let (s, d) = self.design.dims2().expect("design is 2-D");
        let mut r = vec![0.0; s];
        for row in 0..s {
            let mut acc = -self.targets[row];
            for col in 0..d {
                acc += self.design.get2(row, col) * theta[col];
            }
            r[row] = acc;
        }
        r
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Spread of per-task optima around the base point.
const OPTIMUM_SPREAD: f64 = 0.1;

/// Generate a task: standard-normal X (s×d), θ* near the origin, and
/// y = Xθ* + noise·ε. Regenerates up to 10 times if X is rank-deficient.
#[allow(clippy::needless_range_loop)]
pub fn synth_task(seed: u64, dim: usize, samples: usize, noise: f64) -> Result<SynthTask, TheoryError> {
    if dim < 1 || samples < dim {
        return Err(TheoryError::Config(format!(
            "need samples >= dim >= 1, got dim {dim}, samples {samples}"
        )));
    }
    for attempt in 0u64..10 {
        let mut rng = SeededRng::derive(seed, &[b"synth", &attempt.to_le_bytes()]);
        let mut x = vec![0.0; samples * dim];
        rng.fill_normal(&mut x);
        let design = Tensor::new(vec![samples, dim], crate::tensor::DType::F64, x)?;
        let mut optimum = vec![0.0; dim];
        rng.fill_normal(&mut optimum);
        for v in &mut optimum {
            *v *= OPTIMUM_SPREAD;
        }
        let mut eps = vec![0.0; samples];
        rng.fill_normal(&mut eps);
        let mut targets = vec![0.0; samples];
        for row in 0..samples {
            let mut acc = noise * eps[row];
            for col in 0..dim {
                acc += design.get2(row, col) * optimum[col];
            }
            targets[row] = acc;
        }
        // Full column rank within tolerance.
        let f = design.svd()?;
        if f.s[dim - 1] > 1e-8 * f.s[0] {
            return Ok(SynthTask {
                design,
                targets,
                optimum,
            });
        }
    }
    Err(TheoryError::RankDeficient(10))
}

/// Outcome of T gradient steps from θ_0.
#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub theta: Vec<f64>,
    pub tau: Vec<f64>,
    /// Max gradient norm along the trajectory (the empirical second-moment
    /// bound; 0 when T = 0).
    pub grad_norm_max: f64,
}

/// T constant-rate full-batch gradient steps.
pub fn fine_tune(
    task: &SynthTask,
    theta0: &[f64],
    eta: f64,
    steps: usize,
) -> Result<FineTuneResult, TheoryError> {
    if eta < 0.0 {
        return Err(TheoryError::Config(format!("learning rate must be >= 0, got {eta}")));
    }
    let mut theta = theta0.to_vec();
    let mut grad_norm_max = 0.0f64;
    for step in 0..steps {
        let g = task.gradient(&theta);
        grad_norm_max = grad_norm_max.max(norm(&g));
        for (t, gv) in theta.iter_mut().zip(&g) {
            *t -= eta * gv;
        }
        let n = norm(&theta);
        if n > 1e6 {
            return Err(TheoryError::Diverged { step, norm: n });
        }
    }
    let tau = theta
        .iter()
        .zip(theta0)
        .map(|(&t, &t0)| t - t0)
        .collect();
    Ok(FineTuneResult {
        theta,
        tau,
        grad_norm_max,
    })
}

/// Estimate the Lipschitz constant of L on the ball B(θ_0, radius) as the
/// max sampled gradient norm. Samples sit on the boundary sphere in
/// antipodal pairs (the gradient norm of a quadratic is convex, so its max
/// over the ball lies on the sphere), plus the center.
///
/// `min_radius` is the radius the caller actually needs covered — the
/// estimate is refused rather than silently unsound when radius falls short.
pub fn lipschitz_estimate(
    task: &SynthTask,
    theta0: &[f64],
    radius: f64,
    min_radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, TheoryError> {
    if radius <= 0.0 {
        return Err(TheoryError::Config(format!("radius must be positive, got {radius}")));
    }
    if radius < min_radius {
        return Err(TheoryError::UnsoundRadius {
            radius,
            required: min_radius,
        });
    }
    if samples < 100 {
        return Err(TheoryError::Config(format!(
            "need at least 100 samples, got {samples}"
        )));
    }
    let dim = task.dim();
    let mut rng = SeededRng::derive(seed, &[b"lipschitz"]);
    let mut best = norm(&task.gradient(theta0));
    let mut point = vec![0.0; dim];
    for _ in 0..samples.div_ceil(2) {
        let mut direction = vec![0.0; dim];
        rng.fill_normal(&mut direction);
        let dn = norm(&direction);
        if dn == 0.0 {
            direction[0] = 1.0;
        } else {
            for v in &mut direction {
                *v /= dn;
            }
        }
        for sign in [1.0, -1.0] {
            for i in 0..dim {
                point[i] = theta0[i] + sign * radius * direction[i];
            }
            best = best.max(norm(&task.gradient(&point)));
        }
    }
    Ok(best)
}

/// Merged vector and per-task loss gaps |L_i(θ_0+τ_m) − L_i(θ_0+τ_i)|.
#[derive(Debug, Clone)]
pub struct MergeMeasurement {
    pub tau_merged: Vec<f64>,
    pub gaps: Vec<f64>,
}

pub fn merge_and_measure(
    tasks: &[SynthTask],
    theta0: &[f64],
    taus: &[Vec<f64>],
    alphas: &[f64],
) -> Result<MergeMeasurement, TheoryError> {
    if tasks.len() != taus.len() || tasks.len() != alphas.len() {
        return Err(TheoryError::Config(format!(
            "tasks/taus/alphas length mismatch: {}/{}/{}",
            tasks.len(),
            taus.len(),
            alphas.len()
        )));
    }
    let dim = theta0.len();
    let mut tau_merged = vec![0.0; dim];
    for (tau, &alpha) in taus.iter().zip(alphas) {
        for (m, &t) in tau_merged.iter_mut().zip(tau) {
            *m += alpha * t;
        }
    }
    let theta_merged: Vec<f64> = theta0.iter().zip(&tau_merged).map(|(&a, &b)| a + b).collect();
    let mut gaps = Vec::with_capacity(tasks.len());
    for (task, tau) in tasks.iter().zip(taus) {
        let theta_i: Vec<f64> = theta0.iter().zip(tau).map(|(&a, &b)| a + b).collect();
        gaps.push((task.loss(&theta_merged) - task.loss(&theta_i)).abs());
    }
    Ok(MergeMeasurement { tau_merged, gaps })
}

/// Bound evaluation for one task in one configuration.
#[derive(Debug, Clone)]
pub struct TaskBound {
    pub task: usize,
    pub gap: f64,
    pub lemma_bound: f64,
    pub theorem_bound: f64,
    pub lipschitz: f64,
    pub lemma_pass: bool,
    pub theorem_pass: bool,
}

/// Full evaluation of one (η, T, α) configuration.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub tasks: Vec<TaskBound>,
    pub grad_bound: f64,
    pub eta: f64,
    pub steps: usize,
    pub alphas: Vec<f64>,
    pub tau_norms: Vec<f64>,
    /// max_j ‖τ_j‖ ≤ η·T·G (the trajectory inequality).
    pub scaling_pass: bool,
}

impl BoundReport {
    pub fn all_pass(&self) -> bool {
        self.scaling_pass && self.tasks.iter().all(|t| t.lemma_pass && t.theorem_pass)
    }
}

/// Evaluate both bounds from measured quantities.
///
/// `lipschitz[i]` must cover a ball containing θ_0+τ_m and every θ_0+τ_i;
/// `grad_bound` is the empirical max gradient norm G.
pub fn bound_check(
    gaps: &[f64],
    lipschitz: &[f64],
    grad_bound: f64,
    tau_norms: &[f64],
    alphas: &[f64],
    eta: f64,
    steps: usize,
) -> BoundReport {
    let n = gaps.len();
    let mut tasks = Vec::with_capacity(n);
    for i in 0..n {
        let c = lipschitz[i];
        let mut psi_sum = 0.0;
        let mut lemma = 0.0;
        for j in 0..n {
            let psi = if j == i {
                c * (1.0 - alphas[j]).abs()
            } else {
                c * alphas[j].abs()
            };
            psi_sum += psi;
            lemma += psi * tau_norms[j];
        }
        let theorem = psi_sum * grad_bound * eta * steps as f64;
        tasks.push(TaskBound {
            task: i,
            gap: gaps[i],
            lemma_bound: lemma,
            theorem_bound: theorem,
            lipschitz: c,
            lemma_pass: gaps[i] <= lemma,
            theorem_pass: gaps[i] <= theorem,
        });
    }
    let tau_max = tau_norms.iter().cloned().fold(0.0f64, f64::max);
    BoundReport {
        tasks,
        grad_bound,
        eta,
        steps,
        alphas: alphas.to_vec(),
        tau_norms: tau_norms.to_vec(),
        scaling_pass: tau_max <= eta * steps as f64 * grad_bound,
    }
}

/// Grid of (η, T) cells with per-cell random α, d-dimensional tasks.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GridConfig {
    pub dim: usize,
    pub samples: usize,
    pub n_tasks: usize,
    pub etas: Vec<f64>,
    pub t_steps: Vec<usize>,
    pub noise: f64,
    pub lipschitz_samples: usize,
    /// Margin of the estimation ball over the required radius. Values below
    /// 1 are refused as unsound at estimation time.
    pub radius_factor: f64,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        // 4 rates x 5 step counts = 20 configurations.
        GridConfig {
            dim: 8,
            samples: 32,
            n_tasks: 3,
            etas: vec![0.002, 0.005, 0.01, 0.02],
            t_steps: vec![10, 30, 100, 300, 1000],
            noise: 0.05,
            lipschitz_samples: 512,
            radius_factor: 1.25,
            seed: 7,
        }
    }
}

/// Run every grid cell: fine-tune, merge with per-cell random α, estimate
/// constants on a covering ball, and evaluate both bounds.
pub fn bound_grid(cfg: &GridConfig) -> Result<Vec<BoundReport>, TheoryError> {
    if cfg.n_tasks == 0 {
        return Err(TheoryError::Config("need at least one task".into()));
    }
    let theta0 = vec![0.0; cfg.dim];
    let mut reports = Vec::with_capacity(cfg.etas.len() * cfg.t_steps.len());
    for (ei, &eta) in cfg.etas.iter().enumerate() {
        for (ti, &steps) in cfg.t_steps.iter().enumerate() {
            let cell = (ei * cfg.t_steps.len() + ti) as u64;
            let tasks: Vec<SynthTask> = (0..cfg.n_tasks)
                .map(|i| {
                    let mut s = SeededRng::derive(
                        cfg.seed,
                        &[b"cell", &cell.to_le_bytes(), &(i as u64).to_le_bytes()],
                    );
                    synth_task(s.next_u64(), cfg.dim, cfg.samples, cfg.noise)
                })
                .collect::<Result<_, _>>()?;

            let mut taus = Vec::with_capacity(cfg.n_tasks);
            let mut grad_bound = 0.0f64;
            for task in &tasks {
                let ft = fine_tune(task, &theta0, eta, steps)?;
                grad_bound = grad_bound.max(ft.grad_norm_max);
                taus.push(ft.tau);
            }

            let mut alpha_rng =
                SeededRng::derive(cfg.seed, &[b"alpha", &cell.to_le_bytes()]);
            let alphas: Vec<f64> = (0..cfg.n_tasks).map(|_| alpha_rng.next_uniform()).collect();

            let measured = merge_and_measure(&tasks, &theta0, &taus, &alphas)?;
            let tau_norms: Vec<f64> = taus.iter().map(|t| norm(t)).collect();
            let required = tau_norms.iter().cloned().fold(0.0f64, f64::max)
                + norm(&measured.tau_merged);
            let radius = (cfg.radius_factor * required).max(1e-6 * cfg.radius_factor.max(0.0));

            let lipschitz: Vec<f64> = tasks
                .iter()
                .enumerate()
                .map(|(i, task)| {
                    lipschitz_estimate(
                        task,
                        &theta0,
                        radius,
                        required,
                        cfg.lipschitz_samples,
                        cfg.seed ^ cell ^ (i as u64) << 32,
                    )
                })
                .collect::<Result<_, _>>()?;

            reports.push(bound_check(
                &measured.gaps,
                &lipschitz,
                grad_bound,
                &tau_norms,
                &alphas,
                eta,
                steps,
            ));
        }
    }
    Ok(reports)
}

/// CSV rows `(task, gap, lemma_bound, theorem_bound, C, G, eta, T, pass)`.
pub fn write_bound_report_csv(
    reports: &[BoundReport],
    path: impl AsRef<Path>,
) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "task,gap,lemma_bound,theorem_bound,C,G,eta,T,pass")?;
    for report in reports {
        for t in &report.tasks {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                t.task,
                t.gap,
                t.lemma_bound,
                t.theorem_bound,
                t.lipschitz,
                report.grad_bound,
                report.eta,
                report.steps,
                t.lemma_pass && t.theorem_pass
            )?;
        }
    }
    Ok(())
}

/// Fine-tuning-length sweep configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepConfig {
    pub eta: f64,
    pub t_grid: Vec<usize>,
    pub n_tasks: usize,
    pub dim: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            eta: 0.005,
            t_grid: vec![0, 1, 2, 4, 8, 16, 32, 64, 128, 256],
            n_tasks: 3,
            dim: 8,
            samples: 32,
            noise: 0.05,
            seed: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub steps: usize,
    pub lambda: f64,
    pub mean_loss: f64,
}

/// For each fine-tuning length T, build experts, merge by plain task-vector
/// summation scaled by λ ∈ {1/n, 1}, and record the mean post-merge loss.
pub fn steps_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, TheoryError> {
    if !cfg.t_grid.windows(2).all(|w| w[0] < w[1]) {
        return Err(TheoryError::Config("t_grid must be strictly ascending".into()));
    }
    let theta0 = vec![0.0; cfg.dim];
    let tasks: Vec<SynthTask> = (0..cfg.n_tasks)
        .map(|i| {
            let mut s = SeededRng::derive(cfg.seed, &[b"sweep", &(i as u64).to_le_bytes()]);
            synth_task(s.next_u64(), cfg.dim, cfg.samples, cfg.noise)
        })
        .collect::<Result<_, _>>()?;

    let lambdas = [1.0 / cfg.n_tasks as f64, 1.0];
    let mut rows = Vec::with_capacity(cfg.t_grid.len() * lambdas.len());
    for &steps in &cfg.t_grid {
        let mut tau_sum = vec![0.0; cfg.dim];
        for task in &tasks {
            let ft = fine_tune(task, &theta0, cfg.eta, steps)?;
            for (acc, &t) in tau_sum.iter_mut().zip(&ft.tau) {
                *acc += t;
            }
        }
        for &lambda in &lambdas {
            let theta: Vec<f64> = theta0
                .iter()
                .zip(&tau_sum)
                .map(|(&a, &b)| a + lambda * b)
                .collect();
            let mean_loss =
                tasks.iter().map(|t| t.loss(&theta)).sum::<f64>() / cfg.n_tasks as f64;
            rows.push(SweepRow {
                steps,
                lambda,
                mean_loss,
            });
        }
    }
    Ok(rows)
}

/// CSV rows `(T, lambda, mean_loss)`.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "T,lambda,mean_loss")?;
    for row in rows {
        writeln!(f, "{},{},{}", row.steps, row.lambda, row.mean_loss)?;
    }
    Ok(())
}
