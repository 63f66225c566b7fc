//! Acceptance suite: one test per release criterion, each printing a
//! pass/fail line. Run with
//! `cargo test -p taskfuse-cli --test acceptance -- --nocapture`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use taskfuse_cli::{execute, Cli};
use taskfuse_core::checkpoint::{
    checkpoint_to_bytes, read_checkpoint_bytes, write_checkpoint, Checkpoint,
};
use taskfuse_core::merge::{
    apply_merged, dare, iso_c, task_arithmetic, ties_merge, weight_average, InitKind, MergeRecipe,
    OptimizerKind,
};
use taskfuse_core::taskvec::compute_task_vectors;
use taskfuse_core::tensor::{DType, RankPolicy, SeededRng, Tensor};
use taskfuse_core::theory::{bound_grid, GridConfig};
use taskfuse_core::wudi::{
    analytic_gradient, build_components, closed_form_solution, descent_learning_rate,
    optimize_layer, wudi2_loss, wudi_loss, LayerComponents, TaskComponents, WudiVariant,
};

fn criterion(number: usize, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance] criterion {number} ({name}): {verdict} — {detail}");
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

fn random_matrix(rng: &mut SeededRng, m: usize, n: usize) -> Tensor {
    let data = (0..m * n).map(|_| rng.next_normal()).collect();
    Tensor::matrix(m, n, data).unwrap()
}

/// Random matrix with singular values in [1, 2]; keeps the loss's system
/// matrix far from singular.
fn conditioned_matrix(rng: &mut SeededRng, m: usize, n: usize) -> Tensor {
    let r = m.min(n);
    let u = random_matrix(rng, m, m).svd().unwrap().u;
    let v = random_matrix(rng, n, n).svd().unwrap().u;
    let mut out = Tensor::zeros(vec![m, n], DType::F32);
    for j in 0..r {
        let s = 1.0 + rng.next_uniform();
        for i in 0..m {
            for l in 0..n {
                let cur = out.get2(i, l);
                out.set2(i, l, cur + u.get2(i, j) * s * v.get2(l, j));
            }
        }
    }
    out
}

#[test]
fn criterion_1_gradient_correctness() {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for instance in 0..50u64 {
        let mut rng = SeededRng::derive(2024, &[b"grad", &instance.to_le_bytes()]);
        let m = 2 + (rng.next_u64() % 15) as usize; // 2..=16
        let n = 2 + (rng.next_u64() % 15) as usize;
        let tasks = 1 + (rng.next_u64() % 5) as usize; // 1..=5
        let variant = if instance % 2 == 0 {
            WudiVariant::FullFt
        } else {
            WudiVariant::Lora
        };
        let policy = if instance % 3 == 0 {
            RankPolicy::Energy(0.95)
        } else {
            RankPolicy::Fixed(usize::MAX)
        };
        let taus: Vec<Tensor> = (0..tasks).map(|_| random_matrix(&mut rng, m, n)).collect();
        let comps = match build_components(&taus, variant, policy) {
            Ok(c) => c,
            Err(_) => continue, // centered single task can be degenerate
        };
        let tm = random_matrix(&mut rng, m, n);
        let analytic = analytic_gradient(&tm, &comps).unwrap();

        let h = 1e-4;
        let mut numeric = Tensor::zeros(vec![m, n], DType::F64);
        for idx in 0..m * n {
            let mut plus = tm.clone();
            plus.data_mut()[idx] += h;
            let mut minus = tm.clone();
            minus.data_mut()[idx] -= h;
            numeric.data_mut()[idx] = (wudi2_loss(&plus, &comps).unwrap()
                - wudi2_loss(&minus, &comps).unwrap())
                / (2.0 * h);
        }
        let denom = numeric.frobenius_norm().max(analytic.frobenius_norm()).max(1e-12);
        worst = worst.max(analytic.sub(&numeric).unwrap().frobenius_norm() / denom);
        checked += 1;
    }
    criterion(
        1,
        "gradient correctness",
        checked >= 45 && worst <= 1e-4,
        format!("max relative error {worst:.3e} over {checked} instances (tolerance 1e-4)"),
    );
}

#[test]
fn criterion_2_optimizer_oracle_agreement() {
    let mut worst_dist = 0.0f64;
    let mut worst_gap = 0.0f64;
    for instance in 0..20u64 {
        let mut rng = SeededRng::derive(2025, &[b"oracle", &instance.to_le_bytes()]);
        let taus: Vec<Tensor> = (0..3).map(|_| conditioned_matrix(&mut rng, 8, 8)).collect();
        let comps = build_components(&taus, WudiVariant::Lora, RankPolicy::Fixed(8)).unwrap();
        let recipe = MergeRecipe {
            optimizer: OptimizerKind::Sgd,
            learning_rate: descent_learning_rate(&comps).unwrap(),
            iterations: 300,
            init: InitKind::MeanOfTaskVectors,
            rank_policy: RankPolicy::Fixed(8),
            ..MergeRecipe::default()
        };
        let (tm, report) = optimize_layer(&taus, WudiVariant::Lora, &recipe).unwrap();
        let oracle = closed_form_solution(&comps).unwrap();
        let dist = tm.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        let oracle_loss = wudi2_loss(&oracle, &comps).unwrap();
        let gap = (report.final_loss - oracle_loss).abs() / oracle_loss.max(1e-300);
        worst_dist = worst_dist.max(dist);
        worst_gap = worst_gap.max(gap);
    }
    criterion(
        2,
        "optimizer-oracle agreement",
        worst_dist <= 1e-2 && worst_gap <= 1e-2,
        format!(
            "max relative distance {worst_dist:.3e} (<= 1e-2), max loss gap {worst_gap:.3e} (<= 1%) over 20 instances"
        ),
    );
}

#[test]
fn criterion_3_baseline_loss_equivalence() {
    let mut worst = 0.0f64;
    for instance in 0..20u64 {
        let mut rng = SeededRng::derive(2026, &[b"eq1", &instance.to_le_bytes()]);
        let m = 3 + (rng.next_u64() % 6) as usize;
        let n = 3 + (rng.next_u64() % 6) as usize;
        let tasks = 2 + (rng.next_u64() % 3) as usize;
        let taus: Vec<Tensor> = (0..tasks).map(|_| random_matrix(&mut rng, m, n)).collect();
        let tm = random_matrix(&mut rng, m, n);

        // Full rank, no centering, input basis literally τᵀ.
        let comps = LayerComponents {
            tasks: taus
                .iter()
                .enumerate()
                .map(|(i, tau)| {
                    let b = tau.transpose().unwrap();
                    let norm = tau.frobenius_norm();
                    TaskComponents {
                        task_index: i,
                        target: tau.clone(),
                        gram: b.matmul(&b.transpose().unwrap()).unwrap(),
                        input_basis: b,
                        weight: 1.0 / (norm * norm),
                        rank: m.min(n),
                        top_singular: 0.0,
                    }
                })
                .collect(),
            mean: Tensor::zeros(vec![m, n], DType::F32),
            shape: (m, n),
            excluded: vec![],
        };
        let substituted = wudi2_loss(&tm, &comps).unwrap();
        let baseline = wudi_loss(&tm, &taus).unwrap();
        worst = worst.max((substituted - baseline).abs() / baseline.max(1.0));
    }
    criterion(
        3,
        "baseline-loss equivalence",
        worst <= 1e-10,
        format!("max |substituted - baseline| {worst:.3e} over 20 instances (tolerance 1e-10)"),
    );
}

#[test]
fn criterion_4_baseline_exactness() {
    // Weight average of identical experts is bit-identical.
    let mut rng = SeededRng::new(71);
    let mut expert = Checkpoint::new();
    let data: Vec<f64> = (0..24).map(|_| rng.next_normal() as f32 as f64).collect();
    expert
        .insert("a.weight", Tensor::matrix(4, 6, data).unwrap())
        .unwrap();
    let averaged = weight_average(&[&expert, &expert, &expert]).unwrap();
    let wa_bits = checkpoint_to_bytes(&averaged) == checkpoint_to_bytes(&expert);

    // Task arithmetic with one expert at λ = 1 reconstructs it.
    let mut base = Checkpoint::new();
    let bdata: Vec<f64> = (0..24).map(|_| rng.next_normal() as f32 as f64).collect();
    base.insert("a.weight", Tensor::matrix(4, 6, bdata).unwrap())
        .unwrap();
    let tv = compute_task_vectors(Arc::new(base.clone()), std::slice::from_ref(&expert)).unwrap();
    let rebuilt = apply_merged(&base, &task_arithmetic(&tv).unwrap(), 1.0).unwrap();
    let ta_err = rebuilt
        .get("a.weight")
        .unwrap()
        .sub(expert.get("a.weight").unwrap())
        .unwrap()
        .frobenius_norm()
        / expert.get("a.weight").unwrap().frobenius_norm();

    // Hand-traced trim/elect/merge case.
    let mut tbase = Checkpoint::new();
    tbase
        .insert("t.weight", Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap())
        .unwrap();
    let mut t1 = Checkpoint::new();
    t1.insert("t.weight", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap())
        .unwrap();
    let mut t2 = Checkpoint::new();
    t2.insert("t.weight", Tensor::matrix(1, 2, vec![3.0, 0.5]).unwrap())
        .unwrap();
    let ties_tv = compute_task_vectors(Arc::new(tbase), &[t1, t2]).unwrap();
    let ties_tm = ties_merge(&ties_tv, 1.0).unwrap();
    let ties_exact = ties_tm.by_key["t.weight"].data() == [2.0, -2.0];

    // Spectrum flattening yields an isotropic spectrum.
    let mut worst_spread = 0.0f64;
    for instance in 0..20u64 {
        let mut rng = SeededRng::derive(2027, &[b"iso", &instance.to_le_bytes()]);
        let m = 3 + (rng.next_u64() % 6) as usize;
        let n = 3 + (rng.next_u64() % 6) as usize;
        let mut b = Checkpoint::new();
        b.insert("x.weight", Tensor::zeros(vec![m, n], DType::F32))
            .unwrap();
        let mut e = Checkpoint::new();
        e.insert("x.weight", random_matrix(&mut rng, m, n)).unwrap();
        let tv = compute_task_vectors(Arc::new(b), &[e]).unwrap();
        let tm = iso_c(&tv).unwrap();
        let f = tm.by_key["x.weight"].svd().unwrap();
        let sigma_bar = f.s.iter().sum::<f64>() / f.s.len() as f64;
        let spread = f.s.iter().cloned().fold(0.0f64, |acc, s| acc.max((s - sigma_bar).abs()));
        worst_spread = worst_spread.max(spread / sigma_bar);
    }

    criterion(
        4,
        "baseline exactness",
        wa_bits && ta_err <= 1e-6 && ties_exact && worst_spread <= 1e-5,
        format!(
            "weight-average bit-identical: {wa_bits}; task-arithmetic reconstruction {ta_err:.3e} (<= 1e-6); trim/elect/merge trace exact: {ties_exact}; spectrum spread {worst_spread:.3e} (<= 1e-5)"
        ),
    );
}

#[test]
fn criterion_5_dare_statistics() {
    let values = [0.8, -1.3, 2.0, 0.05, -0.4, 1.7, 0.9, -2.2];
    let tau = Tensor::matrix(2, 4, values.to_vec()).unwrap();

    let mut rng = SeededRng::new(5);
    let identity = dare(&tau, 0.0, &mut rng).unwrap();
    let bit_identity = identity.data() == tau.data();

    let p = 0.5;
    let trials = 10_000usize;
    let mut sums = vec![0.0f64; values.len()];
    for t in 0..trials {
        let mut stream = SeededRng::derive(31337, &[b"dare-mc", &(t as u64).to_le_bytes()]);
        let out = dare(&tau, p, &mut stream).unwrap();
        for (s, &v) in sums.iter_mut().zip(out.data()) {
            *s += v;
        }
    }
    let mut worst_sigmas = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        let mean = sums[i] / trials as f64;
        let se = (v * v * p / (1.0 - p) / trials as f64).sqrt();
        worst_sigmas = worst_sigmas.max((mean - v).abs() / se);
    }
    criterion(
        5,
        "drop-and-rescale statistics",
        bit_identity && worst_sigmas <= 3.0,
        format!(
            "p=0 bit-identity: {bit_identity}; worst per-entry deviation {worst_sigmas:.2} standard errors over {trials} seeds (<= 3)"
        ),
    );
}

#[test]
fn criterion_6_svd_suite() {
    let mut worst_recon = 0.0f64;
    let mut worst_ey = 0.0f64;
    let mut worst_ortho = 0.0f64;
    let mut deterministic = true;
    for instance in 0..20u64 {
        let mut rng = SeededRng::derive(2028, &[b"svd", &instance.to_le_bytes()]);
        let m = 2 + (rng.next_u64() % 11) as usize;
        let n = 2 + (rng.next_u64() % 11) as usize;
        let mat = random_matrix(&mut rng, m, n);
        let f = mat.svd().unwrap();
        let g = mat.svd().unwrap();
        deterministic &= f.u.data() == g.u.data() && f.s == g.s && f.v.data() == g.v.data();

        let recon = f.reconstruct().unwrap();
        worst_recon =
            worst_recon.max(mat.sub(&recon).unwrap().frobenius_norm() / mat.frobenius_norm());

        let r = m.min(n);
        let k = (instance as usize) % r;
        let resid = mat.sub(&f.truncate(k).reconstruct().unwrap()).unwrap().frobenius_norm();
        let tail: f64 = f.s[k..].iter().map(|&s| s * s).sum::<f64>().sqrt();
        worst_ey = worst_ey.max((resid - tail).abs() / tail.max(1e-9 * mat.frobenius_norm()));

        for factor in [&f.u, &f.v] {
            let gram = factor.transpose().unwrap().matmul(factor).unwrap();
            let (q, _) = gram.dims2().unwrap();
            for i in 0..q {
                for j in 0..q {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst_ortho = worst_ortho.max((gram.get2(i, j) - expect).abs());
                }
            }
        }
    }
    criterion(
        6,
        "thin SVD suite",
        worst_recon <= 1e-5 && worst_ey <= 1e-5 && worst_ortho <= 1e-5 && deterministic,
        format!(
            "reconstruction {worst_recon:.3e}, truncation-residual identity {worst_ey:.3e}, orthonormality {worst_ortho:.3e} (all <= 1e-5); bit-deterministic: {deterministic}"
        ),
    );
}

#[test]
fn criterion_7_checkpoint_format() {
    // Round trips for half, bfloat16 and float32 payloads.
    let mut rng = SeededRng::new(72);
    let mut round_trips = true;
    for dtype in [DType::F16, DType::BF16, DType::F32] {
        let mut c = Checkpoint::new();
        let data: Vec<f64> = (0..16).map(|_| dtype.quantize(rng.next_normal())).collect();
        c.insert("w", Tensor::new(vec![4, 4], dtype, data).unwrap()).unwrap();
        c.metadata_mut().insert("fixture".into(), "acceptance".into());
        let bytes = checkpoint_to_bytes(&c);
        let back = read_checkpoint_bytes(&bytes).unwrap();
        round_trips &= back == c && checkpoint_to_bytes(&back) == bytes;
    }

    // Canonical writes are deterministic.
    let mut c = Checkpoint::new();
    c.insert("z.weight", Tensor::matrix(2, 2, vec![0.25, -1.5, 3.0, 0.0]).unwrap())
        .unwrap();
    c.insert("a.bias", Tensor::new(vec![2], DType::F32, vec![1.0, 2.0]).unwrap())
        .unwrap();
    let h1 = taskfuse_cli::manifest::hex_digest(&checkpoint_to_bytes(&c));
    let h2 = taskfuse_cli::manifest::hex_digest(&checkpoint_to_bytes(&c.clone()));
    let deterministic = h1 == h2;

    // Malformed headers are parse errors, not panics or silent data.
    let good = checkpoint_to_bytes(&c);
    let mut oversized = good.clone();
    oversized[..8].copy_from_slice(&(u64::MAX / 4).to_le_bytes());
    let mut bad_json = Vec::new();
    bad_json.extend_from_slice(&5u64.to_le_bytes());
    bad_json.extend_from_slice(b"oops!");
    let unknown_dtype = {
        let header = br#"{"w":{"dtype":"I4","shape":[2],"data_offsets":[0,1]}}"#;
        let mut b = Vec::new();
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(header);
        b.push(0);
        b
    };
    let overlapping = {
        let header = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"b":{"dtype":"F32","shape":[1],"data_offsets":[2,6]}}"#;
        let mut b = Vec::new();
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(header);
        b.extend_from_slice(&[0u8; 6]);
        b
    };
    let rejected = [oversized, bad_json, unknown_dtype, overlapping]
        .iter()
        .all(|bytes| read_checkpoint_bytes(bytes).is_err());

    criterion(
        7,
        "checkpoint container",
        round_trips && deterministic && rejected,
        format!(
            "F16/BF16/F32 round trips bit-exact: {round_trips}; canonical hash stable: {deterministic}; malformed fixtures rejected: {rejected}"
        ),
    );
}

#[test]
fn criterion_8_bound_validation() {
    let reports = bound_grid(&GridConfig::default()).unwrap();
    let cells = reports.len();
    let lemma_ok = reports.iter().all(|r| r.tasks.iter().all(|t| t.lemma_pass));
    let theorem_ok = reports.iter().all(|r| r.tasks.iter().all(|t| t.theorem_pass));
    let scaling_ok = reports.iter().all(|r| r.scaling_pass);
    criterion(
        8,
        "merging-error bound",
        cells == 20 && lemma_ok && theorem_ok && scaling_ok,
        format!(
            "{cells} grid cells; gap <= per-task bound: {lemma_ok}; gap <= O(eta*T) bound: {theorem_ok}; max tau norm <= eta*T*G: {scaling_ok}"
        ),
    );
}

#[test]
fn criterion_9_norm_stability() {
    // Rank-8 low-rank 3-task fixture, unit Frobenius norm per task.
    let (m, n, rank) = (32, 24, 8);
    let mut rng = SeededRng::new(100);
    let taus: Vec<Tensor> = (0..3)
        .map(|_| {
            let b: Vec<f64> = (0..m * rank).map(|_| rng.next_normal()).collect();
            let a: Vec<f64> = (0..rank * n).map(|_| rng.next_normal()).collect();
            let t = Tensor::matrix(m, rank, b)
                .unwrap()
                .matmul(&Tensor::matrix(rank, n, a).unwrap())
                .unwrap();
            let norm = t.frobenius_norm();
            t.scale(1.0 / norm)
        })
        .collect();

    let stable_recipe = MergeRecipe {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-3,
        iterations: 300,
        init: InitKind::MeanOfTaskVectors,
        rank_policy: RankPolicy::Energy(0.95),
        ..MergeRecipe::default()
    };
    let (_, stable) = optimize_layer(&taus, WudiVariant::Lora, &stable_recipe).unwrap();
    let init_norm = stable.norm_history[0];
    let stable_ratio = stable.peak_norm() / init_norm;
    let stable_descends = stable.final_loss < stable.loss_history[0];

    let shortcut_recipe = MergeRecipe {
        optimizer: OptimizerKind::Adam,
        learning_rate: 2e-2,
        iterations: 300,
        init: InitKind::Zero,
        rank_policy: RankPolicy::Energy(0.95),
        ..MergeRecipe::default()
    };
    let (_, shortcut) = optimize_layer(&taus, WudiVariant::Lora, &shortcut_recipe).unwrap();
    let shortcut_peak = shortcut.peak_norm();

    criterion(
        9,
        "norm-stability diagnostic",
        stable_ratio <= 1.5 && shortcut_peak > stable.peak_norm() && stable_descends,
        format!(
            "sgd+mean-init peak/init {stable_ratio:.3} (<= 1.5, loss {:.3e} -> {:.3e}); adam+zero-init peak {shortcut_peak:.3} > sgd peak {:.3}",
            stable.loss_history[0],
            stable.final_loss,
            stable.peak_norm()
        ),
    );
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = SeededRng::new(73);
    let mut base = Checkpoint::new();
    let lin: Vec<f64> = (0..96).map(|_| rng.next_normal() as f32 as f64).collect();
    base.insert("blk.0.attn.weight", Tensor::matrix(8, 12, lin).unwrap())
        .unwrap();
    base.insert(
        "blk.0.norm.weight",
        Tensor::new(vec![12], DType::F32, vec![1.0; 12]).unwrap(),
    )
    .unwrap();
    let base_path = dir.path().join("base.safetensors");
    write_checkpoint(&base, &base_path).unwrap();
    let mut expert_paths = Vec::new();
    for i in 0..3 {
        let mut expert = base.clone();
        let lin: Vec<f64> = base
            .get("blk.0.attn.weight")
            .unwrap()
            .data()
            .iter()
            .map(|v| (v + 0.05 * rng.next_normal()) as f32 as f64)
            .collect();
        expert
            .insert("blk.0.attn.weight", Tensor::matrix(8, 12, lin).unwrap())
            .unwrap();
        let path = dir.path().join(format!("expert{i}.safetensors"));
        write_checkpoint(&expert, &path).unwrap();
        expert_paths.push(path);
    }

    let report_dir = dir.path().join("reports");
    let output = dir.path().join("merged.safetensors");
    let config_text = format!(
        r#"
command = "merge"
seed = 42
base_path = {:?}
expert_paths = [{}]
output_path = {:?}
report_dir = {:?}
[recipe]
method = "wudi_v2_full"
optimizer = "adam"
learning_rate = 1e-3
iterations = 150
lambda = 0.7
[recipe.dare]
drop_rate = 0.25
"#,
        base_path.display().to_string(),
        expert_paths
            .iter()
            .map(|p| format!("{:?}", p.display().to_string()))
            .collect::<Vec<_>>()
            .join(", "),
        output.display().to_string(),
        report_dir.display().to_string(),
    );
    let config_path = dir.path().join("run.toml");
    std::fs::write(&config_path, config_text).unwrap();

    let invoke = || {
        execute(&Cli {
            config: config_path.clone(),
            threads: None,
            overrides: vec![],
            quiet: true,
        })
    };

    fn snapshot(output: &Path, report_dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut files = vec![output.to_path_buf()];
        fn walk(dir: &Path, files: &mut Vec<PathBuf>) {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    walk(&path, files);
                } else {
                    files.push(path);
                }
            }
        }
        walk(report_dir, &mut files);
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let bytes = std::fs::read(&p).unwrap();
                (p, bytes)
            })
            .collect()
    }

    assert_eq!(invoke(), 0);
    let first = snapshot(&output, &report_dir);
    assert_eq!(invoke(), 0);
    let second = snapshot(&output, &report_dir);

    let same_names = first.len() == second.len()
        && first.iter().zip(&second).all(|(a, b)| a.0 == b.0);
    let mut identical = same_names;
    if same_names {
        for ((path, a), (_, b)) in first.iter().zip(&second) {
            if a != b {
                identical = false;
                println!("[acceptance] differing file: {}", path.display());
            }
        }
    }
    criterion(
        10,
        "end-to-end determinism",
        identical,
        format!(
            "two runs, {} artifacts (merged checkpoint, layer CSVs, summary, manifest) byte-identical: {identical}",
            first.len()
        ),
    );
}
