//! Run configuration: a single TOML document selecting the command and all
//! hyperparameters, with dot-path `--override` support and an optional
//! `MERGE_SEED` environment override for the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskfuse_core::merge::{
    DareConfig, InitKind, MergeMethod, MergeRecipe, OptimizerKind, LAMBDA_GRID,
};
use taskfuse_core::tensor::RankPolicy;
use taskfuse_core::theory::{GridConfig, SweepConfig};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Merge,
    Inspect,
    Diff,
    Theory,
}

/// Raw recipe section; unset fields fall back to preset or defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeSection {
    pub preset: Option<String>,
    pub method: Option<MergeMethod>,
    pub lambda: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub ties_density: Option<f64>,
    pub rank_energy: Option<f64>,
    pub rank_fixed: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub iterations: Option<usize>,
    pub init: Option<InitKind>,
    pub dare: Option<DareSection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DareSection {
    pub drop_rate: Option<f64>,
    pub seed: Option<u64>,
}

/// Optional λ grid search against a target checkpoint (the injected scorer
/// is the negative Frobenius distance to it).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub target_path: PathBuf,
    pub grid: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub dim: Option<usize>,
    pub samples: Option<usize>,
    pub n_tasks: Option<usize>,
    pub etas: Option<Vec<f64>>,
    pub t_steps: Option<Vec<usize>>,
    pub noise: Option<f64>,
    pub lipschitz_samples: Option<usize>,
    pub radius_factor: Option<f64>,
    pub seed: Option<u64>,
    pub sweep_eta: Option<f64>,
    pub sweep_t_grid: Option<Vec<usize>>,
}

/// The whole config file, prior to resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: u64,
    pub base_path: Option<PathBuf>,
    #[serde(default)]
    pub expert_paths: Vec<PathBuf>,
    /// LoRA adapter checkpoints, materialized into experts after
    /// `expert_paths` (task order: experts first, adapters second).
    #[serde(default)]
    pub lora_paths: Vec<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    #[serde(default)]
    pub key_filter: Vec<String>,
    /// `"<glob>=<LinearMatrix|Other>"` entries, first match wins.
    #[serde(default)]
    pub partition_overrides: Vec<String>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub recipe: RecipeSection,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub theory: TheorySection,
}

fn default_bins() -> usize {
    32
}

/// Fully-resolved settings echoed into the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub command: Command,
    pub seed: u64,
    pub base_path: Option<PathBuf>,
    pub expert_paths: Vec<PathBuf>,
    pub lora_paths: Vec<PathBuf>,
    pub output_path: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub key_filter: Vec<String>,
    pub partition_overrides: Vec<String>,
    pub histogram_bins: usize,
    pub recipe: MergeRecipe,
    pub sweep_target: Option<PathBuf>,
    pub sweep_grid: Vec<f64>,
    pub theory_grid: GridConfig,
    pub theory_sweep: SweepConfig,
}

pub fn load_config(
    path: &Path,
    overrides: &[String],
    env_seed: Option<u64>,
) -> Result<ResolvedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| CliError::usage(format!("config {} is not valid TOML: {e}", path.display())))?;
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let raw: RunConfig = value
        .try_into()
        .map_err(|e| CliError::usage(format!("config does not match the expected schema: {e}")))?;
    resolve(raw, env_seed)
}

/// Apply one `--override key.path=value`. Values parse as TOML scalars or
/// arrays, falling back to a plain string.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("override {spec:?} has no '='")))?;
    let parsed: toml::Value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(tbl) => tbl["v"].clone(),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(CliError::usage(format!("override {spec:?} has an empty path segment")));
        }
        let table = cursor
            .as_table_mut()
            .ok_or_else(|| CliError::usage(format!("override path {path:?} crosses a non-table")))?;
        if i + 1 == segments.len() {
            table.insert(seg.to_string(), parsed);
            return Ok(());
        }
        cursor = table
            .entry(seg.to_string())
            .or_insert(toml::Value::Table(toml::Table::new()));
    }
    unreachable!("loop returns on the last segment")
}

fn resolve(raw: RunConfig, env_seed: Option<u64>) -> Result<ResolvedConfig, CliError> {
    let seed = env_seed.unwrap_or(raw.seed);

    let mut recipe = match raw.recipe.preset.as_deref() {
        None => MergeRecipe::default(),
        Some("internvl-full") => MergeRecipe::preset_internvl_full(),
        Some("qwenvl-lora") => MergeRecipe::preset_qwenvl_lora(),
        Some(other) => {
            return Err(CliError::usage(format!(
                "unknown recipe preset {other:?} (want internvl-full or qwenvl-lora)"
            )))
        }
    };
    recipe.seed = seed;
    let section = &raw.recipe;
    if let Some(m) = section.method {
        recipe.method = m;
    }
    if let Some(l) = section.lambda {
        if l <= 0.0 {
            return Err(CliError::usage(format!("lambda must be positive, got {l}")));
        }
        recipe.lambda = l;
    }
    if let Some(grid) = &section.lambda_grid {
        recipe.lambda_grid = grid.clone();
    }
    if let Some(d) = section.ties_density {
        recipe.ties_density = d;
    }
    match (section.rank_energy, section.rank_fixed) {
        (Some(_), Some(_)) => {
            return Err(CliError::usage(
                "set at most one of recipe.rank_energy and recipe.rank_fixed".into(),
            ))
        }
        (Some(e), None) => recipe.rank_policy = RankPolicy::Energy(e),
        (None, Some(k)) => recipe.rank_policy = RankPolicy::Fixed(k),
        (None, None) => {}
    }
    if let Some(o) = section.optimizer {
        recipe.optimizer = o;
    }
    if let Some(lr) = section.learning_rate {
        if lr <= 0.0 {
            return Err(CliError::usage(format!("learning rate must be positive, got {lr}")));
        }
        recipe.learning_rate = lr;
    }
    if let Some(n) = section.iterations {
        if n == 0 {
            return Err(CliError::usage("iterations must be positive".into()));
        }
        recipe.iterations = n;
    }
    if let Some(init) = section.init {
        recipe.init = init;
    }
    if let Some(dare) = &section.dare {
        recipe.dare = Some(DareConfig {
            drop_rate: dare.drop_rate.unwrap_or(0.5),
            seed: dare.seed.unwrap_or(seed),
        });
    }

    let theory_defaults = GridConfig::default();
    let theory_grid = GridConfig {
        dim: raw.theory.dim.unwrap_or(theory_defaults.dim),
        samples: raw.theory.samples.unwrap_or(theory_defaults.samples),
        n_tasks: raw.theory.n_tasks.unwrap_or(theory_defaults.n_tasks),
        etas: raw.theory.etas.clone().unwrap_or(theory_defaults.etas),
        t_steps: raw.theory.t_steps.clone().unwrap_or(theory_defaults.t_steps),
        noise: raw.theory.noise.unwrap_or(theory_defaults.noise),
        lipschitz_samples: raw
            .theory
            .lipschitz_samples
            .unwrap_or(theory_defaults.lipschitz_samples),
        radius_factor: raw
            .theory
            .radius_factor
            .unwrap_or(theory_defaults.radius_factor),
        seed: raw.theory.seed.unwrap_or(seed),
    };
    let sweep_defaults = SweepConfig::default();
    let theory_sweep = SweepConfig {
        eta: raw.theory.sweep_eta.unwrap_or(sweep_defaults.eta),
        t_grid: raw.theory.sweep_t_grid.clone().unwrap_or(sweep_defaults.t_grid),
        n_tasks: theory_grid.n_tasks,
        dim: theory_grid.dim,
        samples: theory_grid.samples,
        noise: theory_grid.noise,
        seed: theory_grid.seed,
    };

    let resolved = ResolvedConfig {
        command: raw.command,
        seed,
        base_path: raw.base_path,
        expert_paths: raw.expert_paths,
        lora_paths: raw.lora_paths,
        output_path: raw.output_path,
        report_dir: raw.report_dir,
        key_filter: raw.key_filter,
        partition_overrides: raw.partition_overrides,
        histogram_bins: raw.histogram_bins,
        recipe,
        sweep_target: raw.sweep.as_ref().map(|s| s.target_path.clone()),
        sweep_grid: raw
            .sweep
            .as_ref()
            .and_then(|s| s.grid.clone())
            .unwrap_or_else(|| LAMBDA_GRID.to_vec()),
        theory_grid,
        theory_sweep,
    };
    validate(&resolved)?;
    Ok(resolved)
}

fn validate(cfg: &ResolvedConfig) -> Result<(), CliError> {
    let needs_base = matches!(cfg.command, Command::Merge | Command::Inspect | Command::Diff);
    if needs_base && cfg.base_path.is_none() {
        return Err(CliError::usage("base_path is required for this command".into()));
    }
    // Every run writes a manifest, so every run needs somewhere to put it.
    if cfg.report_dir.is_none() {
        return Err(CliError::usage("report_dir is required".into()));
    }
    let expert_count = cfg.expert_paths.len() + cfg.lora_paths.len();
    match cfg.command {
        Command::Merge => {
            if expert_count == 0 {
                return Err(CliError::usage("merge requires at least one expert".into()));
            }
            let output = cfg
                .output_path
                .as_ref()
                .ok_or_else(|| CliError::usage("merge requires output_path".into()))?;
            let mut inputs: Vec<&PathBuf> = cfg.expert_paths.iter().collect();
            inputs.extend(cfg.lora_paths.iter());
            inputs.extend(cfg.base_path.iter());
            inputs.extend(cfg.sweep_target.iter());
            if inputs.contains(&output) {
                return Err(CliError::usage(format!(
                    "output_path {} equals an input path",
                    output.display()
                )));
            }
        }
        Command::Inspect => {
            if expert_count == 0 {
                return Err(CliError::usage("inspect requires at least one expert".into()));
            }
        }
        Command::Diff => {
            if cfg.expert_paths.is_empty() {
                return Err(CliError::usage(
                    "diff requires one checkpoint in expert_paths".into(),
                ));
            }
        }
        Command::Theory => {}
    }
    if cfg.histogram_bins < 2 {
        return Err(CliError::usage("histogram_bins must be at least 2".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.toml");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_merge_config_resolves() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "base.st"
expert_paths = ["a.st"]
output_path = "out.st"
report_dir = "reports"
"#,
        );
        let cfg = load_config(&path, &[], None).unwrap();
        assert_eq!(cfg.command, Command::Merge);
        assert_eq!(cfg.recipe.iterations, 300);
        assert_eq!(cfg.recipe.lambda, 1.0);
    }

    #[test]
    fn preset_sets_optimizer_and_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "base.st"
expert_paths = ["a.st"]
output_path = "out.st"
report_dir = "reports"
[recipe]
preset = "qwenvl-lora"
"#,
        );
        let cfg = load_config(&path, &[], None).unwrap();
        assert_eq!(cfg.recipe.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.recipe.learning_rate, 1e-4);
        assert_eq!(cfg.recipe.method, MergeMethod::WudiV2Lora);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "base.st"
expert_paths = ["a.st"]
output_path = "out.st"
report_dir = "reports"
[recipe]
method = "ties"
"#,
        );
        let cfg = load_config(
            &path,
            &[
                "recipe.ties_density=0.4".into(),
                "recipe.lambda=0.5".into(),
                "seed=99".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.recipe.ties_density, 0.4);
        assert_eq!(cfg.recipe.lambda, 0.5);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.recipe.seed, 99);
    }

    #[test]
    fn env_seed_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "theory"
report_dir = "reports"
seed = 5
"#,
        );
        let cfg = load_config(&path, &[], Some(123)).unwrap();
        assert_eq!(cfg.seed, 123);
        assert_eq!(cfg.theory_grid.seed, 123);
    }

    #[test]
    fn output_equal_to_input_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "x.st"
expert_paths = ["a.st"]
output_path = "a.st"
report_dir = "reports"
"#,
        );
        let err = load_config(&path, &[], None).unwrap_err();
        assert!(err.to_string().contains("equals an input path"), "{err}");
    }

    #[test]
    fn merge_without_experts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "x.st"
output_path = "out.st"
report_dir = "reports"
"#,
        );
        assert!(load_config(&path, &[], None).is_err());
    }

    #[test]
    fn conflicting_rank_policies_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "x.st"
expert_paths = ["a.st"]
output_path = "out.st"
report_dir = "reports"
[recipe]
rank_energy = 0.9
rank_fixed = 4
"#,
        );
        assert!(load_config(&path, &[], None).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_config(
            dir.path(),
            r#"
command = "merge"
base_path = "x.st"
expert_paths = ["a.st"]
output_path = "out.st"
report_dir = "reports"
typo_field = 1
"#,
        );
        assert!(load_config(&path, &[], None).is_err());
    }
}
