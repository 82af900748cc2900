//! Run configuration: scale presets, TOML files, and environment overrides.
//!
//! Precedence, lowest to highest: the scale preset's defaults, the TOML
//! config file, `MOERL_*` environment variables, then explicit CLI flags
//! (`--seed`, `--out`). Environment keys name a section and a field with
//! underscores (`MOERL_DQN_STEPS` sets `dqn.steps`; keys without a known
//! section prefix are top-level, e.g. `MOERL_DISCOUNT`). Unknown keys are
//! rejected at deserialization with the offending field named.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How large a run should be. `Desk` finishes on a laptop in minutes;
/// `Paper` uses the full published constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scale> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("scale: unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSection {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub sparsity_target: f64,
    pub sparsity_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l1_weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DqnSection {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub r_max: f64,
    pub target_sync: usize,
    pub per_alpha: f64,
    pub per_beta_start: f64,
    pub priority_floor: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateSection {
    pub minibatch: usize,
    pub restarts: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub bootstrap_resamples: usize,
    pub restriction_threshold: f64,
}

/// Everything a pipeline run needs, resolvable to a single TOML document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub scale: Scale,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// User-supplied cohort CSV; absent means `simulate` generates one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cohort_csv: Option<PathBuf>,
    pub patients: usize,
    pub discount: f64,
    pub split_ratio: f64,
    pub k_neighbors: usize,
    pub encoder: EncoderSection,
    pub sparse: SparseSection,
    pub reward: RewardSection,
    pub dqn: DqnSection,
    pub gate: GateSection,
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// The bundled defaults for a scale.
    pub fn preset(scale: Scale) -> PipelineConfig {
        let desk = scale == Scale::Desk;
        PipelineConfig {
            scale,
            seed: 0,
            out_dir: PathBuf::from(if desk { "runs/desk" } else { "runs/paper" }),
            cohort_csv: None,
            patients: if desk { 2_000 } else { 20_000 },
            discount: 0.99,
            split_ratio: 0.75,
            k_neighbors: 300,
            encoder: EncoderSection {
                hidden_dim: 128,
                epochs: if desk { 8 } else { 50 },
                batch_size: 128,
                learning_rate: 1e-3,
            },
            sparse: SparseSection {
                hidden_dim: 128,
                epochs: if desk { 20 } else { 50 },
                batch_size: 128,
                learning_rate: 1e-3,
                sparsity_target: 0.05,
                sparsity_weight: 1e-3,
            },
            reward: RewardSection {
                epochs: if desk { 30 } else { 50 },
                batch_size: 128,
                learning_rate: 1e-3,
                l1_weight: 1e-3,
            },
            dqn: DqnSection {
                steps: if desk { 20_000 } else { 200_000 },
                batch_size: 30,
                learning_rate: 1e-3,
                lambda: 1.0,
                r_max: 3.0,
                target_sync: 1_000,
                per_alpha: 0.6,
                per_beta_start: 0.4,
                priority_floor: 1e-6,
                temperature: 0.2,
            },
            gate: GateSection {
                minibatch: 256,
                restarts: if desk { 100 } else { 1_000 },
                learning_rate: 1e-4,
                epochs: 50,
            },
            eval: EvalSection {
                bootstrap_resamples: if desk { 200 } else { 1_000 },
                restriction_threshold: 0.01,
            },
        }
    }

    /// Reject out-of-range values, naming the offending field path.
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, why: String| Err(Error::Config(format!("{path}: {why}")));
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount", format!("{} outside (0, 1]", self.discount));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio", format!("{} outside (0, 1)", self.split_ratio));
        }
        if self.patients < 4 {
            return bad("patients", format!("{} leaves no room for a train/test split", self.patients));
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors", "must be positive".into());
        }
        if let Some(path) = &self.cohort_csv {
            if !path.exists() {
                return bad("cohort_csv", format!("{} does not exist", path.display()));
            }
        }
        for (path, v) in [
            ("encoder.hidden_dim", self.encoder.hidden_dim),
            ("encoder.epochs", self.encoder.epochs),
            ("encoder.batch_size", self.encoder.batch_size),
            ("sparse.hidden_dim", self.sparse.hidden_dim),
            ("sparse.epochs", self.sparse.epochs),
            ("sparse.batch_size", self.sparse.batch_size),
            ("reward.epochs", self.reward.epochs),
            ("reward.batch_size", self.reward.batch_size),
            ("dqn.steps", self.dqn.steps),
            ("dqn.batch_size", self.dqn.batch_size),
            ("dqn.target_sync", self.dqn.target_sync),
            ("gate.minibatch", self.gate.minibatch),
            ("gate.restarts", self.gate.restarts),
            ("gate.epochs", self.gate.epochs),
            ("eval.bootstrap_resamples", self.eval.bootstrap_resamples),
        ] {
            if v == 0 {
                return bad(path, "must be positive".into());
            }
        }
        for (path, v) in [
            ("encoder.learning_rate", self.encoder.learning_rate),
            ("sparse.learning_rate", self.sparse.learning_rate),
            ("reward.learning_rate", self.reward.learning_rate),
            ("dqn.learning_rate", self.dqn.learning_rate),
            ("dqn.r_max", self.dqn.r_max),
            ("dqn.temperature", self.dqn.temperature),
            ("gate.learning_rate", self.gate.learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(path, format!("{v} must be positive and finite"));
            }
        }
        if self.dqn.lambda < 0.0 {
            return bad("dqn.lambda", format!("{} must be nonnegative", self.dqn.lambda));
        }
        if !(self.eval.restriction_threshold >= 0.0 && self.eval.restriction_threshold < 1.0) {
            return bad(
                "eval.restriction_threshold",
                format!("{} outside [0, 1)", self.eval.restriction_threshold),
            );
        }
        if !(self.sparse.sparsity_target > 0.0 && self.sparse.sparsity_target < 1.0) {
            return bad(
                "sparse.sparsity_target",
                format!("{} outside (0, 1)", self.sparse.sparsity_target),
            );
        }
        Ok(())
    }

    /// Canonical TOML serialization (stable key order via serde field order).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a of the canonical serialization; stamped into reports so any
    /// number can be traced back to the exact configuration.
    pub fn content_hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_toml().as_bytes()))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const SECTIONS: [&str; 6] = ["encoder", "sparse", "reward", "dqn", "gate", "eval"];

/// Merge `overlay` into `base` table-by-table; scalars replace, tables merge.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Map `MOERL_DQN_STEPS` to `(Some("dqn"), "steps")` and `MOERL_DISCOUNT`
/// to `(None, "discount")`.
fn env_key_path(suffix: &str) -> (Option<&str>, String) {
    let lower = suffix.to_ascii_lowercase();
    for section in SECTIONS {
        if let Some(rest) = lower.strip_prefix(&format!("{section}_")) {
            return (Some(section), rest.to_string());
        }
    }
    (None, lower)
}

/// Parse an env value with TOML scalar semantics, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    if let Ok(table) = probe.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            if !matches!(v, toml::Value::Table(_) | toml::Value::Datetime(_)) {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

/// Resolved configuration sources, applied in precedence order.
#[derive(Debug, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    /// CLI `--scale`, overriding the file's `scale`.
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Environment snapshot, `(KEY, value)` pairs with the `MOERL_` prefix
    /// already stripped. Pass `env_overrides()` for the live process env.
    pub env: Vec<(String, String)>,
}

/// Collect `MOERL_*` pairs from the process environment.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = std::env::vars()
        .filter_map(|(k, v)| k.strip_prefix("MOERL_").map(|s| (s.to_string(), v)))
        .collect();
    pairs.sort();
    pairs
}

/// Build the effective config from preset, file, environment, and flags.
pub fn resolve(sources: &ConfigSources) -> Result<PipelineConfig> {
    let file_table: Option<toml::Table> = match &sources.file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            Some(text.parse::<toml::Table>().map_err(|e| {
                Error::Config(format!("{}: {e}", path.display()))
            })?)
        }
        None => None,
    };

    // Scale picks the preset, so it resolves first: flag > env > file.
    let mut scale = sources.scale;
    if scale.is_none() {
        if let Some((_, v)) = sources.env.iter().find(|(k, _)| k == "SCALE") {
            scale = Some(v.parse()?);
        }
    }
    if scale.is_none() {
        if let Some(v) = file_table.as_ref().and_then(|t| t.get("scale")) {
            let name = v.as_str().ok_or_else(|| {
                Error::Config(format!("scale: expected a string, got {v}"))
            })?;
            scale = Some(name.parse()?);
        }
    }
    let scale = scale.unwrap_or(Scale::Desk);

    let preset = PipelineConfig::preset(scale);
    let mut table = toml::Table::try_from(&preset)
        .map_err(|e| Error::Config(format!("preset serialization: {e}")))?;
    if let Some(file) = file_table {
        merge(&mut table, file);
    }
    for (key, raw) in &sources.env {
        if key == "SCALE" {
            continue; // consumed above
        }
        let (section, field) = env_key_path(key);
        let value = env_value(raw);
        match section {
            Some(s) => {
                let entry = table
                    .entry(s.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                if let toml::Value::Table(t) = entry {
                    t.insert(field, value);
                }
            }
            None => {
                table.insert(field, value);
            }
        }
    }
    // Scale was fixed above; keep the table consistent with it.
    table.insert("scale".into(), toml::Value::String(toml::Value::try_from(scale).unwrap().as_str().unwrap().to_string()));

    let mut config: PipelineConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(e.to_string()))?;
    if let Some(seed) = sources.seed {
        config.seed = seed;
    }
    if let Some(out) = &sources.out_dir {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_the_documented_scale_constants() {
        let desk = PipelineConfig::preset(Scale::Desk);
        assert_eq!(desk.patients, 2_000);
        assert_eq!(desk.dqn.steps, 20_000);
        assert_eq!(desk.gate.restarts, 100);
        assert_eq!(desk.eval.bootstrap_resamples, 200);

        let paper = PipelineConfig::preset(Scale::Paper);
        assert_eq!(paper.dqn.steps, 200_000);
        assert_eq!(paper.gate.restarts, 1_000);
        assert_eq!(paper.eval.bootstrap_resamples, 1_000);
        assert_eq!(paper.encoder.epochs, 50);
        assert_eq!(paper.k_neighbors, 300);
        assert_eq!(paper.discount, 0.99);
        desk.validate().unwrap();
        paper.validate().unwrap();
    }

    #[test]
    fn file_overrides_preset_and_env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[dqn]\nsteps = 5000\nbatch_size = 16\n").unwrap();
        let sources = ConfigSources {
            file: Some(path),
            env: vec![("DQN_STEPS".into(), "777".into())],
            ..Default::default()
        };
        let config = resolve(&sources).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.dqn.steps, 777); // env beats file
        assert_eq!(config.dqn.batch_size, 16); // file beats preset
        assert_eq!(config.dqn.r_max, 3.0); // preset survives
    }

    #[test]
    fn cli_flags_beat_everything() {
        let sources = ConfigSources {
            seed: Some(42),
            out_dir: Some(PathBuf::from("elsewhere")),
            env: vec![("SEED".into(), "9".into())],
            ..Default::default()
        };
        let config = resolve(&sources).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.out_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[dqn]\nstepz = 50\n").unwrap();
        let sources = ConfigSources { file: Some(path), ..Default::default() };
        let err = resolve(&sources).unwrap_err();
        assert!(err.to_string().contains("stepz"), "error names the key: {err}");
    }

    #[test]
    fn invalid_discount_names_the_field() {
        let sources = ConfigSources {
            env: vec![("DISCOUNT".into(), "1.5".into())],
            ..Default::default()
        };
        let err = resolve(&sources).unwrap_err();
        assert!(err.to_string().contains("discount"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn scale_resolves_from_env_and_file() {
        let sources = ConfigSources {
            env: vec![("SCALE".into(), "paper".into())],
            ..Default::default()
        };
        let config = resolve(&sources).unwrap();
        assert_eq!(config.scale, Scale::Paper);
        assert_eq!(config.dqn.steps, 200_000);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "scale = \"paper\"\n").unwrap();
        let config =
            resolve(&ConfigSources { file: Some(path), ..Default::default() }).unwrap();
        assert_eq!(config.scale, Scale::Paper);
        // CLI flag wins over both.
        let config = resolve(&ConfigSources {
            scale: Some(Scale::Desk),
            env: vec![("SCALE".into(), "paper".into())],
            ..Default::default()
        })
        .unwrap();
        assert_eq!(config.scale, Scale::Desk);
    }

    #[test]
    fn env_values_parse_with_toml_scalar_semantics() {
        assert_eq!(env_value("5000"), toml::Value::Integer(5000));
        assert_eq!(env_value("0.25"), toml::Value::Float(0.25));
        assert_eq!(env_value("true"), toml::Value::Boolean(true));
        assert_eq!(env_value("runs/x"), toml::Value::String("runs/x".into()));
        let (section, field) = env_key_path("DQN_PER_ALPHA");
        assert_eq!(section, Some("dqn"));
        assert_eq!(field, "per_alpha");
        let (section, field) = env_key_path("SPLIT_RATIO");
        assert_eq!(section, None);
        assert_eq!(field, "split_ratio");
    }

    #[test]
    fn missing_cohort_path_is_a_config_error() {
        let mut config = PipelineConfig::preset(Scale::Desk);
        config.cohort_csv = Some(PathBuf::from("/nonexistent/cohort.csv"));
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("cohort_csv"), "{err}");
    }

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let config = PipelineConfig::preset(Scale::Desk);
        let text = config.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.patients, config.patients);
        assert_eq!(back.dqn.steps, config.dqn.steps);
        assert_eq!(back.content_hash(), config.content_hash());
        // The hash moves when any value moves.
        let mut other = config.clone();
        other.seed = 1;
        assert_ne!(other.content_hash(), config.content_hash());
    }
}
