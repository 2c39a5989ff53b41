//! One TOML config drives every subcommand. Missing sections and fields
//! fall back to desk-scale defaults; `--set dotted.key=value` overrides
//! apply on top of the file before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use fprnet_core::metrics::Connectivity;
use fprnet_core::networks::NetConfig;
use fprnet_core::phantom::CorpusConfig;
use fprnet_core::preprocess::{DataStats, PreprocessConfig, Window};
use fprnet_core::pretrain::PretrainPlan;
use fprnet_core::trainer::{ModuleKind, OptimHyper, TrainPlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad override `{0}`, expected dotted.key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsSection,
    pub phantom: PhantomSection,
    pub preprocess: PreprocessSection,
    pub net: NetSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub fusion: FusionSection,
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus_dir: "corpus".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub studies: usize,
    pub healthy_mix: f64,
    pub seed: u64,
    pub extents: (usize, usize, usize),
    pub spacing_mm: (f64, f64, f64),
    pub background_suv: f64,
    pub noise_sigma: f64,
    pub soft_tissue_hu: f64,
    pub bone_shell: bool,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            studies: 20,
            healthy_mix: 0.1,
            seed: 7,
            extents: c.extents,
            spacing_mm: c.spacing_mm,
            background_suv: c.background_suv,
            noise_sigma: c.noise_sigma,
            soft_tissue_hu: c.soft_tissue_hu,
            bone_shell: c.bone_shell,
        }
    }
}

impl PhantomSection {
    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            extents: self.extents,
            spacing_mm: self.spacing_mm,
            background_suv: self.background_suv,
            noise_sigma: self.noise_sigma,
            soft_tissue_hu: self.soft_tissue_hu,
            bone_shell: self.bone_shell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub suv_low: f64,
    pub suv_high: f64,
    pub hu_low: f64,
    pub hu_high: f64,
    pub patch_xy: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            suv_low: 0.0,
            suv_high: 14.25,
            hu_low: -800.0,
            hu_high: 400.0,
            patch_xy: 32,
        }
    }
}

impl PreprocessSection {
    pub fn suv_window(&self) -> Window {
        Window::new(self.suv_low, self.suv_high)
    }

    pub fn core_config(&self, pet_dataset_stats: Option<DataStats>) -> PreprocessConfig {
        PreprocessConfig {
            suv_window: self.suv_window(),
            hu_window: Window::new(self.hu_low, self.hu_high),
            patch_xy: self.patch_xy,
            pet_dataset_stats,
            crop_offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            base_channels: 4,
            depth: 2,
        }
    }
}

impl NetSection {
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            base_channels: self.base_channels,
            depth: self.depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// When true, `train-gsm` initializes its encoder from the pretrain
    /// checkpoint.
    pub enabled: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_pairs: usize,
    pub temperature: f64,
    pub proj_dim: usize,
    pub lr_max: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainPlan::new(0);
        Self {
            enabled: true,
            seed: 29,
            epochs: p.epochs,
            batch_pairs: p.batch_pairs,
            temperature: p.temperature,
            proj_dim: p.proj_dim,
            lr_max: 5e-4,
        }
    }
}

impl PretrainSection {
    pub fn plan(&self) -> PretrainPlan {
        let mut plan = PretrainPlan::new(self.seed);
        plan.epochs = self.epochs;
        plan.batch_pairs = self.batch_pairs;
        plan.temperature = self.temperature;
        plan.proj_dim = self.proj_dim;
        plan.hyper.lr_max = self.lr_max;
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    pub total_epochs: usize,
    pub augment: bool,
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub stop_window: usize,
    pub stop_rel_tol: f64,
    /// Studies used for training: the first `train_count` in manifest
    /// order; 0 means all of them.
    pub train_count: usize,
    /// Tag baked into checkpoint and history file names, e.g. a fold id.
    pub model_id: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = TrainPlan::new(ModuleKind::Gsm, 0);
        let h = OptimHyper::default();
        Self {
            seed: 11,
            batch_size: p.batch_size,
            total_epochs: p.total_epochs,
            augment: p.augment,
            lr_max: h.lr_max,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            stop_window: p.stop_window,
            stop_rel_tol: p.stop_rel_tol,
            train_count: 0,
            model_id: "cv0".into(),
        }
    }
}

impl TrainSection {
    pub fn plan(&self, kind: ModuleKind) -> TrainPlan {
        let mut plan = TrainPlan::new(kind, self.seed);
        plan.batch_size = self.batch_size;
        plan.total_epochs = self.total_epochs;
        plan.augment = self.augment;
        plan.hyper = OptimHyper {
            lr_max: self.lr_max,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        };
        plan.stop_window = self.stop_window;
        plan.stop_rel_tol = self.stop_rel_tol;
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub w_ext: f64,
    /// Directory of external per-study probability volumes, `<id>.nii`.
    pub external_dir: Option<PathBuf>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            w_ext: 0.35,
            external_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub connectivity: u8,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { connectivity: 26 }
    }
}

impl MetricsSection {
    pub fn connectivity(&self) -> Result<Connectivity, ConfigError> {
        Connectivity::from_code(self.connectivity).ok_or_else(|| {
            ConfigError::Invalid(format!(
                "metrics.connectivity must be 6, 18 or 26, got {}",
                self.connectivity
            ))
        })
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.fusion.w_ext) {
            return Err(ConfigError::Invalid(format!(
                "fusion.w_ext must be in [0, 1], got {}",
                self.fusion.w_ext
            )));
        }
        self.metrics.connectivity()?;
        if self.train.model_id.is_empty()
            || !self
                .train
                .model_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(ConfigError::Invalid(format!(
                "train.model_id `{}` must be non-empty [A-Za-z0-9_-]",
                self.train.model_id
            )));
        }
        Ok(())
    }
}

/// Parses the file (when given), applies overrides, validates.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig, ConfigError> {
    let mut table: toml::Table = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|source| ConfigError::Unreadable {
                path: p.to_path_buf(),
                source,
            })?
            .parse()?,
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let cfg: PipelineConfig = toml::Value::Table(table).try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(spec.into()))?;
    let (key, raw) = (key.trim(), raw.trim());
    let segments: Vec<&str> = key.split('.').collect();
    if key.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(ConfigError::BadOverride(spec.into()));
    }
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{spec}: `{seg}` is not a table")))?;
    }
    current.insert(segments[segments.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

/// Values are read as TOML literals where possible, else as strings, so
/// `seed=7`, `w_ext=0.4`, `augment=false`, `extents=[16,16,8]` and bare
/// paths all work unquoted.
fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Hash of the effective config's canonical serialization; recorded in run
/// logs so a run can be tied to its exact configuration.
pub fn config_hash(cfg: &PipelineConfig) -> String {
    let text = toml::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_hash(&cfg), config_hash(&back));
        assert_eq!(config_hash(&cfg).len(), 64);
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = load(
            None,
            &[
                "train.seed=99".to_string(),
                "fusion.w_ext=0.5".to_string(),
                "phantom.extents=[16, 16, 8]".to_string(),
                "paths.corpus_dir=elsewhere".to_string(),
                "pretrain.enabled=false".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.fusion.w_ext, 0.5);
        assert_eq!(cfg.phantom.extents, (16, 16, 8));
        assert_eq!(cfg.paths.corpus_dir, PathBuf::from("elsewhere"));
        assert!(!cfg.pretrain.enabled);
        assert_ne!(config_hash(&cfg), config_hash(&PipelineConfig::default()));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            load(None, &["no-equals".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
        assert!(matches!(
            load(None, &["train..seed=1".to_string()]),
            Err(ConfigError::BadOverride(_))
        ));
        // Unknown keys are config errors, not silently ignored.
        assert!(matches!(
            load(None, &["train.sede=1".to_string()]),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            load(None, &["fusion.w_ext=1.5".to_string()]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            load(None, &["metrics.connectivity=8".to_string()]),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn file_and_overrides_compose() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[train]\nseed = 5\nbatch_size = 4\n").unwrap();
        let cfg = load(Some(&path), &["train.seed=6".to_string()]).unwrap();
        assert_eq!(cfg.train.seed, 6);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.total_epochs, TrainSection::default().total_epochs);
        assert!(matches!(
            load(Some(&dir.path().join("missing.toml")), &[]),
            Err(ConfigError::Unreadable { .. })
        ));
    }
}
