//! Declarative run configuration (TOML). Unknown keys are hard errors and
//! every run emits a resolved snapshot of the config it actually used.

use crate::attacks::{AttackConfig, AttackKind};
use crate::certify::{CertifyConfig, Estimator};
use crate::data::{
    load_cifar_binary, make_synthetic, subsample, CorruptionKind, CorruptionSpec, Dataset,
    SyntheticKind,
};
use crate::error::{Error, Result};
use crate::layers::{Aggregation, ScaleSet};
use crate::train::TrainConfig;
use crate::zoo::{ArchitectureId, ModelSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA: &str = "equirobust-config-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub dataset: DatasetConfig,
    #[serde(rename = "model")]
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackGrid,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub corruptions: CorruptionSection,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_run_id() -> String {
    "run".into()
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/run")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "auto" uses `EQUIROBUST_DATA` when set, else the synthetic fallback;
    /// "cifar" requires it; "synthetic" never reads it.
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default = "default_kind")]
    pub kind: String, // synthetic kind: oriented_bars | scaled_blobs
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Class-balanced subsample size per class (0 = use everything).
    #[serde(default)]
    pub n_per_class: usize,
}

fn default_source() -> String {
    "auto".into()
}
fn default_kind() -> String {
    "oriented_bars".into()
}
fn default_n_train() -> usize {
    512
}
fn default_n_eval() -> usize {
    256
}
fn default_image_size() -> usize {
    32
}
fn default_num_classes() -> usize {
    4
}

impl Default for DatasetConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty dataset config")
    }
}

/// One model row; unset fields inherit architecture defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub architecture_id: String,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_plan: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_factors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_aggregation: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

fn default_depth() -> usize {
    4
}

impl ModelEntry {
    pub fn resolve(&self, num_classes: usize, in_channels: usize) -> Result<ModelSpec> {
        let arch = ArchitectureId::parse(&self.architecture_id)?;
        let mut spec = ModelSpec::new(arch, self.depth, num_classes, self.seed)?;
        spec.in_channels = in_channels;
        if let Some(plan) = &self.channel_plan {
            spec.channel_plan = plan.clone();
        }
        let agg = match self.scale_aggregation.as_deref() {
            None => None,
            Some("concat") => Some(Aggregation::Concat),
            Some("average") => Some(Aggregation::Average),
            Some(other) => {
                return Err(Error::Config(format!(
                    "unknown scale_aggregation `{other}` (expected concat|average)"
                )))
            }
        };
        if self.scale_factors.is_some() || agg.is_some() {
            spec.scale_set = ScaleSet::new(
                self.scale_factors
                    .clone()
                    .unwrap_or_else(ScaleSet::default_factors),
                agg.unwrap_or(Aggregation::Concat),
            )?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGrid {
    #[serde(default = "default_attack_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_attack_kinds() -> Vec<String> {
    vec!["fgsm".into(), "pgd".into()]
}
fn default_eps_grid() -> Vec<f64> {
    vec![0.01, 0.02, 0.03, 0.04]
}
fn default_pgd_steps() -> usize {
    20
}

impl Default for AttackGrid {
    fn default() -> Self {
        toml::from_str("").expect("empty attack config")
    }
}

impl AttackGrid {
    pub fn configs(&self) -> Result<Vec<AttackConfig>> {
        let eps0 = self.eps_grid.first().copied().unwrap_or(0.01).max(1e-9);
        self.kinds
            .iter()
            .map(|k| match k.as_str() {
                "fgsm" => Ok(AttackConfig::fgsm(eps0)),
                "pgd" => {
                    let mut c = AttackConfig::pgd_default(eps0, self.seed);
                    c.steps = self.pgd_steps;
                    c.step_size = eps0 / 8.0;
                    Ok(c)
                }
                other => Err(Error::Config(format!(
                    "unknown attack kind `{other}` (expected fgsm|pgd)"
                ))),
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_batches")]
    pub batches: usize,
    #[serde(default = "default_samples_per_batch")]
    pub samples_per_batch: usize,
    #[serde(default = "default_estimator")]
    pub estimator: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    /// Upper bound for the max-invariant-perturbation bisection.
    #[serde(default = "default_max_eps")]
    pub max_eps: f64,
}

fn default_radius() -> f64 {
    CertifyConfig::default().radius
}
fn default_batches() -> usize {
    CertifyConfig::default().batches
}
fn default_samples_per_batch() -> usize {
    CertifyConfig::default().samples_per_batch
}
fn default_estimator() -> String {
    "max_sample".into()
}
fn default_n_samples() -> usize {
    16
}
fn default_max_eps() -> f64 {
    0.5
}

impl Default for CertifySection {
    fn default() -> Self {
        toml::from_str("").expect("empty certify config")
    }
}

impl CertifySection {
    pub fn clever(&self) -> Result<CertifyConfig> {
        let estimator = match self.estimator.as_str() {
            "max_sample" => Estimator::MaxSample,
            "weibull_mle" => Estimator::WeibullMle,
            other => {
                return Err(Error::Config(format!(
                    "unknown estimator `{other}` (expected max_sample|weibull_mle)"
                )))
            }
        };
        let cfg = CertifyConfig {
            radius: self.radius,
            batches: self.batches,
            samples_per_batch: self.samples_per_batch,
            estimator,
            seed: self.seed,
            ..CertifyConfig::default()
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseSection {
    #[serde(default = "default_probe")]
    pub probe: usize,
    #[serde(default = "default_angle")]
    pub angle_deg: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_t1_tol")]
    pub theorem1_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probe() -> usize {
    16
}
fn default_angle() -> f64 {
    2.0
}
fn default_trials() -> usize {
    16
}
fn default_step() -> f64 {
    0.01
}
fn default_t1_tol() -> f64 {
    1e-8
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        toml::from_str("").expect("empty diagnose config")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    /// Corruption names, or the single entry "all".
    #[serde(default = "default_corruption_kinds")]
    pub kinds: Vec<String>,
    #[serde(default = "default_severities")]
    pub severities: Vec<u8>,
    /// FGSM budgets applied after corruption (corrupt-then-attack).
    #[serde(default = "default_corruption_eps")]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_corruption_kinds() -> Vec<String> {
    vec!["all".into()]
}
fn default_severities() -> Vec<u8> {
    vec![3]
}
fn default_corruption_eps() -> Vec<f64> {
    vec![0.01, 0.02, 0.03, 0.04]
}

impl Default for CorruptionSection {
    fn default() -> Self {
        toml::from_str("").expect("empty corruption config")
    }
}

impl CorruptionSection {
    pub fn specs(&self) -> Result<Vec<CorruptionSpec>> {
        let kinds: Vec<CorruptionKind> = if self.kinds.len() == 1 && self.kinds[0] == "all" {
            CorruptionKind::ALL.to_vec()
        } else {
            self.kinds
                .iter()
                .map(|k| CorruptionKind::parse(k))
                .collect::<Result<_>>()?
        };
        let mut specs = Vec::new();
        for &kind in &kinds {
            for &severity in &self.severities {
                specs.push(CorruptionSpec {
                    kind,
                    severity,
                    seed: self.seed,
                });
            }
        }
        Ok(specs)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::Config("at least one [[model]] is required".into()));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.resolve_specs()?;
        self.attack.configs()?;
        self.corruptions.specs()?;
        self.certify.clever()?;
        if self
            .corruptions
            .severities
            .iter()
            .any(|&s| !(1..=5).contains(&s))
        {
            return Err(Error::Config("severities must lie in 1..=5".into()));
        }
        match self.dataset.source.as_str() {
            "auto" | "cifar" | "synthetic" => {}
            other => {
                return Err(Error::Config(format!(
                    "unknown dataset source `{other}` (expected auto|cifar|synthetic)"
                )))
            }
        }
        synthetic_kind(&self.dataset.kind)?;
        Ok(())
    }

    pub fn resolve_specs(&self) -> Result<Vec<ModelSpec>> {
        let in_channels = 3;
        self.models
            .iter()
            .map(|m| {
                m.resolve(self.dataset.num_classes, in_channels)
                    .map_err(|e| Error::Config(e.to_string()))
            })
            .collect()
    }

    /// Apply a command-line seed override to every stochastic component.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seeds = vec![seed];
        self.attack.seed = seed;
        self.certify.seed = seed;
        self.diagnose.seed = seed;
        self.corruptions.seed = seed;
    }

    /// Write the resolved config the run actually used.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved-config.toml");
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("snapshot serialization: {e}")))?;
        std::fs::write(&path, format!("# schema: {CONFIG_SCHEMA}\n{text}"))?;
        Ok(path)
    }

    /// Load train and eval splits per the dataset section. Absent
    /// `EQUIROBUST_DATA` falls back to synthetic data with a logged warning.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let env = std::env::var("EQUIROBUST_DATA").ok();
        let use_cifar = match d.source.as_str() {
            "cifar" => {
                if env.is_none() {
                    return Err(Error::Config(
                        "dataset.source = \"cifar\" but EQUIROBUST_DATA is not set".into(),
                    ));
                }
                true
            }
            "synthetic" => false,
            _ => env.is_some(),
        };
        if !use_cifar {
            if d.source.as_str() == "auto" {
                eprintln!(
                    "warning: EQUIROBUST_DATA not set; falling back to synthetic `{}` data",
                    d.kind
                );
            }
            let kind = synthetic_kind(&d.kind)?;
            let train = make_synthetic(kind, d.n_train, d.image_size, d.num_classes, d.seed)?;
            let eval = make_synthetic(
                kind,
                d.n_eval,
                d.image_size,
                d.num_classes,
                d.seed.wrapping_add(1),
            )?;
            return Ok((train, eval));
        }
        let root = PathBuf::from(env.unwrap());
        let train_paths: Vec<PathBuf> = (1..=5)
            .map(|i| root.join(format!("data_batch_{i}.bin")))
            .filter(|p| p.exists())
            .collect();
        if train_paths.is_empty() {
            return Err(Error::Dataset(format!(
                "no data_batch_*.bin under {}",
                root.display()
            )));
        }
        let mut train = load_cifar_binary(&train_paths, d.num_classes)?;
        let test_path = root.join("test_batch.bin");
        let mut eval = if test_path.exists() {
            load_cifar_binary(&[test_path], d.num_classes)?
        } else {
            train.clone()
        };
        if d.n_per_class > 0 {
            train = subsample(&train, d.n_per_class, d.seed)?;
            let eval_per_class = (d.n_eval / d.num_classes).max(1);
            eval = subsample(&eval, eval_per_class, d.seed.wrapping_add(1))?;
        }
        Ok((train, eval))
    }
}

pub fn synthetic_kind(name: &str) -> Result<SyntheticKind> {
    match name {
        "oriented_bars" => Ok(SyntheticKind::OrientedBars),
        "scaled_blobs" => Ok(SyntheticKind::ScaledBlobs),
        other => Err(Error::Config(format!(
            "unknown synthetic kind `{other}` (expected oriented_bars|scaled_blobs)"
        ))),
    }
}

pub fn attack_kind_name(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
source = "synthetic"
num_classes = 4

[[model]]
architecture_id = "baseline"
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.attack.eps_grid, vec![0.01, 0.02, 0.03, 0.04]);
        let specs = cfg.resolve_specs().unwrap();
        assert_eq!(specs[0].depth, 4);
        assert_eq!(specs[0].num_classes, 4);
        assert_eq!(cfg.corruptions.specs().unwrap().len(), 8);
    }

    #[test]
    fn unknown_keys_are_errors_with_position() {
        let bad = format!("{MINIMAL}\n[train]\nepochz = 3\n");
        let err = toml::from_str::<RunConfig>(&bad).unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn seed_override_touches_every_component() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.override_seed(42);
        assert_eq!(cfg.train.seeds, vec![42]);
        assert_eq!(cfg.attack.seed, 42);
        assert_eq!(cfg.certify.seed, 42);
        assert_eq!(cfg.corruptions.seed, 42);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        let path = cfg.write_snapshot(dir.path()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# schema: {CONFIG_SCHEMA}")));
        let reread: RunConfig = toml::from_str(&text).unwrap();
        reread.validate().unwrap();
        assert_eq!(reread.attack.eps_grid, cfg.attack.eps_grid);
    }

    #[test]
    fn synthetic_fallback_loads_balanced_splits() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        let (train, eval) = cfg.load_datasets().unwrap();
        assert_eq!(train.len(), 512);
        assert_eq!(eval.len(), 256);
        assert_eq!(train.num_classes, 4);
        assert_ne!(train.digest(), eval.digest());
    }

    #[test]
    fn bad_values_are_config_errors() {
        let bad = MINIMAL.replace("baseline", "resnet");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let bad = format!("{MINIMAL}\n[corruptions]\nseverities = [9]\n");
        let cfg: RunConfig = toml::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }
}
