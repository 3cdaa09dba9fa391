//! Declarative experiment description, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackBudget;
use crate::data::DataFormat;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::EncoderArch;
use crate::pseudo_label::LabelerSchedule;

/// Environment variables with this prefix override config fields;
/// `__` separates nesting levels: `CURDA_ADAPT__EPOCHS=5` sets `adapt.epochs`.
pub const ENV_PREFIX: &str = "CURDA_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Source-robust model evaluated directly on the target domain.
    Sr,
    /// Source-robust model plus discriminator-based adaptation.
    SrUda,
    /// As `SrUda` with the KL robustness regularizer on target data.
    SrUdaRt,
    /// Contrastive robust source training plus the full adaptation objective.
    Curda,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sr => "SR",
            Method::SrUda => "SR+UDA",
            Method::SrUdaRt => "SR+UDA+RT",
            Method::Curda => "CURDA",
        }
    }

    pub fn preset(self) -> Switches {
        let off = Switches {
            use_con: false,
            use_saa: false,
            use_trade: false,
            use_dis: false,
            switch_encoders: true,
        };
        match self {
            Method::Sr => off,
            Method::SrUda => Switches { use_dis: true, ..off },
            Method::SrUdaRt => Switches {
                use_dis: true,
                use_trade: true,
                ..off
            },
            Method::Curda => Switches {
                use_con: true,
                use_saa: true,
                use_trade: true,
                use_dis: true,
                switch_encoders: true,
            },
        }
    }

    pub fn adapts(self) -> bool {
        self != Method::Sr
    }
}

/// Component switches; baselines fix them, CURDA allows leave-one-out ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Switches {
    pub use_con: bool,
    pub use_saa: bool,
    pub use_trade: bool,
    pub use_dis: bool,
    pub switch_encoders: bool,
}

/// One column of a comparison or ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Sr,
    SrUda,
    SrUdaRt,
    Curda,
    NoCon,
    NoSaa,
    NoTrade,
    NoDis,
    SourceLabelsOnly,
}

impl Arm {
    pub const BASELINES: [Arm; 4] = [Arm::Sr, Arm::SrUda, Arm::SrUdaRt, Arm::Curda];
    pub const ABLATIONS: [Arm; 6] = [
        Arm::NoCon,
        Arm::NoSaa,
        Arm::NoTrade,
        Arm::NoDis,
        Arm::SourceLabelsOnly,
        Arm::Curda,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Arm::Sr => "SR",
            Arm::SrUda => "SR+UDA",
            Arm::SrUdaRt => "SR+UDA+RT",
            Arm::Curda => "CURDA",
            Arm::NoCon => "w/o L_con",
            Arm::NoSaa => "w/o L_saa",
            Arm::NoTrade => "w/o L_trade",
            Arm::NoDis => "w/o L_dis",
            Arm::SourceLabelsOnly => "w s-lab gen",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Arm::Sr => "sr",
            Arm::SrUda => "sr_uda",
            Arm::SrUdaRt => "sr_uda_rt",
            Arm::Curda => "curda",
            Arm::NoCon => "no_con",
            Arm::NoSaa => "no_saa",
            Arm::NoTrade => "no_trade",
            Arm::NoDis => "no_dis",
            Arm::SourceLabelsOnly => "source_labels_only",
        }
    }

    pub fn method(self) -> Method {
        match self {
            Arm::Sr => Method::Sr,
            Arm::SrUda => Method::SrUda,
            Arm::SrUdaRt => Method::SrUdaRt,
            _ => Method::Curda,
        }
    }

    pub fn switches(self) -> Switches {
        let full = Method::Curda.preset();
        match self {
            Arm::NoCon => Switches { use_con: false, ..full },
            Arm::NoSaa => Switches { use_saa: false, ..full },
            Arm::NoTrade => Switches {
                use_trade: false,
                ..full
            },
            Arm::NoDis => Switches { use_dis: false, ..full },
            Arm::SourceLabelsOnly => Switches {
                switch_encoders: false,
                ..full
            },
            other => other.method().preset(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Identifier used for table columns, e.g. `MNIST->USPS`.
    pub pair_id: String,
    pub format: DataFormat,
    pub source_train: PathBuf,
    #[serde(default)]
    pub source_test: Option<PathBuf>,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
    pub num_classes: usize,
    #[serde(default = "DataConfig::default_side")]
    pub height: usize,
    #[serde(default = "DataConfig::default_side")]
    pub width: usize,
    #[serde(default = "DataConfig::default_channels")]
    pub channels: usize,
    /// Keep only the first `n` source training samples.
    #[serde(default)]
    pub source_limit: Option<usize>,
    #[serde(default)]
    pub target_limit: Option<usize>,
}

impl DataConfig {
    fn default_side() -> usize {
        28
    }

    fn default_channels() -> usize {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderArch,
    #[serde(default = "ModelConfig::default_hidden")]
    pub discriminator_hidden: usize,
}

impl ModelConfig {
    fn default_hidden() -> usize {
        500
    }
}

/// Optimizer schedule of one stage. The learning rate drops from `lr` to
/// `lr_late` at epoch `lr_drop_epoch`, if given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub lr_drop_epoch: Option<usize>,
    #[serde(default)]
    pub lr_late: Option<f64>,
    #[serde(default = "StageSchedule::default_momentum")]
    pub momentum: f64,
    #[serde(default = "StageSchedule::default_weight_decay")]
    pub weight_decay: f64,
    /// Write a resumable checkpoint every `n` epochs; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Source stage only: the training attack radius grows linearly to its
    /// full value over this many epochs. 0 uses the full radius throughout.
    #[serde(default)]
    pub epsilon_warmup_epochs: usize,
}

impl StageSchedule {
    fn default_momentum() -> f64 {
        0.9
    }

    fn default_weight_decay() -> f64 {
        5e-4
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match (self.lr_drop_epoch, self.lr_late) {
            (Some(drop), Some(late)) if epoch >= drop => late,
            _ => self.lr,
        }
    }

    /// `budget` with its radius scaled for `epoch` of the warmup.
    pub fn warmed_budget(&self, budget: &AttackBudget, epoch: usize) -> AttackBudget {
        if self.epsilon_warmup_epochs == 0 {
            return *budget;
        }
        let frac = ((epoch + 1) as f64 / self.epsilon_warmup_epochs as f64).min(1.0);
        let epsilon = budget.epsilon * frac;
        AttackBudget {
            epsilon,
            step_size: budget.step_size.min(epsilon),
            ..*budget
        }
    }

    fn validate(&self, stage: &str) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("{stage}: {m}")));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return err(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.lr_late.is_some_and(|l| l.is_nan() || l <= 0.0) {
            return err("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// PGD used inside robust source training.
    pub train: AttackBudget,
    /// PGD used for robustness evaluation.
    pub eval: AttackBudget,
    /// KL-ascent generator used during adaptation.
    pub label_free: AttackBudget,
}

impl AttackConfig {
    pub fn binary_images() -> Self {
        Self {
            train: AttackBudget::binary_images(true),
            eval: AttackBudget::binary_images(false),
            label_free: AttackBudget::binary_images(true),
        }
    }
}

/// Pair selection for the source contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PairConfig {
    /// Subsample at most this many pairs per batch; all pairs when absent.
    #[serde(default)]
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Classes written by `export-embeddings`.
    #[serde(default = "EvalConfig::default_classes")]
    pub embedding_classes: Vec<usize>,
    #[serde(default = "EvalConfig::default_per_class")]
    pub embedding_per_class: usize,
}

impl EvalConfig {
    fn default_classes() -> Vec<usize> {
        vec![4, 5, 9]
    }

    fn default_per_class() -> usize {
        50
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedding_classes: Self::default_classes(),
            embedding_per_class: Self::default_per_class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub arms: Vec<Arm>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub source: StageSchedule,
    pub adapt: StageSchedule,
    pub attack: AttackConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub pairs: PairConfig,
    #[serde(default)]
    pub labeler: LabelerSchedule,
    /// Defaults to the method's preset when absent.
    #[serde(default)]
    pub ablation: Option<Switches>,
    /// Set by sweeps; names the table column this run fills.
    #[serde(default)]
    pub arm: Option<Arm>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies `CURDA_*` environment overrides and the
    /// `key.path=value` entries in `overrides`, in that order.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let env: Vec<String> = std::env::vars()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                Some(format!("{}={v}", rest.to_lowercase().replace("__", ".")))
            })
            .collect();
        for assignment in env.iter().chain(overrides) {
            apply_override(&mut value, assignment)?;
        }
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn switches(&self) -> Switches {
        self.ablation.unwrap_or_else(|| self.method.preset())
    }

    /// Row label in result tables.
    pub fn tag(&self) -> String {
        match self.arm {
            Some(arm) => arm.tag().to_string(),
            None => self.method.as_str().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.model.encoder.in_channels != self.data.channels
            || self.model.encoder.height != self.data.height
            || self.model.encoder.width != self.data.width
        {
            return Err(Error::Config("encoder input shape differs from data shape".into()));
        }
        self.model.encoder.validate()?;
        if self.model.discriminator_hidden == 0 {
            return Err(Error::Config("discriminator_hidden must be positive".into()));
        }
        self.source.validate("source")?;
        self.adapt.validate("adapt")?;
        self.attack.train.validate()?;
        self.attack.eval.validate()?;
        self.attack.label_free.validate()?;
        self.losses.validate()?;
        self.labeler.validate()?;
        if let Some(sw) = self.ablation {
            if self.method != Method::Curda && sw != self.method.preset() {
                return Err(Error::Config(format!(
                    "method {} fixes its components; ablation switches are only legal for CURDA",
                    self.method.as_str()
                )));
            }
        }
        if let Some(arm) = self.arm {
            if arm.method() != self.method || arm.switches() != self.switches() {
                return Err(Error::Config(format!(
                    "arm {:?} inconsistent with method/switches",
                    arm
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.arms.is_empty() {
                return Err(Error::Config("sweep needs at least one arm".into()));
            }
        }
        Ok(())
    }

    /// Child configuration for one sweep arm and seed.
    pub fn for_arm(&self, arm: Arm, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.method = arm.method();
        cfg.ablation = Some(arm.switches());
        cfg.arm = Some(arm);
        cfg.seed = seed;
        cfg.sweep = None;
        cfg.name = format!("{}-{}-seed{}", self.name, arm.slug(), seed);
        cfg
    }

    /// Hex digest of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Digest of everything the source stage depends on.
    pub fn source_fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct SourceKey<'a> {
            data: &'a DataConfig,
            encoder: &'a EncoderArch,
            schedule: &'a StageSchedule,
            attack: &'a AttackBudget,
            lambda_con: f64,
            margin_source: f64,
            pairs: &'a PairConfig,
            use_con: bool,
            seed: u64,
        }
        let key = SourceKey {
            data: &self.data,
            encoder: &self.model.encoder,
            schedule: &self.source,
            attack: &self.attack.train,
            lambda_con: self.losses.lambda_con,
            margin_source: self.losses.margin_source,
            pairs: &self.pairs,
            use_con: self.switches().use_con,
            seed: self.seed,
        };
        digest(&serde_json::to_vec(&key).expect("key serializes"))
    }
}

fn digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(&h.finalize()[..8])
}

/// Applies `a.b.c=value` to a TOML tree. The value is parsed as a TOML
/// literal and falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} lacks '='")))?;
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?;
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("override path {path:?} crosses a non-table")))?
        .insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
name = "unit"
method = "curda"
seed = 3

[data]
pair_id = "A->B"
format = "idx"
source_train = "s/train"
target_train = "t/train"
target_test = "t/test"
num_classes = 10

[model.encoder]
in_channels = 1
height = 28
width = 28
conv1 = 4
conv2 = 8
kernel = 5
feature_dim = 16

[source]
epochs = 2
batch_size = 32
lr = 0.01

[adapt]
epochs = 1
batch_size = 32
lr = 0.01

[attack.train]
epsilon = 0.3
step_size = 0.01
num_steps = 20
random_start = true

[attack.eval]
epsilon = 0.3
step_size = 0.01
num_steps = 20
random_start = false

[attack.label_free]
epsilon = 0.3
step_size = 0.01
num_steps = 20
random_start = true
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.losses, LossWeights::default());
        assert_eq!(cfg.labeler.tau, 20);
        assert_eq!(cfg.source.momentum, 0.9);
        assert_eq!(cfg.switches(), Method::Curda.preset());
        assert_eq!(cfg.model.discriminator_hidden, 500);
    }

    #[test]
    fn baselines_reject_custom_switches() {
        let mut cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        cfg.method = Method::SrUda;
        cfg.ablation = Some(Method::Curda.preset());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.ablation = Some(Method::SrUda.preset());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut v: toml::Value = toml::from_str(SAMPLE).unwrap();
        apply_override(&mut v, "adapt.epochs=7").unwrap();
        apply_override(&mut v, "name=renamed").unwrap();
        apply_override(&mut v, "labeler.p_pseudo=0.8").unwrap();
        apply_override(&mut v, "labeler.tau=5").unwrap();
        let cfg: ExperimentConfig = v.try_into().unwrap();
        assert_eq!(cfg.adapt.epochs, 7);
        assert_eq!(cfg.name, "renamed");
        assert_eq!(cfg.labeler.p_pseudo, 0.8);
    }

    #[test]
    fn table2_arms_are_distinct() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let tags: std::collections::HashSet<_> = Arm::ABLATIONS
            .iter()
            .map(|&a| {
                let c = cfg.for_arm(a, 0);
                c.validate().unwrap();
                c.tag()
            })
            .collect();
        assert_eq!(tags.len(), 6);
    }

    #[test]
    fn fingerprints_track_content() {
        let a = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.adapt.epochs += 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
        // adaptation settings do not touch the source stage
        assert_eq!(a.source_fingerprint(), b.source_fingerprint());
        b.seed += 1;
        assert_ne!(a.source_fingerprint(), b.source_fingerprint());
    }

    #[test]
    fn lr_schedule_drops() {
        let s = StageSchedule {
            epochs: 10,
            batch_size: 8,
            lr: 0.01,
            lr_drop_epoch: Some(6),
            lr_late: Some(0.001),
            momentum: 0.9,
            weight_decay: 0.0,
            checkpoint_every: 0,
            epsilon_warmup_epochs: 3,
        };
        assert_eq!(s.lr_at(5), 0.01);
        assert_eq!(s.lr_at(6), 0.001);
        let full = AttackBudget::binary_images(true);
        assert!((s.warmed_budget(&full, 0).epsilon - 0.1).abs() < 1e-12);
        assert_eq!(s.warmed_budget(&full, 2), full);
        assert_eq!(s.warmed_budget(&full, 9), full);
    }
}
