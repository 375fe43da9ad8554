//! Experiment configuration: a TOML file with sections, every key unique
//! across sections so that each one doubles as a `--key value` flag.
//!
//! Precedence is flag > file > default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::criteria::{Criterion, NpbConfig, SnipVariant};
use crate::error::{Error, Result};
use crate::irp::IrpConfig;
use crate::mask::{DensityTarget, Eligibility, MaskOptions, MaskScope};
use crate::nn::train::{OptimizerKind, TrainHyper};
use crate::nn::Architecture;
use crate::scorer::{FeatureMode, ScorerHyper};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    /// Let pruning touch biases as well as weights.
    pub include_biases: bool,
    pub scope: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { arch: "784-300-100-10".into(), include_biases: false, scope: "global".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `mnist` or `blobs`.
    pub dataset: String,
    pub data_dir: String,
    /// Shift and scale MNIST pixels by the training-set mean and std.
    pub standardize: bool,
    /// Use only the first `n` training examples; 0 keeps all.
    pub train_limit: usize,
    pub score_batch_size: usize,
    pub blob_classes: usize,
    pub blob_train_per_class: usize,
    pub blob_test_per_class: usize,
    pub blob_separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: "mnist".into(),
            data_dir: "data/mnist".into(),
            standardize: true,
            train_limit: 0,
            score_batch_size: 512,
            blob_classes: 10,
            blob_train_per_class: 100,
            blob_test_per_class: 50,
            blob_separation: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub criterion: String,
    pub density: f64,
    pub snip_variant: String,
    pub npb_alpha: f64,
    /// Keep the lowest `-θ⊙Hg` instead of the highest.
    pub grasp_invert: bool,
    /// Empty means `<out_dir>/scorer.aspr`.
    pub scorer_path: String,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            criterion: "snip".into(),
            density: 0.05,
            snip_variant: "grad_only".into(),
            npb_alpha: 0.5,
            grasp_invert: false,
            scorer_path: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrpSection {
    pub irp_criterion: String,
    pub iterations: usize,
    pub final_density: f64,
    /// Training epochs per round.
    pub irp_epochs: usize,
    /// Train each round on the first `n` examples; 0 keeps all.
    pub irp_train_subset: usize,
    pub full_data_grad: bool,
    pub keep_masks: bool,
    /// Empty means `<out_dir>/autos_dataset.aspr`.
    pub dataset_path: String,
}

impl Default for IrpSection {
    fn default() -> Self {
        Self {
            irp_criterion: "snip".into(),
            iterations: 20,
            final_density: 0.01,
            irp_epochs: 5,
            irp_train_subset: 0,
            full_data_grad: false,
            keep_masks: false,
            dataset_path: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub feature_mode: String,
    pub scorer_lr: f64,
    pub scorer_batch_size: usize,
    pub scorer_epochs: usize,
    pub scorer_hidden: Vec<usize>,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            feature_mode: "param_and_grad".into(),
            scorer_lr: 0.01,
            scorer_batch_size: 1024,
            scorer_epochs: 10,
            scorer_hidden: vec![64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            optimizer: h.optimizer.to_string(),
            learning_rate: h.learning_rate,
            batch_size: h.batch_size,
            epochs: h.epochs,
            weight_decay: h.weight_decay,
            lr_drop_factor: h.lr_drop_factor,
            lr_drop_epochs: h.lr_drop_epochs,
            momentum: h.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub densities: Vec<f64>,
    pub criteria: Vec<String>,
    pub sweep_seeds: usize,
    pub jobs: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            densities: vec![0.2, 0.1, 0.05, 0.02],
            criteria: vec!["random".into(), "magnitude".into(), "snip".into()],
            sweep_seeds: 3,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CccSection {
    /// Independent seed pairs per table cell.
    pub ccc_seed_pairs: usize,
}

impl Default for CccSection {
    fn default() -> Self {
        Self { ccc_seed_pairs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelSection,
    pub data: DataSection,
    pub prune: PruneSection,
    pub irp: IrpSection,
    pub scorer: ScorerSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub ccc: CccSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: "runs/default".into(),
            model: ModelSection::default(),
            data: DataSection::default(),
            prune: PruneSection::default(),
            irp: IrpSection::default(),
            scorer: ScorerSection::default(),
            train: TrainSection::default(),
            sweep: SweepSection::default(),
            ccc: CccSection::default(),
        }
    }
}

/// One settable key with its section (empty for top level) and rendered default.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyInfo {
    pub section: String,
    pub key: String,
    pub default: String,
}

/// Criterion name as used in configs; "dense" means no pruning.
pub fn parse_criterion(name: &str) -> Result<Option<Criterion>> {
    if name == "dense" {
        Ok(None)
    } else {
        name.parse().map(Some)
    }
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `raw` into the same TOML type as `like`. Arrays are comma separated.
fn parse_like(like: &toml::Value, raw: &str, key: &str) -> Result<toml::Value> {
    let bad = |what: &str| Error::Config(format!("--{key}: expected {what}, got {raw:?}"));
    Ok(match like {
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        toml::Value::Integer(_) => toml::Value::Integer(raw.trim().parse().map_err(|_| bad("an integer"))?),
        toml::Value::Float(_) => toml::Value::Float(raw.trim().parse().map_err(|_| bad("a number"))?),
        toml::Value::Boolean(_) => toml::Value::Boolean(raw.trim().parse().map_err(|_| bad("true or false"))?),
        toml::Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(toml::Value::String(String::new()));
            let parts = raw.split(',').map(str::trim).filter(|p| !p.is_empty());
            toml::Value::Array(parts.map(|p| parse_like(&proto, p, key)).collect::<Result<_>>()?)
        }
        _ => return Err(bad("a scalar")),
    })
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies only the keys present in `text` on top of `self`.
    pub fn overlay_toml_str(&mut self, text: &str) -> Result<()> {
        Self::from_toml_str(text)?;
        let file: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
        let mut table = self.as_table();
        for (name, value) in file {
            match (value, table.get_mut(&name)) {
                (toml::Value::Table(section), Some(toml::Value::Table(dst))) => dst.extend(section),
                (v, _) => {
                    table.insert(name, v);
                }
            }
        }
        *self = toml::Value::Table(table).try_into().map_err(|e| Error::Config(format!("config file: {e}")))?;
        Ok(())
    }

    pub fn overlay_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.overlay_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    fn as_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("config always serializes")
    }

    /// Every settable key, in section order.
    pub fn keys(&self) -> Vec<KeyInfo> {
        let mut out = Vec::new();
        for (name, value) in self.as_table() {
            match value {
                toml::Value::Table(section) => {
                    for (key, v) in section {
                        out.push(KeyInfo { section: name.clone(), key, default: render(&v) });
                    }
                }
                v => out.push(KeyInfo { section: String::new(), key: name, default: render(&v) }),
            }
        }
        out
    }

    /// Overrides one key from its textual form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut table = self.as_table();
        let slot = if table.get(key).is_some_and(|v| !v.is_table()) {
            table.get_mut(key)
        } else {
            table.iter_mut().filter_map(|(_, v)| v.as_table_mut()).find_map(|s| s.get_mut(key))
        };
        let slot = slot.ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        *slot = parse_like(slot, raw, key)?;
        *self = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("--{key}: {e}")))?;
        Ok(())
    }

    /// Full-scale training budgets (100 epochs per run and per IRP round).
    /// Long-running.
    pub fn paper_scale(&mut self) {
        self.train.epochs = 100;
        self.irp.irp_epochs = 100;
    }

    /// First 16 hex digits of SHA-256 over the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.mask_options()?;
        self.train_hyper()?.validate()?;
        self.irp_config()?.validate()?;
        self.scorer_hyper()?.validate()?;
        self.criterion()?;
        self.density_target()?;
        self.npb()?;
        self.feature_mode()?;
        if !matches!(self.data.dataset.as_str(), "mnist" | "blobs") {
            return Err(Error::Config(format!("unknown dataset {:?} (mnist or blobs)", self.data.dataset)));
        }
        for c in &self.sweep.criteria {
            parse_criterion(c)?;
        }
        for &d in &self.sweep.densities {
            DensityTarget::new(d)?;
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.model.arch.parse()
    }

    pub fn mask_options(&self) -> Result<MaskOptions> {
        Ok(MaskOptions {
            scope: self.model.scope.parse::<MaskScope>()?,
            eligibility: if self.model.include_biases { Eligibility::All } else { Eligibility::WeightsOnly },
        })
    }

    /// `None` for "dense" (no pruning).
    pub fn criterion(&self) -> Result<Option<Criterion>> {
        parse_criterion(&self.prune.criterion)
    }

    pub fn density_target(&self) -> Result<DensityTarget> {
        DensityTarget::new(self.prune.density)
    }

    pub fn snip_variant(&self) -> Result<SnipVariant> {
        self.prune.snip_variant.parse()
    }

    pub fn npb(&self) -> Result<NpbConfig> {
        NpbConfig::new(self.prune.npb_alpha)
    }

    pub fn feature_mode(&self) -> Result<FeatureMode> {
        self.scorer.feature_mode.parse()
    }

    /// Training settings for run `purpose`/`index`, seeded from the master seed.
    pub fn train_hyper_for(&self, purpose: &str, index: u64) -> Result<TrainHyper> {
        let t = &self.train;
        Ok(TrainHyper {
            optimizer: t.optimizer.parse::<OptimizerKind>()?,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            weight_decay: t.weight_decay,
            lr_drop_factor: t.lr_drop_factor,
            lr_drop_epochs: t.lr_drop_epochs.clone(),
            momentum: t.momentum,
            seed: seeds::derive(self.seed, purpose, index),
        })
    }

    pub fn train_hyper(&self) -> Result<TrainHyper> {
        self.train_hyper_for("train", 0)
    }

    pub fn irp_config(&self) -> Result<IrpConfig> {
        let mut train = self.train_hyper()?;
        train.epochs = self.irp.irp_epochs;
        Ok(IrpConfig {
            criterion: self.irp.irp_criterion.parse()?,
            iterations: self.irp.iterations,
            final_density: self.irp.final_density,
            train,
            seed: seeds::derive(self.seed, "irp", 0),
            score_batch_size: self.data.score_batch_size,
            snip_variant: self.snip_variant()?,
            mask_options: self.mask_options()?,
            full_data_grad: self.irp.full_data_grad,
            train_subset: (self.irp.irp_train_subset > 0).then_some(self.irp.irp_train_subset),
            keep_masks: self.irp.keep_masks,
        })
    }

    pub fn scorer_hyper(&self) -> Result<ScorerHyper> {
        Ok(ScorerHyper {
            learning_rate: self.scorer.scorer_lr,
            batch_size: self.scorer.scorer_batch_size,
            epochs: self.scorer.scorer_epochs,
            hidden: self.scorer.scorer_hidden.clone(),
            seed: seeds::derive(self.seed, "scorer", 0),
        })
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        Path::new(&self.out_dir).join(file)
    }

    pub fn dataset_path(&self) -> PathBuf {
        if self.irp.dataset_path.is_empty() {
            self.out_path("autos_dataset.aspr")
        } else {
            PathBuf::from(&self.irp.dataset_path)
        }
    }

    pub fn scorer_path(&self) -> PathBuf {
        if self.prune.scorer_path.is_empty() {
            self.out_path("scorer.aspr")
        } else {
            PathBuf::from(&self.prune.scorer_path)
        }
    }
}
