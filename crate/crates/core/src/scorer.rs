//! The learned criterion: a small regressor from per-parameter initial
//! features to the predicted surviving score.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::criteria::ScoreVector;
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::irp::{initial_gradient, initial_params, AutosDataset};
use crate::mask::{topk_mask, DensityTarget, MaskOptions, PruneMask};
use crate::nn::train::{self, OptimizerKind, TrainHyper, TrainingData};
use crate::nn::{self, Architecture, Batch, ParamVector};
use crate::seeds;
use crate::store::{ArrayData, Checkpoint, CheckpointError, PayloadKind, Persist};

const STD_FLOOR: f64 = 1e-12;
const INFER_CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FeatureMode {
    ParamOnly,
    GradOnly,
    #[default]
    ParamAndGrad,
}

impl FeatureMode {
    pub fn arity(self) -> usize {
        match self {
            FeatureMode::ParamOnly | FeatureMode::GradOnly => 1,
            FeatureMode::ParamAndGrad => 2,
        }
    }

    pub fn needs_grad(self) -> bool {
        self != FeatureMode::ParamOnly
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::ParamOnly => "param_only",
            FeatureMode::GradOnly => "grad_only",
            FeatureMode::ParamAndGrad => "param_and_grad",
        })
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param_only" => Ok(FeatureMode::ParamOnly),
            "grad_only" => Ok(FeatureMode::GradOnly),
            "param_and_grad" => Ok(FeatureMode::ParamAndGrad),
            _ => Err(Error::Config(format!("unknown feature mode {s:?}"))),
        }
    }
}

/// Per-column z-score statistics, fixed at training time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn raw_columns<'a>(theta0: &'a [f64], grad0: Option<&'a [f64]>, mode: FeatureMode) -> Result<Vec<&'a [f64]>> {
    let need_grad = || {
        grad0.ok_or_else(|| Error::Interface(format!("feature mode {mode} needs initial gradients")))
    };
    if let Some(g) = grad0 {
        if g.len() != theta0.len() {
            return Err(Error::Shape(format!("{} weights but {} gradients", theta0.len(), g.len())));
        }
    }
    Ok(match mode {
        FeatureMode::ParamOnly => vec![theta0],
        FeatureMode::GradOnly => vec![need_grad()?],
        FeatureMode::ParamAndGrad => vec![theta0, need_grad()?],
    })
}

/// Feature rows in `(θ₀, g₀)` column order, z-scored with `stats` or, when
/// absent, with statistics of the columns themselves (returned alongside).
pub fn build_features(
    theta0: &[f64],
    grad0: Option<&[f64]>,
    mode: FeatureMode,
    stats: Option<&FeatureStats>,
) -> Result<(Array2<f64>, FeatureStats)> {
    let cols = raw_columns(theta0, grad0, mode)?;
    let stats = match stats {
        Some(s) if s.mean.len() == cols.len() && s.std.len() == cols.len() => s.clone(),
        Some(s) => {
            return Err(Error::Interface(format!("stats cover {} columns, mode {mode} has {}", s.mean.len(), cols.len())))
        }
        None => {
            let mut mean = Vec::new();
            let mut std = Vec::new();
            for (j, c) in cols.iter().enumerate() {
                let n = c.len().max(1) as f64;
                let m = c.iter().sum::<f64>() / n;
                let mut s = (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
                if s < STD_FLOOR {
                    log::warn!("feature column {j} has zero variance; std floored at {STD_FLOOR:e}");
                    s = STD_FLOOR;
                }
                mean.push(m);
                std.push(s);
            }
            FeatureStats { mean, std }
        }
    };
    let mut out = Array2::zeros((theta0.len(), cols.len()));
    for (j, c) in cols.iter().enumerate() {
        for (dst, &x) in out.column_mut(j).iter_mut().zip(c.iter()) {
            *dst = (x - stats.mean[j]) / stats.std[j];
        }
    }
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorerHyper {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ScorerHyper {
    fn default() -> Self {
        Self { learning_rate: 0.01, batch_size: 1024, epochs: 10, hidden: vec![64, 64], seed: 0 }
    }
}

impl ScorerHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("scorer learning rate, batch size and epochs must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("scorer hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// A trained regressor with everything needed to score a fresh network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerModel {
    pub params: ParamVector<f32>,
    pub mode: FeatureMode,
    pub stats: FeatureStats,
    pub hyper: ScorerHyper,
    /// Mean training MSE of each epoch.
    pub train_mse: Vec<f64>,
    /// Free-form provenance (backbone, dataset sources).
    pub provenance: BTreeMap<String, String>,
}

struct FeatureTable {
    features: Array2<f32>,
    labels: Vec<f32>,
}

impl TrainingData for FeatureTable {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, rows: &[usize]) -> Batch {
        let features = self.features.select(ndarray::Axis(0), rows);
        let values = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::values(features, values).expect("rows and labels aligned")
    }
}

fn scorer_arch(arity: usize, hidden: &[usize]) -> Result<Architecture> {
    let mut widths = vec![arity];
    widths.extend(hidden);
    widths.push(1);
    Architecture::mlp(&widths, true)
}

/// Fits the regressor to the dataset's labels under mean squared error.
pub fn train_scorer(dataset: &AutosDataset, mode: FeatureMode, hyper: &ScorerHyper) -> Result<ScorerModel> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train a scorer on an empty dataset".into()));
    }
    let (features, stats) = build_features(&dataset.theta0, dataset.grad0.as_deref(), mode, None)?;
    let table = FeatureTable { features: features.mapv(|v| v as f32), labels: dataset.labels.iter().map(|&l| l as f32).collect() };
    let arch = scorer_arch(mode.arity(), &hyper.hidden)?;
    let init = nn::kaiming_init::<f32>(&arch, seeds::derive(hyper.seed, "scorer-init", 0));
    let train_hyper = TrainHyper {
        optimizer: OptimizerKind::Adam,
        learning_rate: hyper.learning_rate,
        batch_size: hyper.batch_size,
        epochs: hyper.epochs,
        weight_decay: 0.0,
        lr_drop_factor: 1.0,
        lr_drop_epochs: Vec::new(),
        momentum: 0.0,
        seed: seeds::derive(hyper.seed, "scorer-shuffle", 0),
    };
    let (params, history) = train::train(&init, &PruneMask::dense(&arch), &table, &train_hyper)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("backbone".to_string(), format!("mlp {arch}"));
    let sources: Vec<String> = dataset
        .sources
        .iter()
        .map(|s| format!("{}:{}:{}:N={}:d={}:seed={}", s.arch, s.data, s.criterion, s.iterations, s.final_density, s.seed))
        .collect();
    provenance.insert("sources".to_string(), sources.join(" + "));
    provenance.insert("records".to_string(), dataset.len().to_string());
    Ok(ScorerModel {
        params,
        mode,
        stats,
        hyper: hyper.clone(),
        train_mse: history.iter().map(|h| h.loss).collect(),
        provenance,
    })
}

impl ScorerModel {
    /// Predictions for raw (un-normalized) feature columns.
    pub fn predict(&self, theta0: &[f64], grad0: Option<&[f64]>) -> Result<Vec<f64>> {
        let (x, _) = build_features(theta0, grad0, self.mode, Some(&self.stats))?;
        let x = x.mapv(|v| v as f32);
        let dense = PruneMask::dense(self.params.architecture());
        let mut out = Vec::with_capacity(x.nrows());
        let rows: Vec<usize> = (0..x.nrows()).collect();
        for chunk in rows.chunks(INFER_CHUNK) {
            let y = nn::predict(&self.params, &dense, &x.select(ndarray::Axis(0), chunk))?;
            out.extend(y.column(0).iter().map(|&v| v as f64));
        }
        Ok(out)
    }
}

/// Predicted surviving scores for every position of `theta0`; ineligible
/// positions get the `-inf` sentinel.
pub fn score(model: &ScorerModel, theta0: &ParamVector<f32>, grad0: Option<&[f64]>, options: MaskOptions) -> Result<ScoreVector> {
    if let Some(g) = grad0 {
        if g.len() != theta0.len() {
            return Err(Error::Shape(format!("{} parameters but {} gradient entries", theta0.len(), g.len())));
        }
    }
    if model.mode.needs_grad() && grad0.is_none() {
        return Err(Error::Interface(format!("scorer mode {} needs initial gradients", model.mode)));
    }
    let eligible = PruneMask::ones(theta0.layout(), options).eligible();
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&eligible).filter(|(_, &e)| e).map(|(x, _)| *x).collect() };
    let theta = pick(&theta0.to_f64_vec());
    let grad = grad0.map(pick);
    let predicted = model.predict(&theta, grad.as_deref())?;
    let mut values = vec![f64::NEG_INFINITY; theta0.len()];
    let mut it = predicted.into_iter();
    for (v, &e) in values.iter_mut().zip(&eligible) {
        if e {
            *v = it.next().expect("one prediction per eligible position");
        }
    }
    Ok(ScoreVector::new(theta0.layout().clone(), values, format!("autos/{}", model.mode)))
}

/// Prunes a fresh network before any training: initialize, take one
/// gradient on a balanced batch, score, keep the top fraction.
pub fn prune_at_init(
    arch: &Architecture,
    data: &LabeledDataset,
    model: &ScorerModel,
    target: DensityTarget,
    seed: u64,
    score_batch_size: usize,
    options: MaskOptions,
) -> Result<(PruneMask, ParamVector<f32>)> {
    let theta0 = initial_params(arch, seed);
    let grad0 = if model.mode.needs_grad() {
        Some(initial_gradient(&theta0, data, score_batch_size, false, seeds::derive(seed, "grad0-batch", 0))?)
    } else {
        None
    };
    let scores = score(model, &theta0, grad0.as_deref(), options)?;
    Ok((topk_mask(&scores, target, options)?, theta0))
}

/// A class-balanced batch drawn the same way `prune_at_init` draws it.
pub fn pruning_batch(data: &LabeledDataset, size: usize, seed: u64) -> Result<Batch> {
    data::balanced_batch(data, size, seeds::derive(seed, "grad0-batch", 0))
}

impl Persist for ScorerModel {
    const KIND: PayloadKind = PayloadKind::Scorer;

    fn to_checkpoint(&self) -> Checkpoint {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut ck = Checkpoint::new(PayloadKind::Scorer)
            .meta("arch", self.params.architecture())
            .meta("feature_mode", self.mode)
            .meta("feature_mean", join(&self.stats.mean))
            .meta("feature_std", join(&self.stats.std))
            .meta("learning_rate", format!("{:?}", self.hyper.learning_rate))
            .meta("batch_size", self.hyper.batch_size)
            .meta("epochs", self.hyper.epochs)
            .meta("optimizer", "adam")
            .meta("loss", "mse")
            .meta("scorer_seed", self.hyper.seed)
            .meta("train_mse", join(&self.train_mse))
            .array("params", ArrayData::from_reals(self.params.values()));
        for (k, v) in &self.provenance {
            ck.metadata.insert(format!("provenance.{k}"), v.clone());
        }
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let floats = |key: &str| -> std::result::Result<Vec<f64>, CheckpointError> {
            let raw = ck.get_meta(key)?;
            raw.split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| CheckpointError::Invalid(format!("{key}={raw:?}"))))
                .collect()
        };
        let arch: Architecture = ck.parse_meta("arch")?;
        let params = ParamVector::from_values(&arch, ck.get_array("params")?.to_reals::<f32>("params")?)?;
        let mode: FeatureMode = ck.parse_meta("feature_mode")?;
        let stats = FeatureStats { mean: floats("feature_mean")?, std: floats("feature_std")? };
        if stats.mean.len() != mode.arity() || stats.std.len() != mode.arity() || arch.input_dim() != mode.arity() {
            return Err(CheckpointError::Invalid("scorer stats or input width disagree with feature mode".into()).into());
        }
        let widths = arch.widths();
        let hyper = ScorerHyper {
            learning_rate: ck.parse_meta("learning_rate")?,
            batch_size: ck.parse_meta("batch_size")?,
            epochs: ck.parse_meta("epochs")?,
            hidden: widths[1..widths.len() - 1].to_vec(),
            seed: ck.parse_meta("scorer_seed")?,
        };
        let provenance = ck
            .metadata
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("provenance.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self { params, mode, stats, hyper, train_mse: floats("train_mse")?, provenance })
    }
}
