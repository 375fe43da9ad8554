//! Iterative rewind pruning: train, score, prune, rewind, repeat.
//!
//! Each parameter is labeled with the fraction of rounds it survives. The
//! labeled rows, keyed by initial weight and initial gradient, form the
//! training set for the learned scorer.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::criteria::{self, Criterion, ScoreVector, SnipVariant};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::mask::{refine_mask, DensityTarget, MaskOptions, PruneMask};
use crate::metrics;
use crate::nn::train::{self, TrainHyper, TrainingData};
use crate::nn::{self, kaiming_init, Architecture, ParamVector};
use crate::seeds;
use crate::store::{ArrayData, Checkpoint, CheckpointError, PayloadKind, Persist};

/// Rows per chunk when averaging the gradient over a whole dataset.
const GRAD_CHUNK: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct IrpConfig {
    pub criterion: Criterion,
    pub iterations: usize,
    pub final_density: f64,
    pub train: TrainHyper,
    pub seed: u64,
    pub score_batch_size: usize,
    pub snip_variant: SnipVariant,
    pub mask_options: MaskOptions,
    /// Average `g₀` over the whole training set instead of one balanced batch.
    pub full_data_grad: bool,
    /// Train each round on the first `n` examples only.
    pub train_subset: Option<usize>,
    /// Keep every round's mask in the outcome.
    pub keep_masks: bool,
}

impl Default for IrpConfig {
    fn default() -> Self {
        Self {
            criterion: Criterion::Snip,
            iterations: 20,
            final_density: 0.01,
            train: TrainHyper::default(),
            seed: 0,
            score_batch_size: 512,
            snip_variant: SnipVariant::default(),
            mask_options: MaskOptions::default(),
            full_data_grad: false,
            train_subset: None,
            keep_masks: false,
        }
    }
}

impl IrpConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.criterion, Criterion::Magnitude | Criterion::Snip | Criterion::Grasp | Criterion::Random) {
            return Err(Error::Config(format!("IRP cannot be driven by the {} criterion", self.criterion)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("IRP needs at least one iteration".into()));
        }
        if !(self.final_density > 0.0 && self.final_density < 1.0) {
            return Err(Error::Config(format!("IRP final density must lie in (0, 1), got {}", self.final_density)));
        }
        if self.score_batch_size == 0 {
            return Err(Error::Config("score batch size must be positive".into()));
        }
        self.train.validate()
    }
}

/// Density after round `i` of `n`: `final_density^(i/n)`.
pub fn schedule_density(final_density: f64, n: usize, i: usize) -> Result<f64> {
    if n == 0 || i > n {
        return Err(Error::Config(format!("schedule step {i} outside 0..={n}")));
    }
    if !(final_density > 0.0 && final_density <= 1.0) {
        return Err(Error::Config(format!("final density must lie in (0, 1], got {final_density}")));
    }
    Ok(match i {
        0 => 1.0,
        i if i == n => final_density,
        i => final_density.powf(i as f64 / n as f64),
    })
}

/// Provenance of one IRP run inside a (possibly merged) dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSource {
    pub arch: String,
    pub data: String,
    pub criterion: String,
    pub iterations: usize,
    pub final_density: f64,
    pub seed: u64,
    pub records: usize,
    /// Raw `(mean, std)` of the `θ₀` and `g₀` columns.
    pub theta_stats: (f64, f64),
    pub grad_stats: Option<(f64, f64)>,
}

const SOURCE_FIELDS: [&str; 9] =
    ["arch", "data", "criterion", "iterations", "final_density", "seed", "records", "theta_stats", "grad_stats"];

impl DatasetSource {
    fn to_meta(&self, i: usize, out: &mut BTreeMap<String, String>) {
        let pair = |p: (f64, f64)| format!("{:?},{:?}", p.0, p.1);
        let values = [
            self.arch.clone(),
            self.data.clone(),
            self.criterion.clone(),
            self.iterations.to_string(),
            format!("{:?}", self.final_density),
            self.seed.to_string(),
            self.records.to_string(),
            pair(self.theta_stats),
            self.grad_stats.map(pair).unwrap_or_default(),
        ];
        for (field, value) in SOURCE_FIELDS.iter().zip(values) {
            out.insert(format!("source.{i}.{field}"), value);
        }
    }

    fn from_meta(ck: &Checkpoint, i: usize) -> std::result::Result<Self, CheckpointError> {
        let key = |f: &str| format!("source.{i}.{f}");
        let pair = |raw: &str| -> std::result::Result<(f64, f64), CheckpointError> {
            let bad = || CheckpointError::Invalid(format!("stats pair {raw:?}"));
            let (a, b) = raw.split_once(',').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        let grad_raw = ck.get_meta(&key("grad_stats"))?;
        Ok(Self {
            arch: ck.get_meta(&key("arch"))?.to_string(),
            data: ck.get_meta(&key("data"))?.to_string(),
            criterion: ck.get_meta(&key("criterion"))?.to_string(),
            iterations: ck.parse_meta(&key("iterations"))?,
            final_density: ck.parse_meta(&key("final_density"))?,
            seed: ck.parse_meta(&key("seed"))?,
            records: ck.parse_meta(&key("records"))?,
            theta_stats: pair(ck.get_meta(&key("theta_stats"))?)?,
            grad_stats: if grad_raw.is_empty() { None } else { Some(pair(grad_raw)?) },
        })
    }
}

/// One row per eligible parameter: `(θ₀, g₀) → surviving fraction`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutosDataset {
    pub theta0: Vec<f64>,
    pub grad0: Option<Vec<f64>>,
    pub labels: Vec<f64>,
    pub sources: Vec<DatasetSource>,
}

impl AutosDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_arity(&self) -> usize {
        1 + usize::from(self.grad0.is_some())
    }

    /// Fraction of rows that survived every round.
    pub fn ones_fraction(&self) -> f64 {
        self.labels.iter().filter(|&&l| l == 1.0).count() as f64 / self.len().max(1) as f64
    }
}

impl Persist for AutosDataset {
    const KIND: PayloadKind = PayloadKind::AutosDataset;

    fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(PayloadKind::AutosDataset)
            .meta("records", self.len())
            .meta("sources", self.sources.len())
            .array("theta0", ArrayData::F64(self.theta0.clone()))
            .array("labels", ArrayData::F64(self.labels.clone()));
        if let Some(g) = &self.grad0 {
            ck = ck.array("grad0", ArrayData::F64(g.clone()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.to_meta(i, &mut ck.metadata);
        }
        ck
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let col = |name: &str| -> std::result::Result<Vec<f64>, CheckpointError> {
            match ck.get_array(name)? {
                ArrayData::F64(v) => Ok(v.clone()),
                other => Err(CheckpointError::DtypeMismatch { name: name.into(), expected: "f64", found: other.dtype() }),
            }
        };
        let theta0 = col("theta0")?;
        let labels = col("labels")?;
        let grad0 = match ck.get_array("grad0") {
            Ok(_) => Some(col("grad0")?),
            Err(CheckpointError::Missing(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let n: usize = ck.parse_meta("sources")?;
        let sources = (0..n).map(|i| DatasetSource::from_meta(ck, i)).collect::<std::result::Result<Vec<_>, _>>()?;
        if theta0.len() != labels.len() || grad0.as_ref().is_some_and(|g| g.len() != labels.len()) {
            return Err(CheckpointError::Invalid("dataset columns differ in length".into()).into());
        }
        Ok(Self { theta0, grad0, labels, sources })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub target_density: f64,
    pub achieved_density: f64,
    pub train_loss: Option<f64>,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct IrpOutcome {
    pub dataset: AutosDataset,
    pub theta0: ParamVector<f32>,
    /// Initial gradient over every position.
    pub grad0: Vec<f64>,
    pub final_mask: PruneMask,
    /// `m_0 … m_N` when `keep_masks` is set.
    pub masks: Vec<PruneMask>,
    pub log: Vec<IterationLog>,
}

/// Initial weights for a run seeded by `seed`.
pub fn initial_params(arch: &Architecture, seed: u64) -> ParamVector<f32> {
    kaiming_init(arch, seeds::derive(seed, "init", 0))
}

/// Gradient of the dense loss at `theta`, on one class-balanced batch or
/// averaged over all of `data`.
pub fn initial_gradient(theta: &ParamVector<f32>, data: &LabeledDataset, batch_size: usize, full: bool, seed: u64) -> Result<Vec<f64>> {
    let dense = PruneMask::dense(theta.architecture());
    if !full {
        let batch = data::balanced_batch(data, batch_size, seed)?;
        return Ok(nn::backward(theta, &dense, &batch)?.to_f64_vec());
    }
    let n = data.len();
    let mut total = vec![0.0; theta.len()];
    let rows: Vec<usize> = (0..n).collect();
    for chunk in rows.chunks(GRAD_CHUNK) {
        let g = nn::backward(theta, &dense, &data.rows(chunk))?;
        let w = chunk.len() as f64 / n as f64;
        for (t, v) in total.iter_mut().zip(g.values()) {
            *t += w * *v as f64;
        }
    }
    Ok(total)
}

fn column_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn round_scores(cfg: &IrpConfig, trained: &ParamVector<f32>, mask: &PruneMask, data: &LabeledDataset, i: usize) -> Result<ScoreVector> {
    let batch_seed = seeds::derive(cfg.seed, "irp-score", i as u64);
    Ok(match cfg.criterion {
        Criterion::Magnitude => criteria::magnitude_score(trained),
        Criterion::Random => criteria::random_score(trained.layout(), seeds::derive(cfg.seed, "irp-random", i as u64)),
        Criterion::Snip => {
            let batch = data::balanced_batch(data, cfg.score_batch_size, batch_seed)?;
            criteria::snip_score(trained, mask, &batch, cfg.snip_variant)?
        }
        Criterion::Grasp => {
            let batch = data::balanced_batch(data, cfg.score_batch_size, batch_seed)?;
            criteria::grasp_score(&trained.cast::<f64>(), mask, &batch)?
        }
        other => return Err(Error::Config(format!("IRP cannot be driven by the {other} criterion"))),
    })
}

/// Runs IRP from a freshly initialized network seeded by `cfg.seed`.
pub fn run_irp(arch: &Architecture, data: &LabeledDataset, cfg: &IrpConfig) -> Result<IrpOutcome> {
    run_irp_from(&initial_params(arch, cfg.seed), data, cfg)
}

/// Runs IRP from the given `θ₀`, which is never modified.
///
/// Round `i` trains `θ₀ ⊙ m_i`, scores the trained weights, refines the mask
/// to `schedule_density(i + 1)` and rewinds. Random scores ignore the
/// weights, so that criterion skips training.
pub fn run_irp_from(theta0: &ParamVector<f32>, data: &LabeledDataset, cfg: &IrpConfig) -> Result<IrpOutcome> {
    cfg.validate()?;
    let arch = theta0.architecture().clone();
    let grad0 = initial_gradient(
        theta0,
        data,
        cfg.score_batch_size,
        cfg.full_data_grad,
        seeds::derive(cfg.seed, "grad0-batch", 0),
    )?;
    let subset;
    let train_set = match cfg.train_subset {
        Some(n) if n < data.len() => {
            subset = data.head(n)?;
            &subset
        }
        _ => data,
    };

    let mut mask = PruneMask::ones(theta0.layout(), cfg.mask_options);
    let mut survived = vec![0u32; theta0.len()];
    let mut masks = Vec::new();
    if cfg.keep_masks {
        masks.push(mask.clone());
    }
    let mut log = Vec::with_capacity(cfg.iterations);
    for i in 0..cfg.iterations {
        let started = Instant::now();
        let wrap = |e: Error| Error::Irp { iteration: i, source: Box::new(e) };
        let (trained, train_loss) = if cfg.criterion == Criterion::Random {
            (theta0.clone(), None)
        } else {
            let hyper = TrainHyper { seed: seeds::derive(cfg.seed, "irp-train", i as u64), ..cfg.train.clone() };
            let (p, hist) = train::train(theta0, &mask, train_set, &hyper).map_err(wrap)?;
            (p, hist.last().map(|h| h.loss))
        };
        let scores = round_scores(cfg, &trained, &mask, data, i).map_err(wrap)?;
        let target = DensityTarget::new(schedule_density(cfg.final_density, cfg.iterations, i + 1)?)?;
        mask = refine_mask(&mask, &scores, target).map_err(wrap)?;
        let collapsed = mask.collapsed_layers();
        if !collapsed.is_empty() {
            log::warn!("irp round {}: layers {collapsed:?} fully pruned", i + 1);
        }
        for (s, &k) in survived.iter_mut().zip(mask.bits()) {
            *s += u32::from(k);
        }
        if cfg.keep_masks {
            masks.push(mask.clone());
        }
        log::info!(
            "irp {} round {}/{}: density {:.5} (target {:.5})",
            cfg.criterion,
            i + 1,
            cfg.iterations,
            mask.density(),
            target.density()
        );
        log.push(IterationLog {
            iteration: i,
            target_density: target.density(),
            achieved_density: mask.density(),
            train_loss,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }

    let eligible = mask.eligible();
    let n = cfg.iterations as f64;
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&eligible).filter(|(_, &e)| e).map(|(x, _)| *x).collect() };
    let theta_col = pick(&theta0.to_f64_vec());
    let grad_col = pick(&grad0);
    let labels: Vec<f64> =
        survived.iter().zip(&eligible).filter(|(_, &e)| e).map(|(&s, _)| s as f64 / n).collect();
    let source = DatasetSource {
        arch: arch.to_string(),
        data: data.name().to_string(),
        criterion: cfg.criterion.to_string(),
        iterations: cfg.iterations,
        final_density: cfg.final_density,
        seed: cfg.seed,
        records: labels.len(),
        theta_stats: column_stats(&theta_col),
        grad_stats: Some(column_stats(&grad_col)),
    };
    Ok(IrpOutcome {
        dataset: AutosDataset { theta0: theta_col, grad0: Some(grad_col), labels, sources: vec![source] },
        theta0: theta0.clone(),
        grad0,
        final_mask: mask,
        masks,
        log,
    })
}

/// Concatenates datasets. Labels keep their original grids; nothing is rescaled.
pub fn merge_datasets(parts: &[AutosDataset]) -> Result<AutosDataset> {
    let first = parts.first().ok_or_else(|| Error::Merge("nothing to merge".into()))?;
    if let Some(bad) = parts.iter().find(|d| d.feature_arity() != first.feature_arity()) {
        return Err(Error::Merge(format!(
            "feature arity {} does not match {}",
            bad.feature_arity(),
            first.feature_arity()
        )));
    }
    let mut out = AutosDataset {
        theta0: Vec::new(),
        grad0: first.grad0.as_ref().map(|_| Vec::new()),
        labels: Vec::new(),
        sources: Vec::new(),
    };
    for d in parts {
        out.theta0.extend(&d.theta0);
        out.labels.extend(&d.labels);
        if let (Some(dst), Some(src)) = (out.grad0.as_mut(), d.grad0.as_ref()) {
            dst.extend(src);
        }
        out.sources.extend(d.sources.iter().cloned());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Same,
    Different,
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitMode::Same => "same",
            InitMode::Different => "different",
        })
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(InitMode::Same),
            "different" => Ok(InitMode::Different),
            _ => Err(Error::Config(format!("unknown init mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CccOutcome {
    pub ccc: f64,
    pub labels_a: Vec<f64>,
    pub labels_b: Vec<f64>,
}

/// Agreement of the surviving-score labels of two IRP runs.
///
/// Run `a` starts from the init seeded by `a.seed`. Under `Same`, run `b`
/// rewinds to that same `θ₀`; under `Different`, to the init seeded by `b.seed`.
pub fn ccc_protocol(arch: &Architecture, data: &LabeledDataset, a: &IrpConfig, b: &IrpConfig, init: InitMode) -> Result<CccOutcome> {
    let theta_a = initial_params(arch, a.seed);
    let theta_b = match init {
        InitMode::Same => theta_a.clone(),
        InitMode::Different => initial_params(arch, b.seed),
    };
    let ra = run_irp_from(&theta_a, data, a)?;
    let rb = run_irp_from(&theta_b, data, b)?;
    ccc_of_runs(&ra, &rb)
}

pub fn ccc_of_runs(a: &IrpOutcome, b: &IrpOutcome) -> Result<CccOutcome> {
    let ccc = metrics::ccc(&a.dataset.labels, &b.dataset.labels)?;
    Ok(CccOutcome { ccc, labels_a: a.dataset.labels.clone(), labels_b: b.dataset.labels.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(schedule_density(0.01, 20, 0).unwrap(), 1.0);
        assert_eq!(schedule_density(0.01, 20, 20).unwrap(), 0.01);
        assert!((schedule_density(0.01, 20, 10).unwrap() - 0.1).abs() < 1e-12);
        assert!(schedule_density(0.01, 20, 21).is_err());
        let d: Vec<f64> = (0..=7).map(|i| schedule_density(0.3, 7, i).unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn config_rejects_bad_inputs() {
        let bad = [
            IrpConfig { iterations: 0, ..Default::default() },
            IrpConfig { final_density: 1.0, ..Default::default() },
            IrpConfig { final_density: 0.0, ..Default::default() },
            IrpConfig { criterion: Criterion::Npb, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    fn toy(labels: Vec<f64>, grad: bool, seed: u64) -> AutosDataset {
        let n = labels.len();
        AutosDataset {
            theta0: (0..n).map(|i| i as f64).collect(),
            grad0: grad.then(|| vec![0.5; n]),
            labels,
            sources: vec![DatasetSource {
                arch: "3-2".into(),
                data: "toy".into(),
                criterion: "snip".into(),
                iterations: 4,
                final_density: 0.25,
                seed,
                records: n,
                theta_stats: (1.0, 2.0),
                grad_stats: grad.then_some((0.5, 0.0)),
            }],
        }
    }

    #[test]
    fn merge_concatenates_without_rescaling() {
        let a = toy(vec![0.0, 0.25, 1.0], true, 1);
        let b = toy(vec![0.1, 0.9], true, 2);
        let m = merge_datasets(&[a.clone(), b]).unwrap();
        assert_eq!(m.labels, vec![0.0, 0.25, 1.0, 0.1, 0.9]);
        assert_eq!(m.sources.len(), 2);
        assert_ne!(m.sources[0].seed, m.sources[1].seed);
        let twice = merge_datasets(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(twice.len(), 2 * a.len());
        assert!(merge_datasets(&[a, toy(vec![0.0], false, 3)]).is_err());
        assert!(merge_datasets(&[]).is_err());
    }

    #[test]
    fn dataset_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for grad in [true, false] {
            let d = merge_datasets(&[toy(vec![0.0, 0.75], grad, 1), toy(vec![1.0], grad, 9)]).unwrap();
            let path = dir.path().join("d.aspr");
            d.save(&path).unwrap();
            assert_eq!(AutosDataset::load(&path).unwrap(), d);
        }
    }
}
