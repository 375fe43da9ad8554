//! End-to-end pipelines shared by the command line and the acceptance suite.

use std::path::Path;
use std::time::Instant;

use crate::config::{parse_criterion, ExperimentConfig};
use crate::criteria::{self, Criterion, NpbConfig, ScoreVector, SnipVariant};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::irp::{self, InitMode, IrpConfig};
use crate::mask::{topk_mask, DensityTarget, MaskOptions, PruneMask};
use crate::metrics::{self, EvalReport};
use crate::nn::train::{self, TrainHyper, TrainingData};
use crate::nn::{Architecture, ParamVector};
use crate::scorer::{self, ScorerModel};
use crate::seeds;

/// Settings every pruning criterion may need.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSettings {
    pub options: MaskOptions,
    pub score_batch_size: usize,
    pub snip_variant: SnipVariant,
    pub npb: NpbConfig,
    pub grasp_invert: bool,
}

impl Default for PruneSettings {
    fn default() -> Self {
        Self {
            options: MaskOptions::default(),
            score_batch_size: 512,
            snip_variant: SnipVariant::default(),
            npb: NpbConfig::default(),
            grasp_invert: false,
        }
    }
}

impl PruneSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            options: cfg.mask_options()?,
            score_batch_size: cfg.data.score_batch_size,
            snip_variant: cfg.snip_variant()?,
            npb: cfg.npb()?,
            grasp_invert: cfg.prune.grasp_invert,
        })
    }
}

/// Train/test split of the configured dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = match cfg.data.dataset.as_str() {
        "mnist" => {
            let (train, test) = data::load_mnist_dir(Path::new(&cfg.data.data_dir))?;
            if cfg.data.standardize {
                let z = |d: &LabeledDataset| data::standardize(d, data::MNIST_MEAN, data::MNIST_STD);
                (z(&train)?, z(&test)?)
            } else {
                (train, test)
            }
        }
        "blobs" => {
            let d = &cfg.data;
            let dim = cfg.architecture()?.input_dim();
            let all = data::synth_blobs(
                d.blob_classes,
                d.blob_train_per_class + d.blob_test_per_class,
                dim,
                d.blob_separation,
                seeds::derive(cfg.seed, "blobs", 0),
            )?;
            split(&all, d.blob_classes * d.blob_train_per_class)?
        }
        other => return Err(Error::Config(format!("unknown dataset {other:?}"))),
    };
    let train = if cfg.data.train_limit > 0 { train.head(cfg.data.train_limit)? } else { train };
    Ok((train, test))
}

/// First `n_train` rows versus the rest.
pub fn split(all: &LabeledDataset, n_train: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train == 0 || n_train >= all.len() {
        return Err(Error::Config(format!("cannot split {} rows at {n_train}", all.len())));
    }
    let part = |rows: Vec<usize>, tag: &str| {
        let labels = rows.iter().map(|&r| all.labels()[r]).collect();
        LabeledDataset::new(format!("{}/{tag}", all.name()), all.rows(&rows).features, labels, all.classes())
    };
    Ok((part((0..n_train).collect(), "train")?, part((n_train..all.len()).collect(), "test")?))
}

/// Scores of `theta0` under a baseline criterion, or under `scorer` for
/// [`Criterion::Autos`]. Only pre-training information is used.
pub fn criterion_scores(
    criterion: Criterion,
    theta0: &ParamVector<f32>,
    train: &LabeledDataset,
    settings: &PruneSettings,
    seed: u64,
    scorer: Option<&ScorerModel>,
) -> Result<ScoreVector> {
    let dense = PruneMask::ones(theta0.layout(), settings.options);
    let batch = || scorer::pruning_batch(train, settings.score_batch_size, seed);
    Ok(match criterion {
        Criterion::Random => criteria::random_score(theta0.layout(), seeds::derive(seed, "random-score", 0)),
        Criterion::Magnitude => criteria::magnitude_score(theta0),
        Criterion::Snip => criteria::snip_score(theta0, &dense, &batch()?, settings.snip_variant)?,
        Criterion::Grasp => {
            let s = criteria::grasp_score(&theta0.cast::<f64>(), &dense, &batch()?)?;
            if settings.grasp_invert {
                s.inverted()
            } else {
                s
            }
        }
        Criterion::Npb => criteria::npb_lite_score(&dense, theta0.architecture(), settings.npb)?,
        Criterion::Autos => {
            let model = scorer.ok_or_else(|| Error::Config("the autos criterion needs a trained scorer".into()))?;
            let grad0 = if model.mode.needs_grad() {
                let g = irp::initial_gradient(theta0, train, settings.score_batch_size, false, seeds::derive(seed, "grad0-batch", 0))?;
                Some(g)
            } else {
                None
            };
            scorer::score(model, theta0, grad0.as_deref(), settings.options)?
        }
    })
}

/// Initializes a network from `seed` and prunes it before training.
/// `None` keeps the dense network.
pub fn prune_network(
    arch: &Architecture,
    train: &LabeledDataset,
    criterion: Option<Criterion>,
    target: DensityTarget,
    seed: u64,
    settings: &PruneSettings,
    scorer: Option<&ScorerModel>,
) -> Result<(PruneMask, ParamVector<f32>)> {
    let theta0 = irp::initial_params(arch, seed);
    let Some(criterion) = criterion else {
        return Ok((PruneMask::ones(theta0.layout(), settings.options), theta0));
    };
    let scores = criterion_scores(criterion, &theta0, train, settings, seed, scorer)?;
    Ok((topk_mask(&scores, target, settings.options)?, theta0))
}

/// Trains the masked network and evaluates it on `test`.
pub fn train_and_evaluate(
    label: &str,
    theta0: &ParamVector<f32>,
    mask: &PruneMask,
    train_set: &LabeledDataset,
    test: &LabeledDataset,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<(EvalReport, ParamVector<f32>)> {
    let started = Instant::now();
    let (trained, _) = train::train(theta0, mask, train_set, hyper)?;
    let eval = metrics::evaluate(&trained, mask, test)?;
    let mut report = EvalReport::new(label, mask, seed, eval);
    report.epochs = hyper.epochs;
    report.wall_s = started.elapsed().as_secs_f64();
    Ok((report, trained))
}

/// One sweep point: the `seed_index`-th seed shares its init across criteria
/// and densities so comparisons are paired.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub criterion: String,
    pub density: f64,
    pub seed_index: usize,
}

impl SweepPoint {
    pub fn seed(&self, master: u64) -> u64 {
        seeds::derive(master, "sweep-seed", self.seed_index as u64)
    }
}

pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for seed_index in 0..cfg.sweep.sweep_seeds {
        for criterion in &cfg.sweep.criteria {
            for &density in &cfg.sweep.densities {
                out.push(SweepPoint { criterion: criterion.clone(), density, seed_index });
            }
        }
    }
    out
}

pub fn run_sweep_point(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    train_set: &LabeledDataset,
    test: &LabeledDataset,
    scorer: Option<&ScorerModel>,
) -> Result<EvalReport> {
    let arch = cfg.architecture()?;
    let settings = PruneSettings::from_config(cfg)?;
    let seed = point.seed(cfg.seed);
    let criterion = parse_criterion(&point.criterion)?;
    let (mask, theta0) = prune_network(&arch, train_set, criterion, DensityTarget::new(point.density)?, seed, &settings, scorer)?;
    let hyper = TrainHyper { seed: seeds::derive(seed, "train", 0), ..cfg.train_hyper()? };
    let (mut report, _) = train_and_evaluate(&point.criterion, &theta0, &mask, train_set, test, &hyper, seed)?;
    report.notes = format!("config={}; seed_index={}", cfg.hash(), point.seed_index);
    Ok(report)
}

/// The ten criterion pairs of the consistency table, in its row order.
pub const CCC_PAIRS: [(Criterion, Criterion); 10] = [
    (Criterion::Random, Criterion::Random),
    (Criterion::Snip, Criterion::Snip),
    (Criterion::Magnitude, Criterion::Magnitude),
    (Criterion::Grasp, Criterion::Grasp),
    (Criterion::Random, Criterion::Magnitude),
    (Criterion::Random, Criterion::Grasp),
    (Criterion::Random, Criterion::Snip),
    (Criterion::Snip, Criterion::Magnitude),
    (Criterion::Snip, Criterion::Grasp),
    (Criterion::Magnitude, Criterion::Grasp),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CccRow {
    pub a: Criterion,
    pub b: Criterion,
    /// Mean over seed pairs.
    pub same_init: f64,
    pub different_init: f64,
}

/// IRP settings for side `b` (0 or 1) of seed pair `pair`.
pub fn ccc_side(base: &IrpConfig, criterion: Criterion, master: u64, pair: usize, side: u64) -> IrpConfig {
    IrpConfig { criterion, seed: seeds::derive(master, "ccc", 2 * pair as u64 + side), ..base.clone() }
}

/// Runs the consistency table. Each IRP run is keyed by (criterion, init
/// seed, run seed), so runs reused between cells are computed once.
pub fn ccc_table(
    arch: &Architecture,
    data: &LabeledDataset,
    base: &IrpConfig,
    master: u64,
    seed_pairs: usize,
    pairs: &[(Criterion, Criterion)],
) -> Result<Vec<CccRow>> {
    use std::collections::HashMap;
    let mut cache: HashMap<(Criterion, u64, u64), Vec<f64>> = HashMap::new();
    let mut labels = |criterion: Criterion, init_seed: u64, run: &IrpConfig| -> Result<Vec<f64>> {
        let key = (criterion, init_seed, run.seed);
        if let Some(l) = cache.get(&key) {
            return Ok(l.clone());
        }
        let out = irp::run_irp_from(&irp::initial_params(arch, init_seed), data, run)?;
        cache.insert(key, out.dataset.labels.clone());
        Ok(out.dataset.labels)
    };
    let mut rows = Vec::new();
    for &(a, b) in pairs {
        let (mut same, mut diff) = (0.0, 0.0);
        for p in 0..seed_pairs {
            let ra = ccc_side(base, a, master, p, 0);
            let rb = ccc_side(base, b, master, p, 1);
            let la = labels(a, ra.seed, &ra)?;
            let lb_same = labels(b, ra.seed, &rb)?;
            let lb_diff = labels(b, rb.seed, &rb)?;
            same += metrics::ccc(&la, &lb_same)?;
            diff += metrics::ccc(&la, &lb_diff)?;
        }
        let n = seed_pairs.max(1) as f64;
        rows.push(CccRow { a, b, same_init: same / n, different_init: diff / n });
    }
    Ok(rows)
}

/// Single-cell variant used by the protocol API.
pub fn ccc_cell(arch: &Architecture, data: &LabeledDataset, a: &IrpConfig, b: &IrpConfig, init: InitMode) -> Result<f64> {
    irp::ccc_protocol(arch, data, a, b, init).map(|o| o.ccc)
}
