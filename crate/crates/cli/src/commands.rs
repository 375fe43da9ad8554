use std::collections::{BTreeMap, HashSet};
use std::sync::Mutex;

use autos_core::config::ExperimentConfig;
use autos_core::criteria::Criterion;
use autos_core::data::LabeledDataset;
use autos_core::error::{Error, Result};
use autos_core::experiment::{self, PruneSettings, SweepPoint, CCC_PAIRS};
use autos_core::irp::{self, AutosDataset};
use autos_core::mask::PruneMask;
use autos_core::metrics::{self, EvalReport};
use autos_core::nn::train;
use autos_core::nn::ParamVector;
use autos_core::scorer::{self, ScorerModel};
use autos_core::seeds;
use autos_core::store::{self, Persist, ResultRow};
use rayon::prelude::*;

const INIT_FILE: &str = "init.aspr";
const MASK_FILE: &str = "mask.aspr";
const TRAINED_FILE: &str = "trained.aspr";
const RESULTS_FILE: &str = "results.csv";
const SWEEP_FILE: &str = "sweep.csv";
const CCC_FILE: &str = "ccc.csv";

pub fn run(name: &str, cfg: &ExperimentConfig) -> Result<()> {
    log::info!("config {} (out_dir {})", cfg.hash(), cfg.out_dir);
    match name {
        "gen-dataset" => gen_dataset(cfg),
        "train-scorer" => train_scorer(cfg),
        "prune" => prune(cfg),
        "train" => train_cmd(cfg),
        "eval" => eval(cfg),
        "ccc" => ccc(cfg),
        "sweep" => sweep(cfg),
        other => Err(Error::Config(format!("unknown subcommand {other:?}"))),
    }
}

/// Metadata stamped into every artifact.
fn provenance(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), cfg.hash()),
        ("master_seed".to_string(), cfg.seed.to_string()),
        ("config".to_string(), cfg.to_toml_string()),
    ])
}

/// Seed of the single network handled by prune/train/eval.
fn run_seed(cfg: &ExperimentConfig) -> u64 {
    seeds::derive(cfg.seed, "run", 0)
}

fn load_scorer_if(cfg: &ExperimentConfig, needed: bool) -> Result<Option<ScorerModel>> {
    if !needed {
        return Ok(None);
    }
    let path = cfg.scorer_path();
    ScorerModel::load(&path).map(Some)
}

fn gen_dataset(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, _) = experiment::load_data(cfg)?;
    let irp_cfg = cfg.irp_config()?;
    let outcome = irp::run_irp(&cfg.architecture()?, &train_set, &irp_cfg)?;
    let path = cfg.dataset_path();
    let mut meta = provenance(cfg);
    meta.insert("irp_criterion".into(), irp_cfg.criterion.to_string());
    meta.insert("iterations".into(), irp_cfg.iterations.to_string());
    meta.insert("final_density".into(), irp_cfg.final_density.to_string());
    outcome.dataset.save_with(&path, &meta)?;
    if irp_cfg.keep_masks {
        for (i, m) in outcome.masks.iter().enumerate() {
            m.save_with(&cfg.out_path(&format!("irp_mask_{i:03}.aspr")), &meta)?;
        }
    }
    let ds = &outcome.dataset;
    println!(
        "dataset: {}, {}, {} | {} records, label-1 fraction {:.5} -> {}",
        irp_cfg.criterion,
        irp_cfg.iterations,
        irp_cfg.final_density,
        ds.len(),
        ds.ones_fraction(),
        path.display()
    );
    Ok(())
}

fn train_scorer(cfg: &ExperimentConfig) -> Result<()> {
    let dataset = AutosDataset::load(&cfg.dataset_path())?;
    let mode = cfg.feature_mode()?;
    if mode.needs_grad() && dataset.grad0.is_none() {
        return Err(Error::Interface(format!("dataset has no gradient column; feature mode {mode} needs one")));
    }
    let hyper = cfg.scorer_hyper()?;
    let model = scorer::train_scorer(&dataset, mode, &hyper)?;
    let path = cfg.scorer_path();
    model.save_with(&path, &provenance(cfg))?;
    println!(
        "scorer: mode {mode}, lr {}, batch {}, epochs {} | train mse {} -> {}",
        hyper.learning_rate,
        hyper.batch_size,
        hyper.epochs,
        model.train_mse.iter().map(|m| format!("{m:.5}")).collect::<Vec<_>>().join(" "),
        path.display()
    );
    Ok(())
}

fn prune(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, _) = experiment::load_data(cfg)?;
    let criterion = cfg.criterion()?;
    let scorer = load_scorer_if(cfg, criterion == Some(Criterion::Autos))?;
    let settings = PruneSettings::from_config(cfg)?;
    let (mask, theta0) = experiment::prune_network(
        &cfg.architecture()?,
        &train_set,
        criterion,
        cfg.density_target()?,
        run_seed(cfg),
        &settings,
        scorer.as_ref(),
    )?;
    let mut meta = provenance(cfg);
    meta.insert("criterion".into(), cfg.prune.criterion.clone());
    theta0.save_with(&cfg.out_path(INIT_FILE), &meta)?;
    mask.save_with(&cfg.out_path(MASK_FILE), &meta)?;
    let layers: Vec<String> = mask.per_layer_report().iter().map(|r| format!("{}/{}", r.kept, r.total)).collect();
    println!(
        "prune: {} kept {} of {} eligible (density {:.6}); per layer {}",
        cfg.prune.criterion,
        mask.kept_eligible(),
        mask.eligible_count(),
        mask.density(),
        layers.join(" ")
    );
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, _) = experiment::load_data(cfg)?;
    let theta0 = ParamVector::<f32>::load(&cfg.out_path(INIT_FILE))?;
    let mask = PruneMask::load(&cfg.out_path(MASK_FILE))?;
    let hyper = cfg.train_hyper_for("train", run_seed(cfg))?;
    let (trained, history) = train::train(&theta0, &mask, &train_set, &hyper)?;
    let mut meta = provenance(cfg);
    meta.insert("epochs".into(), hyper.epochs.to_string());
    trained.save_with(&cfg.out_path(TRAINED_FILE), &meta)?;
    for h in &history {
        println!("epoch {:>3}: lr {:.2e} loss {:.5} acc {:.4}", h.epoch + 1, h.learning_rate, h.loss, h.accuracy.unwrap_or(f64::NAN));
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let (_, test) = experiment::load_data(cfg)?;
    let trained = ParamVector::<f32>::load(&cfg.out_path(TRAINED_FILE))?;
    let mask = PruneMask::load(&cfg.out_path(MASK_FILE))?;
    let e = metrics::evaluate(&trained, &mask, &test)?;
    let mut report = EvalReport::new(&cfg.prune.criterion, &mask, run_seed(cfg), e);
    report.epochs = cfg.train.epochs;
    report.notes = format!("config={}", cfg.hash());
    let path = cfg.out_path(RESULTS_FILE);
    store::write_results(std::slice::from_ref(&report), &path, true)?;
    println!("eval: accuracy {:.4} loss {:.4} ({} / {}) -> {}", e.accuracy, e.loss, e.correct, e.total, path.display());
    Ok(())
}

fn ccc(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, _) = experiment::load_data(cfg)?;
    let rows = experiment::ccc_table(
        &cfg.architecture()?,
        &train_set,
        &cfg.irp_config()?,
        cfg.seed,
        cfg.ccc.ccc_seed_pairs,
        &CCC_PAIRS,
    )?;
    let path = cfg.out_path(CCC_FILE);
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut text = format!("# config={}\npair,same_init,different_init\n", cfg.hash());
    println!("{:<22} {:>12} {:>15}", "pair", "same init", "different init");
    for r in &rows {
        let pair = format!("{} & {}", r.a, r.b);
        println!("{pair:<22} {:>12.5} {:>15.5}", r.same_init, r.different_init);
        text.push_str(&format!("{pair},{},{}\n", r.same_init, r.different_init));
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Identifies a sweep point inside a results row's notes.
fn point_tag(p: &SweepPoint) -> String {
    format!("point={}@{}#{}", p.criterion, p.density, p.seed_index)
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, test) = experiment::load_data(cfg)?;
    let path = cfg.out_path(SWEEP_FILE);
    let done: HashSet<String> = if path.exists() {
        store::read_results(&path)?
            .iter()
            .filter_map(|r| r.notes.split("; ").find(|n| n.starts_with("point=")).map(str::to_string))
            .collect()
    } else {
        store::write_rows(&[], &path, false)?;
        HashSet::new()
    };
    let points = experiment::sweep_points(cfg);
    let todo: Vec<&SweepPoint> = points.iter().filter(|p| !done.contains(&point_tag(p))).collect();
    println!("sweep: {} points, {} already done, {} to run", points.len(), points.len() - todo.len(), todo.len());
    let scorer = load_scorer_if(cfg, cfg.sweep.criteria.iter().any(|c| c == "autos"))?;

    let writer = Mutex::new(());
    let run_one = |p: &SweepPoint, data: (&LabeledDataset, &LabeledDataset)| -> Result<()> {
        let mut report = experiment::run_sweep_point(cfg, p, data.0, data.1, scorer.as_ref())?;
        report.notes = format!("{}; {}", report.notes, point_tag(p));
        let _guard = writer.lock().expect("writer lock");
        store::write_results(std::slice::from_ref(&report), &path, true)?;
        println!("{:<10} density {:<6} seed#{} acc {:.4}", p.criterion, p.density, p.seed_index, report.test_accuracy);
        Ok(())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| todo.par_iter().try_for_each(|p| run_one(p, (&train_set, &test))))?;

    let mut rows: Vec<ResultRow> = store::read_results(&path)?;
    rows.sort_by(|a, b| {
        (a.seed, &a.criterion).cmp(&(b.seed, &b.criterion)).then(b.density.total_cmp(&a.density))
    });
    store::write_rows(&rows, &path, false)?;
    println!("sweep: {} rows -> {}", rows.len(), path.display());
    Ok(())
}
