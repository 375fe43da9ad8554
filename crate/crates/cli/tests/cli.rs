use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use autos_core::config::ExperimentConfig;
use autos_core::irp::AutosDataset;
use autos_core::mask::PruneMask;
use autos_core::store::{self, Persist};

const SUBCOMMANDS: [&str; 7] = ["gen-dataset", "train-scorer", "prune", "train", "eval", "ccc", "sweep"];

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mnist-1k")
}

fn autos(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autos"))
        .current_dir(dir)
        .env_remove("AUTOS_DATA_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn autos")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

/// Small blob problem shared by the fast tests.
const BLOBS: [&str; 12] = [
    "--dataset",
    "blobs",
    "--arch",
    "64-16-4",
    "--blob_classes",
    "4",
    "--score_batch_size",
    "64",
    "--epochs",
    "1",
    "--out_dir",
    "out",
];

#[test]
fn help_lists_every_key_with_default() {
    let tmp = tempfile::tempdir().unwrap();
    let keys = ExperimentConfig::default().keys();
    for sub in SUBCOMMANDS {
        let help = ok(&autos(tmp.path(), &[sub, "--help"]));
        for k in &keys {
            let line = help
                .lines()
                .find(|l| l.trim_start().starts_with(&format!("--{} ", k.key)))
                .unwrap_or_else(|| panic!("{sub} --help misses --{}", k.key));
            assert!(line.contains(&format!("[default: {}]", k.default)), "{sub}: {line}");
        }
    }
}

#[test]
fn exit_codes_by_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| autos(tmp.path(), args).status.code();

    // config: out-of-range value, unknown key in file, usage error
    assert_eq!(code(&["prune", "--density", "1.5"]), Some(2));
    std::fs::write(tmp.path().join("bad.toml"), "[prune]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&["prune", "--config", "bad.toml"]), Some(2));
    assert_eq!(code(&["prune", "--no-such-flag"]), Some(2));

    // i/o: data directory absent
    assert_eq!(code(&["prune", "--data_dir", "missing-dir"]), Some(5));

    // parse: corrupt checkpoint
    std::fs::create_dir_all(tmp.path().join("out")).unwrap();
    std::fs::write(tmp.path().join("out/init.aspr"), b"not a checkpoint").unwrap();
    std::fs::write(tmp.path().join("out/mask.aspr"), b"not a checkpoint").unwrap();
    let mut args = vec!["train"];
    args.extend(BLOBS);
    assert_eq!(code(&args), Some(3));

    // numeric: absurd learning rate overflows the weights
    let mut args = vec!["prune", "--criterion", "dense"];
    args.extend(BLOBS);
    ok(&autos(tmp.path(), &args));
    let mut args = vec!["train", "--learning_rate", "1e30"];
    args.extend(BLOBS);
    assert_eq!(code(&args), Some(4));
}

#[test]
fn sparsity_flag_equals_density_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |flag: &[&str], out: &str| {
        let mut args = vec!["prune", "--criterion", "magnitude"];
        args.extend(flag);
        args.extend(&BLOBS[..10]);
        args.extend(["--out_dir", out]);
        ok(&autos(tmp.path(), &args));
        PruneMask::load(&tmp.path().join(out).join("mask.aspr")).unwrap()
    };
    let a = run(&["--sparsity", "0.95"], "a");
    let b = run(&["--density", "0.05"], "b");
    assert_eq!(a.bits(), b.bits());
}

#[test]
fn half_density_keeps_half_of_eligible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["prune", "--criterion", "magnitude", "--density", "0.5"];
    args.extend(BLOBS);
    ok(&autos(tmp.path(), &args));
    let mask = PruneMask::load(&tmp.path().join("out/mask.aspr")).unwrap();
    let k = mask.eligible_count();
    let kept = mask.kept_eligible();
    assert!(kept == k / 2 || kept == k.div_ceil(2), "{kept} of {k}");
}

#[test]
fn data_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_autos"))
        .current_dir(tmp.path())
        .env("AUTOS_DATA_DIR", fixture_dir())
        .args(["prune", "--criterion", "random", "--density", "0.1", "--out_dir", "out"])
        .output()
        .unwrap();
    ok(&out);
    // an explicit flag beats the environment
    let out = Command::new(env!("CARGO_BIN_EXE_autos"))
        .current_dir(tmp.path())
        .env("AUTOS_DATA_DIR", fixture_dir())
        .args(["prune", "--data_dir", "nowhere", "--out_dir", "out"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn full_chain_on_mnist_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = fixture_dir();
    let data = data.to_str().unwrap();
    let toml = format!(
        "seed = 7\nout_dir = \"out\"\n[data]\ndata_dir = \"{data}\"\nscore_batch_size = 100\n\
         [irp]\niterations = 3\nfinal_density = 0.1\nirp_epochs = 1\n[train]\nepochs = 2\n\
         [scorer]\nscorer_epochs = 3\n[prune]\ncriterion = \"autos\"\ndensity = 0.1\n"
    );
    std::fs::write(tmp.path().join("run.toml"), toml).unwrap();
    let cfg = ["--config", "run.toml"];
    for sub in ["gen-dataset", "train-scorer", "prune", "train", "eval"] {
        let mut args = vec![sub];
        args.extend(cfg);
        ok(&autos(tmp.path(), &args));
    }
    let rows = store::read_results(&tmp.path().join("out/results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].criterion, "autos");
    assert!((rows[0].density - 0.1).abs() < 1e-3);
    assert!(rows[0].accuracy > 0.1, "{}", rows[0].accuracy);
    for f in ["autos_dataset.aspr", "scorer.aspr", "init.aspr", "mask.aspr", "trained.aspr"] {
        let ck = store::Checkpoint::decode(&std::fs::read(tmp.path().join("out").join(f)).unwrap()).unwrap();
        assert!(ck.get_meta("config_hash").is_ok(), "{f} lacks provenance");
    }
}

#[test]
fn train_scorer_refuses_missing_gradient_column() {
    let tmp = tempfile::tempdir().unwrap();
    let mut gen = vec!["gen-dataset", "--irp_criterion", "magnitude", "--iterations", "2", "--final_density", "0.25"];
    gen.extend(BLOBS);
    ok(&autos(tmp.path(), &gen));
    // strip the gradient column, as in a dataset produced without one
    let path = tmp.path().join("out/autos_dataset.aspr");
    let mut dataset = AutosDataset::load(&path).unwrap();
    dataset.grad0 = None;
    dataset.save(&path).unwrap();
    let mut args = vec!["train-scorer", "--feature_mode", "grad_only"];
    args.extend(BLOBS);
    let out = autos(tmp.path(), &args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let mut args = vec!["train-scorer", "--feature_mode", "param_only", "--scorer_epochs", "1"];
    args.extend(BLOBS);
    ok(&autos(tmp.path(), &args));
}

#[test]
fn reruns_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    // same out_dir both times: the config (and so its hash) is part of every artifact
    let digest = |out: &str| {
        let mut args = vec!["gen-dataset", "--iterations", "3", "--final_density", "0.1", "--irp_epochs", "1"];
        args.extend(&BLOBS[..10]);
        args.extend(["--out_dir", out]);
        ok(&autos(tmp.path(), &args));
        let mut args = vec!["train-scorer", "--scorer_epochs", "2"];
        args.extend(&BLOBS[..10]);
        args.extend(["--out_dir", out]);
        let header = ok(&autos(tmp.path(), &args));
        let read = |f: &str| std::fs::read(tmp.path().join(out).join(f)).unwrap();
        (read("autos_dataset.aspr"), read("scorer.aspr"), header)
    };
    let (d1, s1, h1) = digest("a");
    let (d2, s2, h2) = digest("a");
    assert!(d1 == d2, "dataset differs between reruns");
    assert!(s1 == s2, "scorer differs between reruns");
    assert!(h1.contains("lr 0.01, batch 1024, epochs 2"), "{h1}");
    assert_eq!(h1, h2);
}

#[test]
fn single_round_smoke_on_blobs_is_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = ok(&autos(
        tmp.path(),
        &["gen-dataset", "--dataset", "blobs", "--iterations", "1", "--final_density", "0.1", "--out_dir", "out"],
    ));
    assert!(start.elapsed().as_secs_f64() < 30.0, "{:?}", start.elapsed());
    assert!(out.contains("dataset: snip, 1, 0.1"), "{out}");
}

fn sweep_args() -> Vec<&'static str> {
    let mut args = vec!["sweep", "--densities", "0.5,0.2,0.1,0.05", "--criteria", "random,magnitude", "--sweep_seeds", "3"];
    args.extend(BLOBS);
    args
}

#[test]
fn sweep_covers_the_cartesian_product() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = sweep_args();
    args.extend(["--jobs", "2"]);
    ok(&autos(tmp.path(), &args));
    let rows = store::read_results(&tmp.path().join("out/sweep.csv")).unwrap();
    assert_eq!(rows.len(), 24);
    let seeds: std::collections::BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 3);
}

#[test]
fn interrupted_sweep_resumes_without_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&autos(tmp.path(), &sweep_args()));
    let path = tmp.path().join("out/sweep.csv");
    let full = store::read_results(&path).unwrap();

    // keep only the first 10 rows, as if the run had been killed
    let text = std::fs::read_to_string(&path).unwrap();
    let truncated: Vec<&str> = text.lines().take(11).collect();
    std::fs::write(&path, truncated.join("\n") + "\n").unwrap();
    let out = ok(&autos(tmp.path(), &sweep_args()));
    assert!(out.contains("10 already done, 14 to run"), "{out}");

    let resumed = store::read_results(&path).unwrap();
    assert_eq!(resumed.len(), 24);
    let key = |r: &store::ResultRow| (r.criterion.clone(), r.density.to_bits(), r.seed, r.accuracy.to_bits());
    let mut a: Vec<_> = full.iter().map(key).collect();
    let mut b: Vec<_> = resumed.iter().map(key).collect();
    a.sort();
    b.sort();
    assert_eq!(a, b, "resumed sweep must reproduce the uninterrupted one");
}
