//! `autos`: dataset generation, scorer training, pruning, training,
//! evaluation, consistency tables and sweeps from one config.

mod commands;

use std::path::Path;
use std::process::ExitCode;

use autos_core::config::ExperimentConfig;
use autos_core::{Error, ErrorClass};
use clap::{Arg, ArgAction, ArgMatches, Command};

/// Environment variable that overrides the default data directory.
pub const DATA_DIR_ENV: &str = "AUTOS_DATA_DIR";

const SUBCOMMANDS: [(&str, &str); 7] = [
    ("gen-dataset", "Run iterative rewind pruning and write the labeled dataset"),
    ("train-scorer", "Train the learned criterion on a labeled dataset"),
    ("prune", "Initialize a network and prune it before training"),
    ("train", "Train the pruned network"),
    ("eval", "Evaluate the trained network and append a results row"),
    ("ccc", "Consistency table of IRP labels across criteria and inits (long-running)"),
    ("sweep", "Train and evaluate every density x criterion x seed point"),
];

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Parse => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
    }
}

fn config_args(cmd: Command) -> Command {
    let defaults = ExperimentConfig::default();
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").short('c').value_name("FILE").help("TOML config file"))
        .arg(
            Arg::new("paper-scale")
                .long("paper-scale")
                .action(ArgAction::SetTrue)
                .help("Full training budgets (100 epochs per run and per IRP round); long-running"),
        )
        .arg(
            Arg::new("sparsity")
                .long("sparsity")
                .value_name("S")
                .conflicts_with("density")
                .help("Fraction to remove; sets density = 1 - S"),
        )
        .arg(Arg::new("verbose").long("verbose").short('v').action(ArgAction::Count).help("More log output"));
    for k in defaults.keys() {
        let section = if k.section.is_empty() { "top level".to_string() } else { format!("[{}]", k.section) };
        let key: &'static str = Box::leak(k.key.clone().into_boxed_str());
        let alias: &'static str = Box::leak(k.key.replace('_', "-").into_boxed_str());
        let mut arg = Arg::new(key)
            .long(key)
            .value_name("VALUE")
            .help(format!("{section} [default: {}]", k.default))
            .help_heading("Config keys");
        if alias != key {
            arg = arg.alias(alias);
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    let mut root = Command::new("autos")
        .about("Pruning at initialization: IRP datasets, learned scorer, baselines and evaluation")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .after_help(format!("Environment: {DATA_DIR_ENV} overrides the default data directory."));
    for (name, about) in SUBCOMMANDS {
        root = root.subcommand(config_args(Command::new(name).about(about)));
    }
    root
}

/// Default, then environment, then file, then flags.
fn resolve_config(m: &ArgMatches) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
        cfg.data.data_dir = dir;
    }
    if let Some(path) = m.get_one::<String>("config") {
        cfg.overlay_file(Path::new(path))?;
    }
    if m.get_flag("paper-scale") {
        cfg.paper_scale();
    }
    for k in ExperimentConfig::default().keys() {
        if let Some(v) = m.get_one::<String>(&k.key) {
            cfg.set(&k.key, v)?;
        }
    }
    if let Some(s) = m.get_one::<String>("sparsity") {
        let s: f64 = s.parse().map_err(|_| Error::Config(format!("--sparsity: expected a number, got {s:?}")))?;
        // rounded so that `--sparsity 0.95` and `--density 0.05` give the same config
        cfg.set("density", &format!("{:.12}", 1.0 - s))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let level = match sub.get_count("verbose") {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    let result = resolve_config(sub).and_then(|cfg| commands::run(name, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
