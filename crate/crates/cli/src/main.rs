//! `sumk`: generate synthetic data, sweep γ, tune, compare methods, and
//! train on CSV time series.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use sumk_core::data::Dgp;
use sumk_core::experiment::{self, ExperimentConfig, Settings};
use sumk_core::losses::LossFamily;
use sumk_core::metrics::MetricsReport;
use sumk_core::{Error, Result};

fn method_flags() -> Vec<String> {
    LossFamily::ALL
        .iter()
        .flat_map(|f| Settings::method_keys().iter().map(move |k| format!("{}.{k}", f.name())))
        .collect()
}

fn with_settings(cmd: Command) -> Command {
    let mut cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("INI file with [experiment], [train], [loss], [series] and per-method sections"),
    );
    for key in Settings::base_keys() {
        let (section, default) = Settings::key_info(key).expect("listed key");
        let help = if default.is_empty() {
            format!("[{section}]")
        } else {
            format!("[{section}] default {default}")
        };
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").action(ArgAction::Set).help(help));
    }
    for key in method_flags() {
        let name: &'static str = Box::leak(key.into_boxed_str());
        cmd = cmd.arg(Arg::new(name).long(name).value_name("VALUE").hide(true));
    }
    cmd.after_help("Per-method overrides are accepted as --<method>.<key>, e.g. --sum_k.gammas 0.05,0.1")
}

fn cli() -> Command {
    Command::new("sumk")
        .about("Prediction-interval training and evaluation harness")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_settings(Command::new("generate").about("Write one synthetic dataset CSV per trial")))
        .subcommand(with_settings(Command::new("sweep").about("Train every method over its γ grid; write trade-off curves")))
        .subcommand(with_settings(
            Command::new("tune-gamma").about("Pick per method the γ whose mean validation PICP is closest to 1 − δ"),
        ))
        .subcommand(with_settings(Command::new("compare").about("Train every method at its γ; write mean ± std table and width histograms")))
        .subcommand(with_settings(Command::new("train-csv").about("Train the first method on a CSV source; save checkpoint and metrics")))
        .subcommand(with_settings(Command::new("eval").about("Evaluate a checkpoint on the non-training rows of a CSV source")).arg(
            Arg::new("checkpoint")
                .long("checkpoint")
                .value_name("FILE")
                .required(true)
                .value_parser(clap::value_parser!(PathBuf)),
        ))
}

fn settings(m: &ArgMatches) -> Result<Settings> {
    let mut s = match m.get_one::<PathBuf>("config") {
        Some(path) => Settings::from_ini_file(path)?,
        None => Settings::default(),
    };
    let keys = Settings::base_keys().map(str::to_string).chain(method_flags());
    for key in keys {
        if let Some(v) = m.get_one::<String>(&key) {
            s.set(&key, v)?;
        }
    }
    Ok(s)
}

fn print_reports(reports: &[(sumk_core::data::Split, Vec<MetricsReport>)]) {
    println!("split,horizon,picp,pinaw,pinalw_p50,winkler,crossing_rate");
    for (split, rs) in reports {
        for (h, r) in rs.iter().enumerate() {
            let v = r.csv_values();
            println!("{},{},{:.4},{:.4},{:.4},{:.4},{:.4}", split.name(), h + 1, v[0], v[1], v[2], v[3], v[4]);
        }
    }
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let s = settings(m)?;
    if name == "generate" {
        // Only the data keys matter here; resolve() still validates the rest.
        let cfg = s.resolve()?;
        let dgp: Dgp = match cfg.source {
            experiment::Source::Dgp(d) => d,
            experiment::Source::Csv { .. } => return Err(Error::Config("generate needs a dgp, not a csv source".into())),
        };
        let files = experiment::cmd_generate(dgp, cfg.trials, cfg.master_seed, cfg.seed, &cfg.out_dir)?;
        println!("wrote {} files to {}", files.len(), cfg.out_dir.display());
        return Ok(());
    }
    let cfg: ExperimentConfig = s.resolve()?;
    match name {
        "sweep" => {
            let out = experiment::cmd_sweep(&cfg)?;
            println!("method,gamma,picp,pinaw,pinalw_p50");
            for r in &out.rows {
                println!("{},{},{:.4},{:.4},{:.4}", r.method, r.gamma, r.picp, r.pinaw, r.pinalw);
            }
        }
        "tune-gamma" => {
            for (m, g) in experiment::cmd_tune_gamma(&cfg)? {
                println!("{m}: gamma = {g}");
            }
        }
        "compare" => {
            let table = experiment::cmd_compare(&cfg)?;
            table.write_table(&mut std::io::stdout().lock())?;
        }
        "train-csv" => print_reports(&experiment::cmd_train_csv(&cfg)?),
        "eval" => {
            let ckpt = m.get_one::<PathBuf>("checkpoint").expect("required");
            print_reports(&experiment::cmd_eval(&cfg, ckpt)?);
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    eprintln!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonFiniteOutput { .. } => 3,
        Error::Io(_) | Error::Csv(_) | Error::Data { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
