use std::path::PathBuf;
use std::process::ExitCode;

use abblab::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use clap::Parser;

const BUILD: &str = env!("ABBLAB_BUILD");

#[derive(Debug, Parser)]
#[command(name = "abblab", version = BUILD, about = "Run a phase scan, spreading fit, cross-validation, CDF check or certificate chain")]
struct Args {
    /// phase_scan | speed_fit | crossval | cdf_check | certify
    kind: ExperimentKind,
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `experiment.out_dir`, then `out/<kind>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

fn kind_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::PhaseScan => "phase_scan",
        ExperimentKind::SpeedFit => "speed_fit",
        ExperimentKind::Crossval => "crossval",
        ExperimentKind::CdfCheck => "cdf_check",
        ExperimentKind::Certify => "certify",
    }
}

fn run(args: Args) -> abblab::Result<bool> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| abblab::Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.experiment.kind != args.kind {
        eprintln!(
            "note: config declares kind {}, running {}",
            kind_name(cfg.experiment.kind),
            kind_name(args.kind)
        );
        cfg.experiment.kind = args.kind;
    }
    if let Some(seed) = args.seed {
        cfg.mc.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.experiment.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind_name(args.kind)));
    let summary = run_experiment(&cfg, &out, BUILD)?;
    println!(
        "{} {}: {}/{} checks passed in {:.2} s",
        kind_name(summary.kind),
        if summary.passed { "PASS" } else { "FAIL" },
        summary.checks - summary.failures,
        summary.checks,
        summary.wall_seconds
    );
    for note in &summary.notes {
        println!("  {note}");
    }
    println!("  outputs in {}", out.display());
    Ok(summary.passed)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
