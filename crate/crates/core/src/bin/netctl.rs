use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use netctl::config::{ExperimentConfig, Mode};
use netctl::harness;

/// Run a networked online-control experiment and write its artifacts.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Output directory; defaults to the config's `out`, then `./out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's base seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// known | unknown | sysid_only | sweep
    #[arg(long)]
    mode_override: Option<Mode>,
    /// Re-run the config echoed in a summary.json and compare checksums.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn run(cli: &Cli) -> netctl::Result<u8> {
    if let Some(path) = &cli.replay {
        let summary = harness::read_summary(path)?;
        let report = harness::replay(&summary)?;
        let dir = harness::output_dir(&summary.config, cli.out.as_deref());
        harness::write_artifacts(&report.artifacts, &dir)?;
        if !cli.quiet {
            println!("config hash {}", if report.config_matches { "matches" } else { "DIFFERS" });
            println!(
                "trace {} (expected {}, got {})",
                if report.trace_matches { "identical" } else { "DIFFERS" },
                report.expected_trace_sha256,
                report.actual_trace_sha256
            );
        }
        return Ok(if report.identical() { 0 } else { 1 });
    }
    let path = cli.config.as_ref().expect("clap enforces --config");
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    if let Some(mode) = cli.mode_override {
        cfg.mode = mode;
        cfg.validate()?;
    }
    let art = harness::execute(&cfg)?;
    let dir = harness::output_dir(&cfg, cli.out.as_deref());
    harness::write_artifacts(&art, &dir)?;
    if !cli.quiet {
        for r in &art.summary.runs {
            let regret = r.regret.as_ref().map_or("-".to_string(), |g| format!("{:.4}", g.mean));
            let eps = r.sysid.as_ref().and_then(|s| s.eps_max()).map_or("-".to_string(), |e| format!("{e:.4e}"));
            println!("{}: T={} rows={} regret={} eps={}", r.run_id, r.horizon, r.rows, regret, eps);
        }
        if let Some(s) = &art.summary.sweep {
            println!("median slope {:.4}", s.median_slope);
        }
        println!("artifacts in {}", dir.display());
    }
    Ok(0)
}
