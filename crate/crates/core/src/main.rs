//! `verify`: run verification suites against a builtin structure or a
//! structure-spec JSON file and emit a machine/human report.
//!
//! Exit codes: 0 pass, 1 check failure, 2 configuration error, 3 internal or
//! numerical error.

use ckvr::report::{parse_perturb, parse_tol_override, Format, ReportError, RunConfig, Suite};
use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "verify",
    about = "Numerical certification of compatible Kähler structures, commuting operators and separation of variables",
    long_about = None
)]
struct Cli {
    /// Builtin structure name (flat_trivial, dim4_two_eigen, dim6_one_block, liouville2d)
    #[arg(long, conflicts_with = "spec")]
    builtin: Option<String>,

    /// Path to a structure-spec JSON file
    #[arg(long)]
    spec: Option<PathBuf>,

    /// Path to a run-config JSON file; command-line flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,

    /// Suite selection: kahler | compat | classical | quantum | potentials | separation | all
    #[arg(long)]
    suite: Option<String>,

    /// PRNG seed for all sampling
    #[arg(long)]
    seed: Option<u64>,

    /// Base number of sample points per check
    #[arg(long)]
    points: Option<usize>,

    /// Tolerance override CHECK=VALUE (repeatable)
    #[arg(long = "tol")]
    tol: Vec<String>,

    /// Structured tampering TARGET:EPS for negative-control runs
    /// (targets: A, J, V, f1)
    #[arg(long)]
    perturb: Option<String>,

    /// Write the report to this path instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,

    /// Report format: json | text
    #[arg(long)]
    format: Option<String>,
}

fn build_config(cli: Cli) -> Result<RunConfig, ReportError> {
    let mut rc = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(b) = cli.builtin {
        rc.builtin = Some(b);
        rc.spec_path = None;
    }
    if let Some(s) = cli.spec {
        rc.spec_path = Some(s);
        rc.builtin = None;
    }
    if let Some(s) = cli.suite {
        rc.suite = Suite::parse(&s)?;
    }
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(p) = cli.points {
        if p == 0 {
            return Err(ReportError::Config("points must be >= 1".into()));
        }
        rc.points = p;
    }
    for t in &cli.tol {
        let (k, v) = parse_tol_override(t)?;
        rc.tol_overrides.insert(k, v);
    }
    if let Some(p) = cli.perturb {
        rc.perturb = Some(parse_perturb(&p)?);
    }
    if let Some(o) = cli.out {
        rc.out = Some(o);
    }
    if let Some(f) = cli.format {
        rc.format = match f.as_str() {
            "json" => Format::Json,
            "text" => Format::Text,
            other => return Err(ReportError::Config(format!("unknown format '{other}'"))),
        };
    }
    rc.validate()?;
    Ok(rc)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match build_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let report = match ckvr::report::run_suite(&config) {
        Ok(r) => r,
        Err(e @ (ReportError::Config(_) | ReportError::ConfigIo { .. } | ReportError::ConfigParse { .. })) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(3);
        }
    };
    let body = report.emit(config.format);
    match &config.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &body) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(3);
            }
            println!(
                "{}: {} ({} checks)",
                path.display(),
                if report.pass { "pass" } else { "FAIL" },
                report.checks.len()
            );
        }
        None => print!("{body}"),
    }
    if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
