use berezin::berezin::Convention;
use berezin::scenario::{Mode, RunOptions, Scenario};
use berezin::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "berezin", version, about = "Verify Berezin integration identities on scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever identity the scenario declares.
    Run(Target),
    /// Run a change-of-retraction (corners) scenario.
    VerifyCov(Target),
    /// Run a Stokes scenario.
    VerifyStokes(Target),
    /// List the built-in examples.
    ListExamples,
}

#[derive(Args)]
struct Target {
    /// Built-in example name.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    example: Option<String>,
    /// Scenario file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Sign conventions, e.g. `s=pq-only` or `s=half-q,b=q-only`.
    #[arg(long)]
    convention: Vec<String>,
    /// Gauss-Legendre order per axis.
    #[arg(long)]
    quad_order: Option<usize>,
    /// Default tolerance for identity residuals.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Only count the structurally nonzero summands.
    #[arg(long)]
    count_terms: bool,
}

fn parse_convention(items: &[String]) -> Result<Option<Convention>, Error> {
    if items.is_empty() {
        return Ok(None);
    }
    let mut c = Convention::default();
    for part in items.iter().flat_map(|s| s.split(',')) {
        match part.trim().split_once('=') {
            Some(("s", v)) => c.s = Convention::parse_s(v.trim())?,
            Some(("b", v)) => c.b = Convention::parse_b(v.trim())?,
            _ => return Err(Error::Input(format!("bad convention `{part}`, expected s=... or b=..."))),
        }
    }
    Ok(Some(c))
}

fn write_out(path: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, format!("{text}\n"))
            .map_err(|e| Error::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn execute(t: &Target, required: Option<Mode>) -> Result<bool, Error> {
    let sc = match (&t.example, &t.scenario) {
        (Some(name), _) => Scenario::builtin(name)?,
        (None, Some(path)) => Scenario::load(path).map_err(|e| e.context(path.display().to_string()))?,
        (None, None) => return Err(Error::Input("give --example or --scenario".into())),
    };
    if let Some(mode) = required {
        if sc.file.mode != mode {
            return Err(Error::Input(format!("scenario `{}` is a {} scenario", sc.file.name, sc.file.mode)));
        }
    }
    let opts = RunOptions { convention: parse_convention(&t.convention)?, quad_order: t.quad_order, tolerance: t.tolerance };
    if t.count_terms {
        let n = sc.count_terms(&opts)?;
        match &t.report {
            Some(_) => write_out(&t.report, &serde_json::json!({ "scenario": sc.file.name, "term_count": n }).to_string())?,
            None => println!("{n}"),
        }
        return Ok(true);
    }
    let report = sc.run(&opts)?;
    write_out(&t.report, &report.to_json())?;
    if t.report.is_some() {
        for c in &report.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            println!("{mark} {:<40} deviation {:.3e} (tolerance {:.1e})", c.name, c.deviation, c.tolerance);
        }
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ListExamples => {
            for (name, description) in Scenario::builtins() {
                println!("{name:<12} {description}");
            }
            Ok(true)
        }
        Command::Run(t) => execute(t, None),
        Command::VerifyCov(t) => execute(t, Some(Mode::Corners)),
        Command::VerifyStokes(t) => execute(t, Some(Mode::Stokes)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
