use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ionshelve::estimator::{fit_exponential, fit_pair_coupling, fit_power_law, ExponentialKind, FitResult};
use ionshelve::export::{json_string, write_file, Format, Table};
use ionshelve::pipeline::{self, PipelineError, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "ionshelve", version, about = "Trapped-ion shelving simulator")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitModel {
    /// sin²(Jt) with decoherence envelope; columns time_s, value[, shots].
    Pair,
    /// e^{-t/τ}; columns time_s, value[, shots].
    Decay,
    /// 1 - e^{-t/τ}; columns time_s, value[, shots].
    InverseExponential,
    /// τ = A Ω^k; columns rabi_Hz, tau_s.
    PowerLaw,
}

#[derive(Subcommand)]
enum Command {
    /// Equilibrium ion positions.
    SolveCrystal(Common),
    /// Crystal plus normal modes.
    Modes(Common),
    /// Crystal, modes and the coupling matrix.
    Couplings(Common),
    /// Shelving mask and the reduced interaction graph.
    Mask(Common),
    /// Ensemble dynamics and sampled readout.
    Simulate(Common),
    /// Shot-by-shot shelving protocol with post-selection.
    Protocol(Common),
    /// Every stage the scenario supports.
    All(Common),
    /// Fit a model to a CSV time series.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        model: FitModel,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the scenario recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
        /// Fail if any regenerated file differs from the manifest.
        #[arg(long)]
        check: bool,
    },
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn run_stage(common: &Common, stage: Stage) -> Result<(), PipelineError> {
    let text = std::fs::read_to_string(&common.scenario).map_err(io_error(&common.scenario))?;
    let options = RunOptions { out_dir: common.out.clone(), format: common.format, seed: common.seed, stage };
    let manifest = pipeline::run(&text, &options)?;
    let mut stdout = std::io::stdout().lock();
    for name in manifest.files.keys() {
        // a closed pipe is not an error for the run itself
        if writeln!(stdout, "{}", common.out.join(name).display()).is_err() {
            break;
        }
    }
    Ok(())
}

fn column(headers: &[String], rows: &[Vec<String>], name: &str) -> Result<Option<Vec<f64>>, PipelineError> {
    let Some(k) = headers.iter().position(|h| h == name) else { return Ok(None) };
    rows.iter()
        .map(|r| r[k].parse::<f64>().map_err(|e| PipelineError::Unsupported(format!("column {name}: {e}"))))
        .collect::<Result<Vec<_>, _>>()
        .map(Some)
}

fn required(headers: &[String], rows: &[Vec<String>], name: &str) -> Result<Vec<f64>, PipelineError> {
    column(headers, rows, name)?.ok_or_else(|| PipelineError::Unsupported(format!("input is missing column {name}")))
}

fn run_fit(input: &Path, model: FitModel) -> Result<FitResult, PipelineError> {
    let text = std::fs::read_to_string(input).map_err(io_error(input))?;
    let (headers, rows) = Table::parse_csv(&text).map_err(PipelineError::Unsupported)?;
    if let FitModel::PowerLaw = model {
        let rabi = required(&headers, &rows, "rabi_Hz")?;
        let tau = required(&headers, &rows, "tau_s")?;
        let pts: Vec<(f64, f64)> = rabi.iter().map(|r| 2.0 * std::f64::consts::PI * r).zip(tau).collect();
        return Ok(fit_power_law(&pts)?);
    }
    let times = required(&headers, &rows, "time_s")?;
    let values = required(&headers, &rows, "value")?;
    let shots: Option<Vec<u64>> = column(&headers, &rows, "shots")?.map(|s| s.iter().map(|&v| v as u64).collect());
    let shots = shots.as_deref();
    Ok(match model {
        FitModel::Pair => fit_pair_coupling(&times, &values, shots)?,
        FitModel::Decay => fit_exponential(&times, &values, ExponentialKind::Decay, shots)?,
        FitModel::InverseExponential => fit_exponential(&times, &values, ExponentialKind::InverseExponential, shots)?,
        FitModel::PowerLaw => unreachable!(),
    })
}

fn run_replay(manifest_path: &Path, out: &Path, check: bool) -> Result<(), PipelineError> {
    let original = pipeline::read_manifest(manifest_path)?;
    let regenerated = pipeline::replay(&original, out)?;
    if check {
        let differing: Vec<&String> = original
            .files
            .iter()
            .filter(|(name, hash)| regenerated.files.get(*name) != Some(hash))
            .map(|(name, _)| name)
            .chain(regenerated.files.keys().filter(|k| !original.files.contains_key(*k)))
            .collect();
        if !differing.is_empty() {
            return Err(PipelineError::Manifest(format!("replay differs in {differing:?}")));
        }
        println!("replay matches {} files", original.files.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cli: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match &cli.command {
        Command::SolveCrystal(c) => run_stage(c, Stage::SolveCrystal),
        Command::Modes(c) => run_stage(c, Stage::Modes),
        Command::Couplings(c) => run_stage(c, Stage::Couplings),
        Command::Mask(c) => run_stage(c, Stage::Mask),
        Command::Simulate(c) => run_stage(c, Stage::Simulate),
        Command::Protocol(c) => run_stage(c, Stage::Protocol),
        Command::All(c) => run_stage(c, Stage::All),
        Command::Fit { input, model, out } => run_fit(input, *model).and_then(|fit| {
            let text = json_string(&fit);
            match out {
                Some(path) => write_file(path, &text).map_err(io_error(path)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }),
        Command::Replay { manifest, out, check } => run_replay(manifest, out, *check),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
