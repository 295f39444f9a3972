//! Scenario execution: crystal → modes → couplings → mask → dynamics or
//! protocol → fits, with every artifact collected in memory and written
//! only once the whole pipeline has succeeded.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{calibrate_detuning, coupling_matrix, CouplingError, CouplingMatrix};
use crate::crystal::{compute_normal_modes, solve_equilibrium_with, CrystalError, MinimizerOptions};
use crate::dynamics::{scan_evolution, DynamicsError, ObservableSeries, SpinState};
use crate::estimator::{fit_exponential, fit_pair_coupling, fit_power_law, ExponentialKind, FitError, FitResult};
use crate::export::{self, json_string, sha256_hex, Format, Table};
use crate::lattice::{apply_mask, verify_geometry, LatticeError, ShelveMask, TriangularArray};
use crate::scenario::{ConfigError, CouplingSource, MaskSource, Scenario, ScenarioKind};
use crate::stochastic::{
    run_protocol, sample_measurement, shot_rng, simulate_deshelving, simulate_depopulation, DeshelvingDrive,
    DeshelvingModel, MeasurementModel, ProtocolConfig, StochasticError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("crystal: {0}")]
    Crystal(#[from] CrystalError),
    #[error("coupling: {0}")]
    Coupling(#[from] CouplingError),
    #[error("lattice: {0}")]
    Lattice(#[from] LatticeError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("stochastic: {0}")]
    Stochastic(#[from] StochasticError),
    #[error("estimator: {0}")]
    Estimator(#[from] FitError),
    #[error("cli: {0}")]
    Unsupported(String),
    #[error("io: {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SolveCrystal,
    Modes,
    Couplings,
    Mask,
    Simulate,
    Protocol,
    All,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub format: Format,
    /// Overrides the scenario seed.
    pub seed: Option<u64>,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub name: String,
    pub stage: Stage,
    pub seed: u64,
    pub format: Format,
    pub input_sha256: String,
    /// Scenario text as given, for replay.
    pub scenario: String,
    /// Output file → SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Artifacts produced by one run, keyed by relative path.
#[derive(Debug, Default, Clone)]
pub struct Artifacts {
    pub files: BTreeMap<String, String>,
}

impl Artifacts {
    fn table(&mut self, stem: &str, table: &Table, format: Format) {
        self.files.insert(format!("{stem}.{}", format.extension()), table.render(format));
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        self.files.insert(format!("{name}.json"), json_string(value));
    }
}

struct Context<'a> {
    scenario: &'a Scenario,
    seed: u64,
    format: Format,
    artifacts: Artifacts,
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct CalibrationReport {
    detuning_Hz: f64,
    target_J_Hz: Option<f64>,
    achieved_J_Hz: Option<f64>,
    pair: Option<[usize; 2]>,
}

#[derive(Serialize)]
#[allow(non_snake_case)]
struct GraphReport {
    mask: String,
    survivors: Vec<usize>,
    couplings_Hz: Vec<Vec<f64>>,
}

fn hz(v: f64) -> f64 {
    v / (2.0 * PI)
}

impl Context<'_> {
    fn couplings(&mut self, stage: Stage) -> Result<CouplingMatrix, PipelineError> {
        match self.scenario.coupling_source()? {
            CouplingSource::Explicit(rows) => {
                if matches!(stage, Stage::SolveCrystal | Stage::Modes) {
                    return Err(PipelineError::Unsupported("scenario gives explicit couplings; there is no crystal to solve".into()));
                }
                let n = rows.len();
                let j = CouplingMatrix::from_fn(n, |a, b| 2.0 * PI * rows[a][b]);
                self.emit_couplings(&j);
                Ok(j)
            }
            CouplingSource::Physical { constants, trap, restarts, drive, calibration } => {
                let n = self.scenario.n_ions.unwrap_or(0);
                let opts = MinimizerOptions { restarts, ..MinimizerOptions::default() };
                let crystal = solve_equilibrium_with(&constants, &trap, n, self.seed, &opts)?;
                self.artifacts.table("crystal", &export::crystal_table(&crystal), self.format);
                if stage == Stage::SolveCrystal {
                    return Ok(CouplingMatrix::zeros(n));
                }
                let modes = compute_normal_modes(&constants, &trap, &crystal)?;
                self.artifacts.table("modes", &export::modes_table(&modes), self.format);
                if stage == Stage::Modes {
                    return Ok(CouplingMatrix::zeros(n));
                }
                let (drive, report) = match calibration {
                    Some(c) => {
                        let mu = calibrate_detuning(&modes, &drive, &constants, c.target, c.pair, c.side)?;
                        let drive = drive.with_detuning(mu);
                        let achieved = coupling_matrix(&modes, &drive, &constants)?.get(c.pair.0, c.pair.1);
                        let report = CalibrationReport {
                            detuning_Hz: hz(mu),
                            target_J_Hz: Some(hz(c.target)),
                            achieved_J_Hz: Some(hz(achieved)),
                            pair: Some([c.pair.0, c.pair.1]),
                        };
                        (drive, report)
                    }
                    None => (
                        drive,
                        CalibrationReport { detuning_Hz: hz(drive.detuning), target_J_Hz: None, achieved_J_Hz: None, pair: None },
                    ),
                };
                self.artifacts.json("detuning", &report);
                let j = coupling_matrix(&modes, &drive, &constants)?;
                self.emit_couplings(&j);
                Ok(j)
            }
        }
    }

    fn emit_couplings(&mut self, j: &CouplingMatrix) {
        self.artifacts.table("couplings", &export::couplings_table(j), self.format);
        self.artifacts.files.insert("couplings_matrix.json".into(), export::couplings_json(j));
    }

    fn explicit_mask(&self, n: usize) -> ShelveMask {
        match self.scenario.mask_source() {
            Some(MaskSource::Explicit(m)) => m,
            _ => ShelveMask::all_qubit(n),
        }
    }

    fn run_dynamics(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let j = self.couplings(stage)?;
        if matches!(stage, Stage::SolveCrystal | Stage::Modes | Stage::Couplings) {
            return Ok(());
        }
        let mask = self.explicit_mask(j.n_ions);
        let graph = apply_mask(&j, &mask)?;
        self.artifacts.json(
            "graph",
            &GraphReport {
                mask: mask.to_string(),
                survivors: graph.survivors.clone(),
                couplings_Hz: (0..graph.n_spins())
                    .map(|a| (0..graph.n_spins()).map(|b| hz(graph.couplings[(a, b)])).collect())
                    .collect(),
            },
        );
        if stage == Stage::Mask {
            return Ok(());
        }
        let times = self.scenario.time_grid();
        let initial = SpinState::all_down(graph.n_spins())?;
        let coherent = scan_evolution(&graph, &times, &initial, &crate::dynamics::DecoherenceModel::none())?;
        let series = scan_evolution(&graph, &times, &initial, &self.scenario.decoherence_model())?;
        self.artifacts.table("series_coherent", &export::series_table(&coherent), self.format);
        self.artifacts.table("series", &export::series_table(&series), self.format);

        let mut fit_input: (Vec<f64>, Option<Vec<u64>>) = (series.outcome(series.all_up_index()), None);
        if let Some(model) = self.scenario.measurement_model() {
            let counts = sample_series(&series, &model, self.seed)?;
            self.artifacts.table("sampled", &export::sampled_table(&series, &counts), self.format);
            let up = series.all_up_index();
            fit_input = (
                counts.iter().map(|c| c[up] as f64 / model.shots as f64).collect(),
                Some(vec![model.shots as u64; counts.len()]),
            );
        }
        if graph.n_spins() == 2 {
            self.artifacts.json("summary", &pair_summary(&series, graph.couplings[(0, 1)]));
            if self.scenario.fit_enabled() {
                let fit = fit_pair_coupling(&times, &fit_input.0, fit_input.1.as_deref())?;
                self.artifacts.json("fit", &fit);
            }
        }
        Ok(())
    }

    fn run_protocol(&mut self, stage: Stage) -> Result<(), PipelineError> {
        let j = self.couplings(stage)?;
        if matches!(stage, Stage::SolveCrystal | Stage::Modes | Stage::Couplings) {
            return Ok(());
        }
        if stage == Stage::Mask || stage == Stage::Simulate {
            return Err(PipelineError::Unsupported("protocol scenarios draw their masks per shot; use the `protocol` command".into()));
        }
        let beam_time = match self.scenario.mask_source() {
            Some(MaskSource::Probabilistic { beam_time }) => beam_time,
            _ => return Err(PipelineError::Unsupported("protocol needs mask.beam_time_s".into())),
        };
        let deshelving = match (&self.scenario.deshelving, self.scenario.deshelving_model(), self.scenario.deshelving_rabi()) {
            (Some(d), Some(model), Some(rabi)) if d.enabled => Some(DeshelvingDrive { model, rabi }),
            _ => None,
        };
        let config = ProtocolConfig {
            couplings: j,
            beam_time,
            times: self.scenario.time_grid(),
            shelving: self.scenario.shelving_process(),
            deshelving,
            measurement: self.scenario.measurement_model().expect("validated"),
            decoherence: self.scenario.decoherence_model(),
        };
        let result = run_protocol(&config, self.seed)?;
        self.artifacts.table("shots", &export::shots_table(&result.records), self.format);

        #[derive(Serialize)]
        struct GroupSummary {
            configuration: String,
            survivors: Vec<usize>,
            shots: u64,
            fit: Option<FitResult>,
            fit_error: Option<String>,
        }
        let mut summaries = Vec::new();
        for (mask, group) in &result.groups {
            self.artifacts.table(&format!("group_{mask}"), &export::group_table(group), self.format);
            let (mut fit, mut fit_error) = (None, None);
            if self.scenario.fit_enabled() && group.survivors.len() == 2 {
                let empirical = group.empirical();
                let shots = group.shots_at_sampled_times();
                match fit_pair_coupling(&empirical.times, &empirical.outcome(3), Some(&shots)) {
                    Ok(f) => fit = Some(f),
                    Err(e) => fit_error = Some(e.to_string()),
                }
            }
            summaries.push(GroupSummary {
                configuration: mask.to_string(),
                survivors: group.survivors.clone(),
                shots: group.total_shots(),
                fit,
                fit_error,
            });
        }

        #[derive(Serialize)]
        struct ProtocolSummary<'a> {
            total_shots: usize,
            rejected_shots: usize,
            shelve_probability: f64,
            groups: &'a [GroupSummary],
        }
        self.artifacts.json(
            "protocol",
            &ProtocolSummary {
                total_shots: result.records.len(),
                rejected_shots: result.rejected,
                shelve_probability: config.shelving.shelve_probability(beam_time),
                groups: &summaries,
            },
        );
        Ok(())
    }

    fn run_shelving_decay(&mut self) -> Result<(), PipelineError> {
        let times = self.scenario.time_grid();
        let model = self.scenario.measurement_model().expect("validated");
        let process = self.scenario.shelving_process();
        let points = simulate_depopulation(&times, model.shots as u64, &process, self.seed);
        self.artifacts.table("depopulation", &export::scan_table(&points, "remaining"), self.format);
        let values: Vec<f64> = points.iter().map(|p| p.fraction()).collect();
        let shots: Vec<u64> = points.iter().map(|p| p.shots).collect();
        let fit = fit_exponential(&times, &values, ExponentialKind::Decay, Some(&shots))?;
        self.artifacts.json("fit", &fit);
        Ok(())
    }

    fn run_deshelving_scan(&mut self) -> Result<(), PipelineError> {
        let times = self.scenario.time_grid();
        let shots = self.scenario.measurement_model().expect("validated").shots as u64;
        let model = self.scenario.deshelving_model().expect("validated");
        let rabis: Vec<f64> = self.scenario.deshelving.as_ref().unwrap().scan_rabi_hz.iter().map(|f| 2.0 * PI * f).collect();
        let scan = deshelving_scan(&rabis, &times, shots, &model, self.seed)?;

        let mut curves = Table::new(["rabi_Hz", "time_s", "shots_count", "returned_count", "returned_frac"]);
        let mut fits = Table::new(["rabi_Hz", "tau_g_s", "tau_g_se_s", "model_tau_g_s"]);
        for entry in &scan.entries {
            for p in &entry.points {
                curves.push(vec![hz(entry.rabi).into(), p.time.into(), p.shots.into(), p.hits.into(), p.fraction().into()]);
            }
            fits.push(vec![
                hz(entry.rabi).into(),
                entry.fit.value("tau").into(),
                entry.fit.std_error("tau").into(),
                model.tau(entry.rabi).into(),
            ]);
        }
        self.artifacts.table("deshelving", &curves, self.format);
        self.artifacts.table("deshelving_fits", &fits, self.format);
        self.artifacts.json("power_law", &scan.power_law);
        Ok(())
    }

    fn run_lattice(&mut self) -> Result<(), PipelineError> {
        let l = self.scenario.lattice.as_ref().expect("validated");
        let pattern = match self.scenario.mask_source() {
            Some(MaskSource::Pattern(p)) => p,
            _ => return Err(PipelineError::Unsupported("lattice scenarios need mask.pattern".into())),
        };
        let array = TriangularArray::rhombus(l.cols, l.rows);
        let j = array.power_law_couplings(2.0 * PI * l.nn_coupling_hz, l.alpha);
        let mask = pattern.mask(&array);

        #[derive(Serialize)]
        struct MaskReport {
            pattern: String,
            cols: usize,
            rows: usize,
            mask: String,
            shelved: usize,
            survivors: usize,
        }
        self.artifacts.json(
            "mask",
            &MaskReport {
                pattern: pattern.to_string(),
                cols: l.cols,
                rows: l.rows,
                mask: mask.to_string(),
                shelved: mask.shelved_count(),
                survivors: mask.len() - mask.shelved_count(),
            },
        );
        let graph = apply_mask(&j, &mask)?;
        let report = verify_geometry(&graph, &array, &pattern.to_string(), l.threshold_hz.map(|t| 2.0 * PI * t))?;
        self.artifacts.json("geometry", &report);
        Ok(())
    }
}

/// Readout counts at each time point, one random stream per point.
fn sample_series(series: &ObservableSeries, model: &MeasurementModel, seed: u64) -> Result<Vec<Vec<u64>>, StochasticError> {
    series
        .probabilities
        .iter()
        .enumerate()
        .map(|(k, p)| sample_measurement(p, model, &mut shot_rng(seed, k as u64)))
        .collect()
}

#[derive(Debug, Serialize)]
#[allow(non_snake_case)]
struct PairSummary {
    J_Hz: f64,
    expected_first_max_s: f64,
    observed_first_max_s: Option<f64>,
}

/// First local maximum of P(↑↑), refined by a parabola through the three
/// samples around the peak.
pub fn first_maximum(times: &[f64], values: &[f64]) -> Option<f64> {
    (1..values.len().saturating_sub(1)).find(|&k| values[k] >= values[k - 1] && values[k] > values[k + 1]).map(|k| {
        let (y0, y1, y2) = (values[k - 1], values[k], values[k + 1]);
        let h = times[k] - times[k - 1];
        let denom = y0 - 2.0 * y1 + y2;
        if denom == 0.0 {
            times[k]
        } else {
            times[k] + 0.5 * h * (y0 - y2) / denom
        }
    })
}

fn pair_summary(series: &ObservableSeries, j: f64) -> PairSummary {
    PairSummary {
        J_Hz: hz(j),
        expected_first_max_s: PI / (2.0 * j.abs()),
        observed_first_max_s: first_maximum(&series.times, &series.outcome(series.all_up_index())),
    }
}

pub struct DeshelvingScanEntry {
    pub rabi: f64,
    pub points: Vec<crate::stochastic::ScanPoint>,
    pub fit: FitResult,
}

pub struct DeshelvingScan {
    pub entries: Vec<DeshelvingScanEntry>,
    pub power_law: FitResult,
}

/// Deshelving curves at each Rabi frequency, an inverse-exponential fit per
/// curve, and a power-law fit of the fitted τ_g against Ω.
///
/// The time grid is stretched per curve by `τ_g(Ω)/τ_g(Ω_first)` so every
/// curve covers the same fraction of its own decay.
pub fn deshelving_scan(
    rabis: &[f64],
    times: &[f64],
    shots: u64,
    model: &DeshelvingModel,
    seed: u64,
) -> Result<DeshelvingScan, PipelineError> {
    let base = model.tau(rabis[0]);
    let mut entries = Vec::new();
    for (k, &rabi) in rabis.iter().enumerate() {
        let stretch = model.tau(rabi) / base;
        let scaled: Vec<f64> = times.iter().map(|t| t * stretch).collect();
        let drive = DeshelvingDrive { model: *model, rabi };
        let points = simulate_deshelving(&scaled, shots, &drive, seed, (k as u64) << 32);
        let values: Vec<f64> = points.iter().map(|p| p.fraction()).collect();
        let n: Vec<u64> = points.iter().map(|p| p.shots).collect();
        let fit = fit_exponential(&scaled, &values, ExponentialKind::InverseExponential, Some(&n))?;
        entries.push(DeshelvingScanEntry { rabi, points, fit });
    }
    let pts: Vec<(f64, f64)> = entries.iter().map(|e| (e.rabi, e.fit.value("tau"))).collect();
    let power_law = fit_power_law(&pts)?;
    Ok(DeshelvingScan { entries, power_law })
}

/// Run a scenario and return its artifacts without touching the filesystem.
pub fn execute(scenario: &Scenario, seed: u64, format: Format, stage: Stage) -> Result<Artifacts, PipelineError> {
    let mut ctx = Context { scenario, seed, format, artifacts: Artifacts::default() };
    match (scenario.kind, stage) {
        (ScenarioKind::Dynamics, Stage::Protocol) => {
            return Err(PipelineError::Unsupported("dynamics scenarios have no shot protocol; use `simulate`".into()))
        }
        (ScenarioKind::Dynamics, _) => ctx.run_dynamics(stage)?,
        (ScenarioKind::Protocol, Stage::All) => ctx.run_protocol(Stage::Protocol)?,
        (ScenarioKind::Protocol, _) => ctx.run_protocol(stage)?,
        (ScenarioKind::ShelvingDecay, Stage::All | Stage::Simulate) => ctx.run_shelving_decay()?,
        (ScenarioKind::DeshelvingScan, Stage::All | Stage::Simulate) => ctx.run_deshelving_scan()?,
        (ScenarioKind::Lattice, Stage::All | Stage::Mask) => ctx.run_lattice()?,
        (kind, stage) => {
            return Err(PipelineError::Unsupported(format!("stage {stage:?} does not apply to {kind:?} scenarios")))
        }
    }
    Ok(ctx.artifacts)
}

/// Parse, execute and write all artifacts plus `manifest.json` to `out_dir`.
pub fn run(scenario_text: &str, options: &RunOptions) -> Result<Manifest, PipelineError> {
    let scenario = Scenario::parse(scenario_text)?;
    let seed = options.seed.unwrap_or(scenario.seed);
    let artifacts = execute(&scenario, seed, options.format, options.stage)?;
    let files = artifacts.files.iter().map(|(k, v)| (k.clone(), sha256_hex(v.as_bytes()))).collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        name: scenario.name.clone(),
        stage: options.stage,
        seed,
        format: options.format,
        input_sha256: sha256_hex(scenario_text.as_bytes()),
        scenario: scenario_text.to_string(),
        files,
    };
    for (name, contents) in &artifacts.files {
        let path = options.out_dir.join(name);
        export::write_file(&path, contents).map_err(|source| PipelineError::Io { path, source })?;
    }
    let path = options.out_dir.join(MANIFEST_FILE);
    export::write_file(&path, &json_string(&manifest)).map_err(|source| PipelineError::Io { path, source })?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))
}

/// Re-run the scenario recorded in a manifest into `out_dir`.
pub fn replay(manifest: &Manifest, out_dir: &Path) -> Result<Manifest, PipelineError> {
    if sha256_hex(manifest.scenario.as_bytes()) != manifest.input_sha256 {
        return Err(PipelineError::Manifest("embedded scenario does not match input_sha256".into()));
    }
    run(
        &manifest.scenario,
        &RunOptions { out_dir: out_dir.to_path_buf(), format: manifest.format, seed: Some(manifest.seed), stage: manifest.stage },
    )
}
