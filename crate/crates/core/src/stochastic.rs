//! Monte Carlo models for optical-pumping shelving, laser-induced deshelving,
//! projective readout with SPAM error, and the post-selected shelving protocol.
//!
//! Every shot draws from its own ChaCha stream `(seed, shot)`, so parallel and
//! sequential execution produce identical records.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::CouplingMatrix;
use crate::dynamics::{scan_evolution, DecoherenceModel, DynamicsError, ObservableSeries, SpinState};
use crate::lattice::{apply_mask, LatticeError, ShelveMask, SiteState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Per-shot random stream.
pub fn shot_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShelvingProcess {
    /// Depopulation time constant of the S manifold under the pumping beam, seconds.
    pub tau_shelve: f64,
}

impl Default for ShelvingProcess {
    fn default() -> Self {
        Self { tau_shelve: 55e-3 }
    }
}

impl ShelvingProcess {
    pub fn new(tau_shelve: f64) -> Result<Self, StochasticError> {
        if !(tau_shelve.is_finite() && tau_shelve > 0.0) {
            return Err(StochasticError::InvalidInput(format!("tau_shelve must be positive, got {tau_shelve}")));
        }
        Ok(Self { tau_shelve })
    }

    pub fn shelve_probability(&self, beam_time: f64) -> f64 {
        1.0 - shelf_survival(beam_time, self)
    }

    /// Beam time giving a per-ion shelving probability `p`.
    pub fn beam_time_for_probability(&self, p: f64) -> f64 {
        -self.tau_shelve * (1.0 - p).ln()
    }
}

/// Probability of still being in the S manifold after `t` of pumping.
pub fn shelf_survival(t: f64, process: &ShelvingProcess) -> f64 {
    (-t / process.tau_shelve).exp()
}

pub fn sample_shelving<R: Rng + ?Sized>(n: usize, beam_time: f64, process: &ShelvingProcess, rng: &mut R) -> ShelveMask {
    let p = process.shelve_probability(beam_time);
    ShelveMask::from_states(
        (0..n).map(|_| if rng.gen::<f64>() < p { SiteState::Shelved } else { SiteState::Qubit }).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeshelvingModel {
    pub reference_rabi: f64,
    pub reference_tau: f64,
    pub exponent: f64,
}

impl Default for DeshelvingModel {
    fn default() -> Self {
        Self { reference_rabi: 2.0 * PI * 76e3, reference_tau: 0.5, exponent: 2.0 }
    }
}

impl DeshelvingModel {
    pub fn validate(&self) -> Result<(), StochasticError> {
        for (name, v) in [
            ("reference_rabi", self.reference_rabi),
            ("reference_tau", self.reference_tau),
            ("exponent", self.exponent),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(StochasticError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `τ_g(Ω) = τ_ref · (Ω_ref / Ω)^exponent`.
    pub fn tau(&self, rabi: f64) -> f64 {
        self.reference_tau * (self.reference_rabi / rabi).powf(self.exponent)
    }

    pub fn sample_return_time<R: Rng + ?Sized>(&self, rabi: f64, rng: &mut R) -> f64 {
        Exp::new(1.0 / self.tau(rabi)).expect("positive rate").sample(rng)
    }
}

pub fn deshelve_probability(t: f64, rabi: f64, model: &DeshelvingModel) -> f64 {
    1.0 - (-t / model.tau(rabi)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub spam_error: f64,
    pub shots: usize,
}

impl Default for MeasurementModel {
    fn default() -> Self {
        Self { spam_error: 0.04, shots: 150 }
    }
}

impl MeasurementModel {
    pub fn validate(&self) -> Result<(), StochasticError> {
        if !(0.0..=1.0).contains(&self.spam_error) {
            return Err(StochasticError::InvalidInput(format!("spam_error must lie in [0, 1], got {}", self.spam_error)));
        }
        if self.shots == 0 {
            return Err(StochasticError::InvalidInput("shots must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_distribution(probabilities: &[f64]) -> Result<usize, StochasticError> {
    let len = probabilities.len();
    if len == 0 || !len.is_power_of_two() {
        return Err(StochasticError::InvalidInput(format!("{len} outcomes is not a power of two")));
    }
    if probabilities.iter().any(|p| !(p.is_finite() && *p >= -1e-12)) {
        return Err(StochasticError::InvalidInput("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(StochasticError::InvalidInput(format!("probabilities sum to {total}, not 1")));
    }
    Ok(len.trailing_zeros() as usize)
}

/// One readout: draw the outcome, then flip each bit with probability `spam_error`.
fn draw_outcome<R: Rng + ?Sized>(probabilities: &[f64], n_bits: usize, spam_error: f64, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut outcome = probabilities.len() - 1;
    for (k, &p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            outcome = k;
            break;
        }
    }
    for bit in 0..n_bits {
        if rng.gen::<f64>() < spam_error {
            outcome ^= 1 << bit;
        }
    }
    outcome
}

/// Outcome counts per z-basis index for `model.shots` readouts.
pub fn sample_measurement<R: Rng + ?Sized>(
    probabilities: &[f64],
    model: &MeasurementModel,
    rng: &mut R,
) -> Result<Vec<u64>, StochasticError> {
    model.validate()?;
    let n_bits = check_distribution(probabilities)?;
    let mut counts = vec![0u64; probabilities.len()];
    for _ in 0..model.shots {
        counts[draw_outcome(probabilities, n_bits, model.spam_error, rng)] += 1;
    }
    Ok(counts)
}

/// Laser drive that may return shelved ions during evolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeshelvingDrive {
    pub model: DeshelvingModel,
    pub rabi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub couplings: CouplingMatrix,
    /// Duration of the pumping pulse before the first detection, seconds.
    pub beam_time: f64,
    /// Evolution times, seconds.
    pub times: Vec<f64>,
    pub shelving: ShelvingProcess,
    /// `None` keeps shelved ions shelved for the whole sequence.
    pub deshelving: Option<DeshelvingDrive>,
    /// Readout model; `shots` is the repetition count per time point.
    pub measurement: MeasurementModel,
    pub decoherence: DecoherenceModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot: u64,
    pub time_index: usize,
    pub time: f64,
    /// Configuration seen by the first detection block.
    pub configuration: ShelveMask,
    /// Readout per ion, `None` for shelved ions.
    pub outcomes: Vec<Option<u8>>,
    /// False when a shelved ion returned to the qubit manifold mid-evolution.
    pub intact: bool,
}

impl ShotRecord {
    /// Readout as a string, one character per ion: `0`, `1`, or `-` for shelved.
    pub fn outcome_string(&self) -> String {
        self.outcomes
            .iter()
            .map(|o| match o {
                Some(0) => '0',
                Some(_) => '1',
                None => '-',
            })
            .collect()
    }

    /// Outcome index over the surviving ions, bit `k` = `k`-th survivor.
    pub fn reduced_outcome(&self) -> usize {
        self.outcomes
            .iter()
            .flatten()
            .enumerate()
            .fold(0, |acc, (k, &b)| acc | ((b as usize) << k))
    }
}

/// Post-selected data for one verified shelving configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationGroup {
    pub configuration: ShelveMask,
    pub survivors: Vec<usize>,
    /// Intact shots per time point.
    pub shots: Vec<u64>,
    /// `counts[t][outcome]` over the survivors' z-basis outcomes.
    pub counts: Vec<Vec<u64>>,
    /// Exact (decohered) probabilities the shots were drawn from.
    pub model: ObservableSeries,
}

impl ConfigurationGroup {
    pub fn total_shots(&self) -> u64 {
        self.shots.iter().sum()
    }

    /// Empirical frequencies at time points that received at least one shot.
    pub fn empirical(&self) -> ObservableSeries {
        let mut times = Vec::new();
        let mut probabilities = Vec::new();
        for (t, (&n, counts)) in self.model.times.iter().zip(self.shots.iter().zip(&self.counts)) {
            if n > 0 {
                times.push(*t);
                probabilities.push(counts.iter().map(|&c| c as f64 / n as f64).collect());
            }
        }
        ObservableSeries { n_spins: self.survivors.len(), times, probabilities, long_time_limit: None }
    }

    pub fn shots_at_sampled_times(&self) -> Vec<u64> {
        self.shots.iter().copied().filter(|&n| n > 0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolResult {
    pub records: Vec<ShotRecord>,
    pub groups: BTreeMap<ShelveMask, ConfigurationGroup>,
    /// Shots dropped because the shelving configuration did not stay intact.
    pub rejected: usize,
}

struct Preparation {
    configuration: ShelveMask,
    intact: bool,
    rng: ChaCha8Rng,
}

pub fn run_protocol(config: &ProtocolConfig, seed: u64) -> Result<ProtocolResult, StochasticError> {
    config.measurement.validate()?;
    config.decoherence.validate()?;
    if let Some(d) = &config.deshelving {
        d.model.validate()?;
        if !(d.rabi > 0.0) {
            return Err(StochasticError::InvalidInput(format!("deshelving Rabi frequency must be positive, got {}", d.rabi)));
        }
    }
    if !(config.beam_time >= 0.0) {
        return Err(StochasticError::InvalidInput(format!("beam_time must be ≥ 0, got {}", config.beam_time)));
    }
    if config.times.iter().any(|t| !(*t >= 0.0)) {
        return Err(StochasticError::InvalidInput("evolution times must be ≥ 0".into()));
    }
    let n = config.couplings.n_ions;
    let shots = config.measurement.shots;
    let total = config.times.len() * shots;

    // shelving + first detection + deshelving during evolution
    let prepared: Vec<Preparation> = (0..total)
        .into_par_iter()
        .map(|shot| {
            let mut rng = shot_rng(seed, shot as u64);
            let configuration = sample_shelving(n, config.beam_time, &config.shelving, &mut rng);
            let t = config.times[shot / shots];
            let mut intact = true;
            if let Some(d) = &config.deshelving {
                for _ in configuration.shelved() {
                    if d.model.sample_return_time(d.rabi, &mut rng) < t {
                        intact = false;
                    }
                }
            }
            Preparation { configuration, intact, rng }
        })
        .collect();

    let mut configurations: Vec<ShelveMask> = prepared.iter().map(|p| p.configuration.clone()).collect();
    configurations.sort();
    configurations.dedup();
    let models: BTreeMap<ShelveMask, ObservableSeries> = configurations
        .into_par_iter()
        .map(|mask| {
            let graph = apply_mask(&config.couplings, &mask)?;
            let initial = SpinState::all_down(graph.n_spins())?;
            let series = scan_evolution(&graph, &config.times, &initial, &config.decoherence)?;
            Ok((mask, series))
        })
        .collect::<Result<_, StochasticError>>()?;

    let records: Vec<ShotRecord> = prepared
        .into_par_iter()
        .enumerate()
        .map(|(shot, mut prep)| {
            let time_index = shot / shots;
            let model = &models[&prep.configuration];
            let probabilities = &model.probabilities[time_index];
            let n_bits = model.n_spins;
            let reduced = draw_outcome(probabilities, n_bits, config.measurement.spam_error, &mut prep.rng);
            let mut k = 0;
            let outcomes = prep
                .configuration
                .states()
                .iter()
                .map(|s| match s {
                    SiteState::Shelved => None,
                    SiteState::Qubit => {
                        let bit = (reduced >> k & 1) as u8;
                        k += 1;
                        Some(bit)
                    }
                })
                .collect();
            ShotRecord {
                shot: shot as u64,
                time_index,
                time: config.times[time_index],
                configuration: prep.configuration,
                outcomes,
                intact: prep.intact,
            }
        })
        .collect();

    let mut groups: BTreeMap<ShelveMask, ConfigurationGroup> = BTreeMap::new();
    let mut rejected = 0;
    for r in &records {
        if !r.intact {
            rejected += 1;
            continue;
        }
        let group = groups.entry(r.configuration.clone()).or_insert_with(|| {
            let model = models[&r.configuration].clone();
            ConfigurationGroup {
                configuration: r.configuration.clone(),
                survivors: r.configuration.survivors(),
                shots: vec![0; config.times.len()],
                counts: vec![vec![0; 1 << model.n_spins]; config.times.len()],
                model,
            }
        });
        group.shots[r.time_index] += 1;
        group.counts[r.time_index][r.reduced_outcome()] += 1;
    }
    Ok(ProtocolResult { records, groups, rejected })
}

/// One point of a population scan: `hits` of `shots` landed in the tracked state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub time: f64,
    pub shots: u64,
    pub hits: u64,
}

impl ScanPoint {
    pub fn fraction(&self) -> f64 {
        self.hits as f64 / self.shots as f64
    }
}

/// Fraction of ions still in the S manifold after each pumping time.
pub fn simulate_depopulation(
    times: &[f64],
    shots: u64,
    process: &ShelvingProcess,
    seed: u64,
) -> Vec<ScanPoint> {
    times
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut rng = shot_rng(seed, k as u64);
            let hits = (0..shots)
                .filter(|_| sample_shelving(1, t, process, &mut rng).states()[0] == SiteState::Qubit)
                .count() as u64;
            ScanPoint { time: t, shots, hits }
        })
        .collect()
}

/// Fraction of shelved ions returned to the ground manifold after exposure
/// to the drive for each time. `stream_offset` separates scans sharing a seed.
pub fn simulate_deshelving(
    times: &[f64],
    shots: u64,
    drive: &DeshelvingDrive,
    seed: u64,
    stream_offset: u64,
) -> Vec<ScanPoint> {
    times
        .par_iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut rng = shot_rng(seed, stream_offset + k as u64);
            let hits = (0..shots).filter(|_| drive.model.sample_return_time(drive.rabi, &mut rng) < t).count() as u64;
            ScanPoint { time: t, shots, hits }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_values() {
        let p = ShelvingProcess::default();
        assert_eq!(shelf_survival(0.0, &p), 1.0);
        assert!((shelf_survival(55e-3, &p) - (-1.0f64).exp()).abs() < 1e-15);
        let t = p.beam_time_for_probability(0.5);
        assert!((t - 55e-3 * 2f64.ln()).abs() < 1e-15);
        // ≈ 38 ms sits at the top of the 30–50% window
        assert!((t - 38.1e-3).abs() < 0.1e-3);
        let q = p.shelve_probability(38e-3);
        assert!(q > 0.3 && q < 0.5 + 1e-2);
    }

    #[test]
    fn shelving_extremes() {
        let p = ShelvingProcess::default();
        let mut rng = shot_rng(1, 0);
        assert_eq!(sample_shelving(5, 0.0, &p, &mut rng).shelved_count(), 0);
        assert_eq!(sample_shelving(5, f64::INFINITY, &p, &mut rng).shelved_count(), 5);
    }

    #[test]
    fn deshelving_values() {
        let m = DeshelvingModel::default();
        assert_eq!(deshelve_probability(0.0, m.reference_rabi, &m), 0.0);
        let p = deshelve_probability(0.5, 2.0 * PI * 76e3, &m);
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((m.tau(2.0 * PI * 152e3) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn spam_free_readout_is_exact() {
        let model = MeasurementModel { spam_error: 0.0, shots: 150 };
        let counts = sample_measurement(&[1.0, 0.0, 0.0, 0.0], &model, &mut shot_rng(3, 0)).unwrap();
        assert_eq!(counts, vec![150, 0, 0, 0]);
    }

    #[test]
    fn unnormalized_input_rejected() {
        let model = MeasurementModel { spam_error: 0.0, shots: 10 };
        assert!(sample_measurement(&[0.5, 0.4], &model, &mut shot_rng(0, 0)).is_err());
        assert!(sample_measurement(&[0.5, 0.25, 0.25], &model, &mut shot_rng(0, 0)).is_err());
        let bad = MeasurementModel { spam_error: 1.5, shots: 10 };
        assert!(sample_measurement(&[1.0, 0.0], &bad, &mut shot_rng(0, 0)).is_err());
    }

    #[test]
    fn deshelving_disabled_keeps_all_intact() {
        let config = ProtocolConfig {
            couplings: CouplingMatrix::from_fn(3, |_, _| 2.0 * PI * 450.0),
            beam_time: 0.03,
            times: vec![0.0, 1e-3],
            shelving: ShelvingProcess::default(),
            deshelving: None,
            measurement: MeasurementModel { spam_error: 0.0, shots: 50 },
            decoherence: DecoherenceModel::none(),
        };
        let r = run_protocol(&config, 9).unwrap();
        assert_eq!(r.rejected, 0);
        assert_eq!(r.records.len(), 100);
        let grouped: u64 = r.groups.values().map(|g| g.total_shots()).sum();
        assert_eq!(grouped as usize, 100);
        for rec in &r.records {
            assert_eq!(rec.outcome_string().matches('-').count(), rec.configuration.shelved_count());
        }
    }
}
