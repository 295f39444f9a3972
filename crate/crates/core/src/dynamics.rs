//! Exact evolution under `H = Σ_{i<j} J_ij σˣ_i σˣ_j`.
//!
//! All terms commute and are diagonal in the x basis, so the propagator is a
//! phase `exp(−i t Σ J_ij s_i s_j)` per x-basis state. The basis change is a
//! normalized Walsh-Hadamard transform, which is its own inverse.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::InteractionGraph;

/// Largest spin count accepted by the state-vector routines.
pub const MAX_SPINS: usize = 14;

/// Largest spin count for which the dephased limit is computed exactly.
const MAX_SPINS_DEPHASED: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{requested} spins exceeds the capacity of {cap}")]
    Capacity { requested: usize, cap: usize },
    #[error("state has {state} spins but the graph has {graph}")]
    SizeMismatch { state: usize, graph: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid decoherence model: {0}")]
    InvalidModel(String),
}

/// Pure state over `2^n` z-basis outcomes. Bit `i` of an index is spin `i`
/// (0 = ↓, 1 = ↑).
#[derive(Debug, Clone, PartialEq)]
pub struct SpinState {
    n_spins: usize,
    amplitudes: Vec<Complex64>,
}

impl SpinState {
    pub fn all_down(n: usize) -> Result<Self, DynamicsError> {
        check_capacity(n)?;
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n];
        amplitudes[0] = Complex64::new(1.0, 0.0);
        Ok(Self { n_spins: n, amplitudes })
    }

    pub fn basis(n: usize, index: usize) -> Result<Self, DynamicsError> {
        check_capacity(n)?;
        if index >= 1 << n {
            return Err(DynamicsError::InvalidState(format!("basis index {index} out of range for {n} spins")));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); 1 << n];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Self { n_spins: n, amplitudes })
    }

    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self, DynamicsError> {
        let len = amplitudes.len();
        if len == 0 || !len.is_power_of_two() {
            return Err(DynamicsError::InvalidState(format!("length {len} is not a power of two")));
        }
        let n = len.trailing_zeros() as usize;
        check_capacity(n)?;
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(DynamicsError::InvalidState(format!("norm {norm} differs from 1")));
        }
        Ok(Self { n_spins: n, amplitudes })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }
}

fn check_capacity(n: usize) -> Result<(), DynamicsError> {
    if n > MAX_SPINS {
        Err(DynamicsError::Capacity { requested: n, cap: MAX_SPINS })
    } else {
        Ok(())
    }
}

fn walsh_hadamard(v: &mut [Complex64]) {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let mut h = 1;
    while h < v.len() {
        for block in (0..v.len()).step_by(2 * h) {
            for k in block..block + h {
                let (a, b) = (v[k], v[k + h]);
                v[k] = (a + b) * scale;
                v[k + h] = (a - b) * scale;
            }
        }
        h *= 2;
    }
}

/// Ising energies of every x-basis state, ready for repeated evolution.
#[derive(Debug, Clone)]
pub struct IsingPropagator {
    n_spins: usize,
    energies: Vec<f64>,
}

impl IsingPropagator {
    pub fn new(graph: &InteractionGraph) -> Result<Self, DynamicsError> {
        let n = graph.n_spins();
        check_capacity(n)?;
        let j = &graph.couplings;
        let energies = (0..1usize << n)
            .map(|s| {
                let mut e = 0.0;
                for a in 0..n {
                    let sa = if s >> a & 1 == 0 { 1.0 } else { -1.0 };
                    for b in (a + 1)..n {
                        let sb = if s >> b & 1 == 0 { 1.0 } else { -1.0 };
                        e += j[(a, b)] * sa * sb;
                    }
                }
                e
            })
            .collect();
        Ok(Self { n_spins: n, energies })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn evolve(&self, t: f64, initial: &SpinState) -> Result<SpinState, DynamicsError> {
        if initial.n_spins != self.n_spins {
            return Err(DynamicsError::SizeMismatch { state: initial.n_spins, graph: self.n_spins });
        }
        let mut amps = initial.amplitudes.clone();
        walsh_hadamard(&mut amps);
        for (a, &e) in amps.iter_mut().zip(&self.energies) {
            *a *= Complex64::from_polar(1.0, -e * t);
        }
        walsh_hadamard(&mut amps);
        Ok(SpinState { n_spins: self.n_spins, amplitudes: amps })
    }

    /// Infinite-time average of the z-basis populations: coherences between
    /// distinct energies average out, those within a degenerate level remain.
    pub fn dephased_populations(&self, initial: &SpinState) -> Option<Vec<f64>> {
        if self.n_spins > MAX_SPINS_DEPHASED || initial.n_spins != self.n_spins {
            return None;
        }
        let mut x_amps = initial.amplitudes.clone();
        walsh_hadamard(&mut x_amps);
        let scale = self.energies.iter().fold(0.0f64, |m, e| m.max(e.abs())).max(1e-300);
        let mut order: Vec<usize> = (0..self.energies.len()).collect();
        order.sort_by(|&a, &b| self.energies[a].partial_cmp(&self.energies[b]).unwrap());

        let mut limit = vec![0.0; x_amps.len()];
        let mut start = 0;
        while start < order.len() {
            let mut end = start + 1;
            while end < order.len() && self.energies[order[end]] - self.energies[order[start]] <= 1e-9 * scale {
                end += 1;
            }
            let mut level = vec![Complex64::new(0.0, 0.0); x_amps.len()];
            let mut any = false;
            for &s in &order[start..end] {
                if x_amps[s].norm_sqr() > 0.0 {
                    level[s] = x_amps[s];
                    any = true;
                }
            }
            if any {
                walsh_hadamard(&mut level);
                for (l, a) in limit.iter_mut().zip(&level) {
                    *l += a.norm_sqr();
                }
            }
            start = end;
        }
        Some(limit)
    }
}

pub fn evolve_ising(graph: &InteractionGraph, t: f64, initial: &SpinState) -> Result<SpinState, DynamicsError> {
    IsingPropagator::new(graph)?.evolve(t, initial)
}

pub fn populations(state: &SpinState) -> Vec<f64> {
    state.amplitudes.iter().map(|a| a.norm_sqr()).collect()
}

/// Marginal distribution over the spins in `keep` (output bit `k` is spin `keep[k]`).
pub fn marginal(probabilities: &[f64], keep: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; 1 << keep.len()];
    for (idx, &p) in probabilities.iter().enumerate() {
        let mut reduced = 0;
        for (k, &spin) in keep.iter().enumerate() {
            reduced |= (idx >> spin & 1) << k;
        }
        out[reduced] += p;
    }
    out
}

/// Outcome label with spin 0 leftmost, e.g. index 1 of two spins → "10".
pub fn outcome_label(index: usize, n: usize) -> String {
    (0..n).map(|i| if index >> i & 1 == 1 { '1' } else { '0' }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceModel {
    /// Contrast decay time in seconds; infinite disables decoherence.
    pub tau_d: f64,
    /// Per-outcome long-time populations; `None` uses the dephased limit of
    /// the coherent signal.
    pub asymptote: Option<Vec<f64>>,
}

impl DecoherenceModel {
    pub fn none() -> Self {
        Self { tau_d: f64::INFINITY, asymptote: None }
    }

    pub fn with_tau(tau_d: f64) -> Result<Self, DynamicsError> {
        let m = Self { tau_d, asymptote: None };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.tau_d > 0.0) {
            return Err(DynamicsError::InvalidModel(format!("tau_d must be positive or infinite, got {}", self.tau_d)));
        }
        Ok(())
    }

    pub fn is_disabled(&self) -> bool {
        self.tau_d.is_infinite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub n_spins: usize,
    /// Sample times in seconds.
    pub times: Vec<f64>,
    /// `probabilities[t][outcome]` over the `2^n` z-basis outcomes.
    pub probabilities: Vec<Vec<f64>>,
    /// Fully dephased populations of the coherent signal, when known.
    pub long_time_limit: Option<Vec<f64>>,
}

impl ObservableSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Time series of one outcome's probability.
    pub fn outcome(&self, index: usize) -> Vec<f64> {
        self.probabilities.iter().map(|p| p[index]).collect()
    }

    pub fn all_up_index(&self) -> usize {
        (1 << self.n_spins) - 1
    }

    /// Mean ⟨σᶻ⟩ over spins (↑ = +1) at step `t`.
    pub fn magnetization(&self, t: usize) -> f64 {
        if self.n_spins == 0 {
            return 0.0;
        }
        let mut m = 0.0;
        for (idx, p) in self.probabilities[t].iter().enumerate() {
            let ups = idx.count_ones() as f64;
            m += p * (2.0 * ups - self.n_spins as f64);
        }
        m / self.n_spins as f64
    }

    /// Time average of each outcome over the sampled grid.
    pub fn time_average(&self) -> Vec<f64> {
        let width = 1 << self.n_spins;
        let mut avg = vec![0.0; width];
        if self.probabilities.is_empty() {
            return avg;
        }
        for p in &self.probabilities {
            for (a, v) in avg.iter_mut().zip(p) {
                *a += v;
            }
        }
        let len = self.probabilities.len() as f64;
        avg.iter_mut().for_each(|a| *a /= len);
        avg
    }
}

/// Relax each outcome toward its long-time value with `e^{−t/τ_d}`.
pub fn apply_decoherence(series: &ObservableSeries, model: &DecoherenceModel) -> Result<ObservableSeries, DynamicsError> {
    model.validate()?;
    if model.is_disabled() {
        return Ok(series.clone());
    }
    let limit = match (&model.asymptote, &series.long_time_limit) {
        (Some(a), _) => {
            if a.len() != 1 << series.n_spins {
                return Err(DynamicsError::InvalidModel(format!(
                    "asymptote has {} entries, expected {}",
                    a.len(),
                    1usize << series.n_spins
                )));
            }
            a.clone()
        }
        (None, Some(l)) => l.clone(),
        (None, None) => series.time_average(),
    };
    let probabilities = series
        .times
        .iter()
        .zip(&series.probabilities)
        .map(|(&t, p)| {
            let envelope = (-t / model.tau_d).exp();
            p.iter().zip(&limit).map(|(&v, &l)| l + (v - l) * envelope).collect()
        })
        .collect();
    Ok(ObservableSeries { probabilities, ..series.clone() })
}

pub fn scan_evolution(
    graph: &InteractionGraph,
    times: &[f64],
    initial: &SpinState,
    model: &DecoherenceModel,
) -> Result<ObservableSeries, DynamicsError> {
    let propagator = IsingPropagator::new(graph)?;
    if initial.n_spins != propagator.n_spins {
        return Err(DynamicsError::SizeMismatch { state: initial.n_spins, graph: propagator.n_spins });
    }
    let probabilities = times
        .par_iter()
        .map(|&t| propagator.evolve(t, initial).map(|s| populations(&s)))
        .collect::<Result<Vec<_>, _>>()?;
    let coherent = ObservableSeries {
        n_spins: propagator.n_spins,
        times: times.to_vec(),
        probabilities,
        long_time_limit: propagator.dephased_populations(initial),
    };
    apply_decoherence(&coherent, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn pair_graph(j: f64) -> InteractionGraph {
        InteractionGraph {
            survivors: vec![0, 1],
            couplings: DMatrix::from_row_slice(2, 2, &[0.0, j, j, 0.0]),
            threshold: None,
        }
    }

    #[test]
    fn zero_coupling_leaves_state() {
        let g = pair_graph(0.0);
        let psi = SpinState::basis(2, 2).unwrap();
        let out = evolve_ising(&g, 1.234, &psi).unwrap();
        for (a, b) in out.amplitudes().iter().zip(psi.amplitudes()) {
            assert!((a - b).norm() < 1e-15);
        }
    }

    #[test]
    fn two_spin_rabi_flopping() {
        let j = 2.0 * PI * 750.0;
        let g = pair_graph(j);
        let psi = SpinState::all_down(2).unwrap();
        for &t in &[0.0, 1e-4, 3.3e-4, 1e-3, 7.7e-3] {
            let p = populations(&evolve_ising(&g, t, &psi).unwrap());
            assert!((p[3] - (j * t).sin().powi(2)).abs() < 1e-12);
            assert!((p[0] - (j * t).cos().powi(2)).abs() < 1e-12);
            assert!(p[1].abs() < 1e-24 && p[2].abs() < 1e-24);
        }
        let p = populations(&evolve_ising(&g, PI / (2.0 * j), &psi).unwrap());
        assert!((p[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn populations_of_simple_states() {
        assert_eq!(populations(&SpinState::all_down(2).unwrap()), vec![1.0, 0.0, 0.0, 0.0]);
        let h = Complex64::new(0.5, 0.0);
        let uniform = SpinState::from_amplitudes(vec![h; 4]).unwrap();
        assert!(populations(&uniform).iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn capacity_enforced() {
        assert_eq!(
            SpinState::all_down(MAX_SPINS + 1).unwrap_err(),
            DynamicsError::Capacity { requested: MAX_SPINS + 1, cap: MAX_SPINS }
        );
    }

    #[test]
    fn unnormalized_state_rejected() {
        let v = vec![Complex64::new(1.0, 0.0); 2];
        assert!(SpinState::from_amplitudes(v).is_err());
    }

    #[test]
    fn dephased_limit_of_pair_is_half() {
        let g = pair_graph(3.0);
        let prop = IsingPropagator::new(&g).unwrap();
        let lim = prop.dephased_populations(&SpinState::all_down(2).unwrap()).unwrap();
        assert!((lim[0] - 0.5).abs() < 1e-15 && (lim[3] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn decoherence_disabled_is_identity() {
        let g = pair_graph(2.0 * PI * 750.0);
        let times: Vec<f64> = (0..20).map(|k| k as f64 * 1e-4).collect();
        let psi = SpinState::all_down(2).unwrap();
        let a = scan_evolution(&g, &times, &psi, &DecoherenceModel::none()).unwrap();
        let b = apply_decoherence(&a, &DecoherenceModel::none()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoherence_envelope_reaches_limit() {
        let j = 2.0 * PI * 750.0;
        let g = pair_graph(j);
        let psi = SpinState::all_down(2).unwrap();
        let tau = 5.5e-3;
        let model = DecoherenceModel::with_tau(tau).unwrap();
        let s = scan_evolution(&g, &[tau, 1.0], &psi, &model).unwrap();
        let coherent = (j * tau).sin().powi(2);
        assert!((s.probabilities[0][3] - (0.5 + (coherent - 0.5) / std::f64::consts::E)).abs() < 1e-12);
        assert!((s.probabilities[1][3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bad_tau_rejected() {
        assert!(DecoherenceModel::with_tau(0.0).is_err());
        assert!(DecoherenceModel::with_tau(-1.0).is_err());
    }

    #[test]
    fn marginal_and_labels() {
        // P(spin0=1, spin1=0, spin2=1) = 1
        let mut p = vec![0.0; 8];
        p[0b101] = 1.0;
        assert_eq!(marginal(&p, &[0, 2]), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(marginal(&p, &[1]), vec![1.0, 0.0]);
        assert_eq!(outcome_label(1, 2), "10");
        assert_eq!(outcome_label(0b110, 3), "011");
    }
}
