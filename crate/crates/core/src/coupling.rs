//! Ising coupling matrix mediated by the crystal's normal modes.
//!
//! `J_ij = Ω² R Σ_k b_{i,k} b_{j,k} / (μ² − ω_k²)` with the recoil frequency
//! `R = ħ (Δk)² / (2m)` in rad/s.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crystal::{project_modes, NormalModes, PhysicalConstants, ProjectedMode, DEFAULT_PARTICIPATION_CUTOFF};

/// Default distance kept between the drive detuning and any participating mode.
pub const DEFAULT_GUARD_BAND: f64 = 2.0 * PI * 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("invalid drive: {0}")]
    InvalidDrive(String),
    #[error("detuning {detuning:e} rad/s lies within the guard band of mode {mode} at {frequency:e} rad/s")]
    Resonance { mode: usize, frequency: f64, detuning: f64 },
    #[error("target coupling {target:e} rad/s unreachable; achievable range [{min:e}, {max:e}] rad/s")]
    Calibration { target: f64, min: f64, max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamanDrive {
    /// Two-photon Rabi frequency Ω, rad/s.
    pub rabi_frequency: f64,
    /// |Δk|, rad/m.
    pub delta_k_magnitude: f64,
    pub delta_k_direction: Vector3<f64>,
    /// Beatnote detuning μ from the carrier, rad/s.
    pub detuning: f64,
}

impl RamanDrive {
    /// Two beams of `wavelength` crossing at `angle` radians; `|Δk| = 2k sin(angle/2)`.
    pub fn crossed_beams(
        rabi_frequency: f64,
        wavelength: f64,
        angle: f64,
        direction: Vector3<f64>,
        detuning: f64,
    ) -> Result<Self, CouplingError> {
        let k = 2.0 * PI / wavelength;
        let drive = Self {
            rabi_frequency,
            delta_k_magnitude: 2.0 * k * (0.5 * angle).sin(),
            delta_k_direction: direction,
            detuning,
        };
        drive.validate()?;
        Ok(drive)
    }

    /// Ω = 2π × 76 kHz, 355 nm beams at 90° with Δk along x̂.
    pub fn paper_default(detuning: f64) -> Self {
        Self::crossed_beams(2.0 * PI * 76e3, 355e-9, PI / 2.0, Vector3::x(), detuning).expect("valid default drive")
    }

    pub fn with_detuning(self, detuning: f64) -> Self {
        Self { detuning, ..self }
    }

    pub fn validate(&self) -> Result<(), CouplingError> {
        if !(self.rabi_frequency.is_finite() && self.rabi_frequency >= 0.0) {
            return Err(CouplingError::InvalidDrive(format!("rabi frequency must be ≥ 0, got {}", self.rabi_frequency)));
        }
        if !(self.delta_k_magnitude.is_finite() && self.delta_k_magnitude >= 0.0) {
            return Err(CouplingError::InvalidDrive(format!("|Δk| must be ≥ 0, got {}", self.delta_k_magnitude)));
        }
        let n = self.delta_k_direction.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(CouplingError::InvalidDrive(format!("Δk direction must be a unit vector, norm {n}")));
        }
        if !self.detuning.is_finite() {
            return Err(CouplingError::InvalidDrive("detuning must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    pub n_ions: usize,
    /// Couplings in rad/s.
    pub j: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n_ions: n, j: DMatrix::zeros(n, n) }
    }

    /// Build from upper-triangle entries; diagonal forced to zero.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut j = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in (a + 1)..n {
                let v = f(a, b);
                j[(a, b)] = v;
                j[(b, a)] = v;
            }
        }
        Self { n_ions: n, j }
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.j[(i, k)]
    }

    /// Nonzero pairs `(i, j, J_ij)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_ions).flat_map(move |a| ((a + 1)..self.n_ions).map(move |b| (a, b, self.j[(a, b)])))
    }
}

pub fn recoil_frequency(drive: &RamanDrive, constants: &PhysicalConstants) -> f64 {
    constants.reduced_planck * drive.delta_k_magnitude.powi(2) / (2.0 * constants.ion_mass)
}

fn participating(modes: &NormalModes, drive: &RamanDrive) -> Vec<(usize, ProjectedMode)> {
    project_modes(modes, &drive.delta_k_direction, DEFAULT_PARTICIPATION_CUTOFF)
        .into_iter()
        .enumerate()
        .filter(|(_, m)| m.participating)
        .collect()
}

pub fn coupling_matrix(
    modes: &NormalModes,
    drive: &RamanDrive,
    constants: &PhysicalConstants,
) -> Result<CouplingMatrix, CouplingError> {
    coupling_matrix_with_guard(modes, drive, constants, DEFAULT_GUARD_BAND)
}

pub fn coupling_matrix_with_guard(
    modes: &NormalModes,
    drive: &RamanDrive,
    constants: &PhysicalConstants,
    guard_band: f64,
) -> Result<CouplingMatrix, CouplingError> {
    drive.validate()?;
    let projected = participating(modes, drive);
    let mu = drive.detuning;
    for (k, m) in &projected {
        if (mu.abs() - m.frequency).abs() < guard_band {
            return Err(CouplingError::Resonance { mode: *k, frequency: m.frequency, detuning: mu });
        }
    }
    let prefactor = drive.rabi_frequency.powi(2) * recoil_frequency(drive, constants);
    Ok(assemble(modes.n_ions(), &projected, prefactor, mu))
}

fn assemble(n: usize, projected: &[(usize, ProjectedMode)], prefactor: f64, mu: f64) -> CouplingMatrix {
    CouplingMatrix::from_fn(n, |i, j| {
        prefactor
            * projected
                .iter()
                .map(|(_, m)| m.amplitudes[i] * m.amplitudes[j] / (mu * mu - m.frequency * m.frequency))
                .sum::<f64>()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetuningSide {
    Above,
    Below,
}

/// Find μ on the chosen side of the center-of-mass mode such that `J_ij`
/// equals `target` (rad/s, signed).
///
/// The search interval starts one guard band from the COM resonance and
/// extends away from it until the neighbouring participating mode (or
/// `100 × ω_max` above the spectrum, or zero below it), truncated where
/// `J_ij(μ)` stops being monotone. The root is found by bisection.
pub fn calibrate_detuning(
    modes: &NormalModes,
    drive: &RamanDrive,
    constants: &PhysicalConstants,
    target: f64,
    pair: (usize, usize),
    side: DetuningSide,
) -> Result<f64, CouplingError> {
    drive.validate()?;
    let n = modes.n_ions();
    let (pi, pj) = pair;
    if pi >= n || pj >= n || pi == pj {
        return Err(CouplingError::InvalidDrive(format!("invalid ion pair ({pi}, {pj}) for {n} ions")));
    }
    let projected = participating(modes, drive);
    if projected.is_empty() {
        return Err(CouplingError::Calibration { target, min: 0.0, max: 0.0 });
    }
    let com = projected
        .iter()
        .max_by(|a, b| {
            let sa: f64 = a.1.amplitudes.iter().sum::<f64>().abs();
            let sb: f64 = b.1.amplitudes.iter().sum::<f64>().abs();
            sa.partial_cmp(&sb).unwrap()
        })
        .map(|(_, m)| m.frequency)
        .unwrap();
    let guard = DEFAULT_GUARD_BAND;
    let prefactor = drive.rabi_frequency.powi(2) * recoil_frequency(drive, constants);
    let pair_j = |mu: f64| -> f64 {
        prefactor
            * projected
                .iter()
                .map(|(_, m)| m.amplitudes[pi] * m.amplitudes[pj] / (mu * mu - m.frequency * m.frequency))
                .sum::<f64>()
    };

    let freqs: Vec<f64> = projected.iter().map(|(_, m)| m.frequency).collect();
    let (start, end) = match side {
        DetuningSide::Above => {
            let next = freqs.iter().copied().filter(|&f| f > com + guard).fold(f64::INFINITY, f64::min);
            let max = freqs.iter().copied().fold(0.0, f64::max);
            let end = if next.is_finite() { next - guard } else { 100.0 * max };
            (com + guard, end)
        }
        DetuningSide::Below => {
            let prev = freqs.iter().copied().filter(|&f| f < com - guard).fold(f64::NEG_INFINITY, f64::max);
            let end = if prev.is_finite() { prev + guard } else { 0.0 };
            (com - guard, end)
        }
    };

    // walk away from the COM resonance on a grid that is dense near it
    const STEPS: usize = 4000;
    let mu_at = |s: usize| start + (end - start) * (s as f64 / STEPS as f64).powi(2);
    let f0 = pair_j(start);
    let mut last_mu = start;
    let mut last_f = f0;
    let mut direction = 0.0;
    for s in 1..=STEPS {
        let mu = mu_at(s);
        let f = pair_j(mu);
        let d = (f - last_f).signum();
        if direction == 0.0 {
            direction = d;
        } else if d != direction && d != 0.0 {
            break;
        }
        last_mu = mu;
        last_f = f;
    }
    let (min, max) = if f0 < last_f { (f0, last_f) } else { (last_f, f0) };
    if !(target >= min && target <= max) {
        return Err(CouplingError::Calibration { target, min, max });
    }

    let (mut a, mut b) = (start, last_mu);
    let fa = f0 - target;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        let fm = pair_j(mid) - target;
        if fm == 0.0 {
            return Ok(mid);
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crystal::{compute_normal_modes, solve_equilibrium, TrapConfig};

    fn two_ion() -> (PhysicalConstants, TrapConfig, NormalModes) {
        let c = PhysicalConstants::default();
        let t = TrapConfig::paper_default();
        let crystal = solve_equilibrium(&c, &t, 2, 1).unwrap();
        let modes = compute_normal_modes(&c, &t, &crystal).unwrap();
        (c, t, modes)
    }

    #[test]
    fn zero_delta_k_gives_zero_recoil() {
        let c = PhysicalConstants::default();
        let d = RamanDrive { delta_k_magnitude: 0.0, ..RamanDrive::paper_default(0.0) };
        assert_eq!(recoil_frequency(&d, &c), 0.0);
    }

    #[test]
    fn recoil_quadruples_with_double_delta_k() {
        let c = PhysicalConstants::default();
        let d = RamanDrive::paper_default(0.0);
        let d2 = RamanDrive { delta_k_magnitude: 2.0 * d.delta_k_magnitude, ..d };
        let r = recoil_frequency(&d, &c);
        assert!((recoil_frequency(&d2, &c) / r - 4.0).abs() < 1e-14);
    }

    #[test]
    fn recoil_hand_evaluation() {
        let c = PhysicalConstants::default();
        let d = RamanDrive::paper_default(0.0);
        let dk = 2f64.sqrt() * 2.0 * PI / 355e-9;
        assert!((d.delta_k_magnitude / dk - 1.0).abs() < 1e-14);
        let hand = 1.054_571_817e-34 * dk * dk / (2.0 * 171.0 * 1.660_539_066_60e-27);
        assert!((recoil_frequency(&d, &c) / hand - 1.0).abs() < 1e-14);
        // about 2π × 18.5 kHz
        assert!((hand / (2.0 * PI) - 18.5e3).abs() < 0.1e3);
    }

    #[test]
    fn zero_rabi_gives_zero_couplings() {
        let (c, t, modes) = two_ion();
        let d = RamanDrive { rabi_frequency: 0.0, ..RamanDrive::paper_default(1.1 * t.omega_x) };
        let j = coupling_matrix(&modes, &d, &c).unwrap();
        assert!(j.j.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resonance_is_rejected() {
        let (c, t, modes) = two_ion();
        let d = RamanDrive::paper_default(t.omega_x + 2.0 * PI * 10.0);
        match coupling_matrix(&modes, &d, &c) {
            Err(CouplingError::Resonance { mode, .. }) => assert!((modes.frequencies[mode] - t.omega_x).abs() < 1e-3),
            other => panic!("expected resonance error, got {other:?}"),
        }
    }

    #[test]
    fn zero_target_unreachable() {
        let (c, _, modes) = two_ion();
        let d = RamanDrive::paper_default(0.0);
        for side in [DetuningSide::Above, DetuningSide::Below] {
            assert!(matches!(
                calibrate_detuning(&modes, &d, &c, 0.0, (0, 1), side),
                Err(CouplingError::Calibration { .. })
            ));
        }
    }

    #[test]
    fn bad_pair_rejected() {
        let (c, _, modes) = two_ion();
        let d = RamanDrive::paper_default(0.0);
        assert!(calibrate_detuning(&modes, &d, &c, 1.0, (0, 0), DetuningSide::Above).is_err());
        assert!(calibrate_detuning(&modes, &d, &c, 1.0, (0, 5), DetuningSide::Above).is_err());
    }

    #[test]
    fn below_com_gives_negative_couplings() {
        let (c, t, modes) = two_ion();
        let d = RamanDrive::paper_default(t.omega_x - 2.0 * PI * 30e3);
        let j = coupling_matrix(&modes, &d, &c).unwrap();
        assert!(j.get(0, 1) < 0.0);
        let mu = calibrate_detuning(&modes, &d, &c, j.get(0, 1), (0, 1), DetuningSide::Below).unwrap();
        assert!((mu / d.detuning - 1.0).abs() < 1e-9);
    }
}
