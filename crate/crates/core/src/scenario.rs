//! Scenario files: TOML documents describing one experiment pipeline.
//!
//! Frequencies are entered in ordinary Hz and converted to rad/s here; times
//! are in seconds. See `scenarios/SCHEMA.md` for the field reference.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{DetuningSide, RamanDrive};
use crate::crystal::{PhysicalConstants, TrapConfig};
use crate::dynamics::DecoherenceModel;
use crate::lattice::{Pattern, ShelveMask};
use crate::stochastic::{DeshelvingModel, MeasurementModel, ShelvingProcess};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Deterministic dynamics of one shelving configuration, optionally sampled.
    Dynamics,
    /// Probabilistic shelving, per-shot readout and post-selection.
    Protocol,
    /// S-manifold depopulation under the pumping beam.
    ShelvingDecay,
    /// Deshelving curves over a scan of drive Rabi frequencies.
    DeshelvingScan,
    /// Pattern masks on an idealized triangular array.
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_ions: Option<usize>,
    #[serde(default)]
    pub trap: Option<TrapSection>,
    #[serde(default)]
    pub drive: Option<DriveSection>,
    #[serde(default)]
    pub couplings: Option<CouplingsSection>,
    #[serde(default)]
    pub mask: Option<MaskSection>,
    #[serde(default)]
    pub times: Option<TimesSection>,
    #[serde(default)]
    pub decoherence: Option<DecoherenceSection>,
    #[serde(default)]
    pub measurement: Option<MeasurementSection>,
    #[serde(default)]
    pub shelving: Option<ShelvingSection>,
    #[serde(default)]
    pub deshelving: Option<DeshelvingSection>,
    #[serde(default)]
    pub lattice: Option<LatticeSection>,
    #[serde(default)]
    pub fit: Option<FitSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrapSection {
    pub freq_x_hz: f64,
    pub freq_y_hz: f64,
    pub freq_z_hz: f64,
    #[serde(default = "default_mass")]
    pub ion_mass_amu: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_mass() -> f64 {
    171.0
}

fn default_restarts() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSection {
    pub rabi_hz: f64,
    #[serde(default = "default_wavelength")]
    pub wavelength_m: f64,
    #[serde(default = "default_angle")]
    pub beam_angle_deg: f64,
    #[serde(default = "default_direction")]
    pub direction: [f64; 3],
    #[serde(default)]
    pub detuning_hz: Option<f64>,
    #[serde(default)]
    pub calibration: Option<CalibrationSection>,
}

fn default_wavelength() -> f64 {
    355e-9
}

fn default_angle() -> f64 {
    90.0
}

fn default_direction() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    pub target_j_hz: f64,
    #[serde(default = "default_pair")]
    pub pair: [usize; 2],
    #[serde(default = "default_side")]
    pub side: DetuningSide,
}

fn default_pair() -> [usize; 2] {
    [0, 1]
}

fn default_side() -> DetuningSide {
    DetuningSide::Above
}

/// Explicit coupling matrix in Hz (J/2π), used instead of trap + drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingsSection {
    pub j_hz: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSection {
    #[serde(default)]
    pub explicit: Option<String>,
    #[serde(default)]
    pub beam_time_s: Option<f64>,
    #[serde(default)]
    pub pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimesSection {
    pub start_s: f64,
    pub stop_s: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoherenceSection {
    pub tau_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSection {
    pub shots: usize,
    #[serde(default)]
    pub spam_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShelvingSection {
    pub tau_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeshelvingSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_ref_rabi")]
    pub reference_rabi_hz: f64,
    #[serde(default = "default_ref_tau")]
    pub reference_tau_s: f64,
    #[serde(default = "default_exponent")]
    pub exponent: f64,
    /// Drive during protocol evolution; defaults to `drive.rabi_hz`, then the reference.
    #[serde(default)]
    pub rabi_hz: Option<f64>,
    #[serde(default)]
    pub scan_rabi_hz: Vec<f64>,
}

fn default_true() -> bool {
    true
}

fn default_ref_rabi() -> f64 {
    76e3
}

fn default_ref_tau() -> f64 {
    0.5
}

fn default_exponent() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub cols: usize,
    pub rows: usize,
    #[serde(default = "default_nn")]
    pub nn_coupling_hz: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub threshold_hz: Option<f64>,
}

fn default_nn() -> f64 {
    1e3
}

fn default_alpha() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
}

/// Where the shelving configuration comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Explicit(ShelveMask),
    Probabilistic { beam_time: f64 },
    Pattern(Pattern),
}

/// How the coupling matrix is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum CouplingSource {
    Physical { constants: PhysicalConstants, trap: TrapConfig, restarts: usize, drive: RamanDrive, calibration: Option<Calibration> },
    Explicit(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    /// rad/s
    pub target: f64,
    pub pair: (usize, usize),
    pub side: DetuningSide,
}

fn positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be positive, got {v}")))
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty file-name-safe string"));
        }
        if let Some(t) = &self.trap {
            positive("trap.freq_x_hz", t.freq_x_hz)?;
            positive("trap.freq_y_hz", t.freq_y_hz)?;
            positive("trap.freq_z_hz", t.freq_z_hz)?;
            positive("trap.ion_mass_amu", t.ion_mass_amu)?;
            if t.restarts == 0 {
                return Err(invalid("trap.restarts", "must be at least 1"));
            }
        }
        if let Some(d) = &self.drive {
            if !(d.rabi_hz.is_finite() && d.rabi_hz >= 0.0) {
                return Err(invalid("drive.rabi_hz", format!("must be ≥ 0, got {}", d.rabi_hz)));
            }
            positive("drive.wavelength_m", d.wavelength_m)?;
            if !(d.beam_angle_deg > 0.0 && d.beam_angle_deg <= 180.0) {
                return Err(invalid("drive.beam_angle_deg", "must lie in (0, 180]"));
            }
            let n = Vector3::from(d.direction).norm();
            if !(n > 0.0 && n.is_finite()) {
                return Err(invalid("drive.direction", "must be a nonzero vector"));
            }
            match (&d.detuning_hz, &d.calibration) {
                (Some(_), Some(_)) | (None, None) => {
                    return Err(invalid("drive", "exactly one of `detuning_hz` or `calibration` is required"))
                }
                (Some(mu), None) => {
                    positive("drive.detuning_hz", *mu)?;
                }
                (None, Some(c)) => {
                    if !c.target_j_hz.is_finite() {
                        return Err(invalid("drive.calibration.target_j_hz", "must be finite"));
                    }
                    if c.pair[0] == c.pair[1] {
                        return Err(invalid("drive.calibration.pair", "ions must differ"));
                    }
                }
            }
        }
        if let Some(c) = &self.couplings {
            let n = c.j_hz.len();
            for (i, row) in c.j_hz.iter().enumerate() {
                if row.len() != n {
                    return Err(invalid("couplings.j_hz", format!("row {i} has {} entries, expected {n}", row.len())));
                }
                for (j, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(invalid("couplings.j_hz", format!("entry ({i}, {j}) is not finite")));
                    }
                    if (v - c.j_hz[j][i]).abs() > 1e-12 * v.abs().max(1.0) {
                        return Err(invalid("couplings.j_hz", format!("not symmetric at ({i}, {j})")));
                    }
                }
            }
        }
        if let Some(m) = &self.mask {
            let count = [m.explicit.is_some(), m.beam_time_s.is_some(), m.pattern.is_some()].iter().filter(|b| **b).count();
            if count != 1 {
                return Err(invalid("mask", "exactly one of `explicit`, `beam_time_s`, `pattern` is required"));
            }
            if let Some(s) = &m.explicit {
                s.parse::<ShelveMask>().map_err(|e| invalid("mask.explicit", e.to_string()))?;
            }
            if let Some(t) = m.beam_time_s {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(invalid("mask.beam_time_s", format!("must be ≥ 0, got {t}")));
                }
            }
            if let Some(p) = &m.pattern {
                p.parse::<Pattern>().map_err(|e| invalid("mask.pattern", e.to_string()))?;
            }
        }
        if let Some(t) = &self.times {
            if !(t.start_s.is_finite() && t.start_s >= 0.0) {
                return Err(invalid("times.start_s", "must be ≥ 0"));
            }
            if !(t.stop_s.is_finite() && t.stop_s >= t.start_s) {
                return Err(invalid("times.stop_s", "must be ≥ times.start_s"));
            }
            if t.points == 0 {
                return Err(invalid("times.points", "must be at least 1"));
            }
        }
        if let Some(d) = &self.decoherence {
            if !(d.tau_s > 0.0) {
                return Err(invalid("decoherence.tau_s", format!("must be positive, got {}", d.tau_s)));
            }
        }
        if let Some(m) = &self.measurement {
            if m.shots == 0 {
                return Err(invalid("measurement.shots", "must be at least 1"));
            }
            if !(0.0..=1.0).contains(&m.spam_error) {
                return Err(invalid("measurement.spam_error", "must lie in [0, 1]"));
            }
        }
        if let Some(s) = &self.shelving {
            positive("shelving.tau_s", s.tau_s)?;
        }
        if let Some(d) = &self.deshelving {
            positive("deshelving.reference_rabi_hz", d.reference_rabi_hz)?;
            positive("deshelving.reference_tau_s", d.reference_tau_s)?;
            positive("deshelving.exponent", d.exponent)?;
            if let Some(r) = d.rabi_hz {
                positive("deshelving.rabi_hz", r)?;
            }
            for r in &d.scan_rabi_hz {
                positive("deshelving.scan_rabi_hz", *r)?;
            }
        }
        if let Some(l) = &self.lattice {
            positive("lattice.nn_coupling_hz", l.nn_coupling_hz)?;
            positive("lattice.alpha", l.alpha)?;
            if let Some(t) = l.threshold_hz {
                positive("lattice.threshold_hz", t)?;
            }
        }
        self.validate_kind()
    }

    fn require<T>(&self, section: &Option<T>, field: &str) -> Result<(), ConfigError> {
        if section.is_none() {
            Err(invalid(field, format!("required for kind {:?}", self.kind)))
        } else {
            Ok(())
        }
    }

    fn validate_kind(&self) -> Result<(), ConfigError> {
        match self.kind {
            ScenarioKind::Dynamics | ScenarioKind::Protocol => {
                self.require(&self.times, "times")?;
                match (&self.couplings, &self.trap) {
                    (Some(_), Some(_)) => return Err(invalid("couplings", "give either `couplings` or `trap` + `drive`, not both")),
                    (None, None) => return Err(invalid("trap", "either `couplings` or `trap` + `drive` is required")),
                    (None, Some(_)) => {
                        self.require(&self.drive, "drive")?;
                        let n = self.n_ions.ok_or_else(|| invalid("n_ions", "required with `trap`"))?;
                        if n == 0 {
                            return Err(invalid("n_ions", "must be at least 1"));
                        }
                        if let Some(c) = self.drive.as_ref().and_then(|d| d.calibration.as_ref()) {
                            if c.pair.iter().any(|&i| i >= n) {
                                return Err(invalid("drive.calibration.pair", format!("index out of range for {n} ions")));
                            }
                        }
                    }
                    (Some(c), None) => {
                        if let Some(n) = self.n_ions {
                            if n != c.j_hz.len() {
                                return Err(invalid("n_ions", format!("{n} does not match couplings size {}", c.j_hz.len())));
                            }
                        }
                    }
                }
                let n = self.ion_count();
                match (&self.mask, self.kind) {
                    (Some(MaskSection { pattern: Some(_), .. }), _) => {
                        return Err(invalid("mask.pattern", "patterns apply to `lattice` scenarios"))
                    }
                    (Some(MaskSection { explicit: Some(s), .. }), ScenarioKind::Dynamics) => {
                        if s.len() != n {
                            return Err(invalid("mask.explicit", format!("length {} does not match {n} ions", s.len())));
                        }
                    }
                    (Some(MaskSection { beam_time_s: Some(_), .. }), ScenarioKind::Dynamics) => {
                        return Err(invalid("mask.beam_time_s", "probabilistic shelving requires kind `protocol`"))
                    }
                    (_, ScenarioKind::Protocol) => {
                        if self.mask.as_ref().and_then(|m| m.beam_time_s).is_none() {
                            return Err(invalid("mask.beam_time_s", "required for kind `protocol`"));
                        }
                        self.require(&self.measurement, "measurement")?;
                    }
                    _ => {}
                }
                if n > crate::dynamics::MAX_SPINS {
                    return Err(invalid("n_ions", format!("at most {} ions supported", crate::dynamics::MAX_SPINS)));
                }
            }
            ScenarioKind::ShelvingDecay => {
                self.require(&self.times, "times")?;
                self.require(&self.measurement, "measurement")?;
            }
            ScenarioKind::DeshelvingScan => {
                self.require(&self.times, "times")?;
                self.require(&self.measurement, "measurement")?;
                self.require(&self.deshelving, "deshelving")?;
                if self.deshelving.as_ref().unwrap().scan_rabi_hz.is_empty() {
                    return Err(invalid("deshelving.scan_rabi_hz", "required for kind `deshelving-scan`"));
                }
            }
            ScenarioKind::Lattice => {
                self.require(&self.lattice, "lattice")?;
                if self.mask.as_ref().and_then(|m| m.pattern.as_ref()).is_none() {
                    return Err(invalid("mask.pattern", "required for kind `lattice`"));
                }
            }
        }
        Ok(())
    }

    pub fn ion_count(&self) -> usize {
        match (&self.couplings, self.n_ions) {
            (Some(c), _) => c.j_hz.len(),
            (None, Some(n)) => n,
            (None, None) => 0,
        }
    }

    pub fn time_grid(&self) -> Vec<f64> {
        let Some(t) = &self.times else { return Vec::new() };
        if t.points == 1 {
            return vec![t.start_s];
        }
        let step = (t.stop_s - t.start_s) / (t.points - 1) as f64;
        (0..t.points).map(|k| t.start_s + step * k as f64).collect()
    }

    pub fn coupling_source(&self) -> Result<CouplingSource, ConfigError> {
        if let Some(c) = &self.couplings {
            return Ok(CouplingSource::Explicit(c.j_hz.clone()));
        }
        let t = self.trap.as_ref().ok_or_else(|| invalid("trap", "missing"))?;
        let d = self.drive.as_ref().ok_or_else(|| invalid("drive", "missing"))?;
        let trap = TrapConfig::from_hz(t.freq_x_hz, t.freq_y_hz, t.freq_z_hz).map_err(|e| invalid("trap", e.to_string()))?;
        let direction = Vector3::from(d.direction).normalize();
        let drive = RamanDrive::crossed_beams(
            2.0 * PI * d.rabi_hz,
            d.wavelength_m,
            d.beam_angle_deg.to_radians(),
            direction,
            2.0 * PI * d.detuning_hz.unwrap_or(0.0),
        )
        .map_err(|e| invalid("drive", e.to_string()))?;
        let calibration = d.calibration.as_ref().map(|c| Calibration {
            target: 2.0 * PI * c.target_j_hz,
            pair: (c.pair[0], c.pair[1]),
            side: c.side,
        });
        Ok(CouplingSource::Physical {
            constants: PhysicalConstants::with_mass_amu(t.ion_mass_amu),
            trap,
            restarts: t.restarts,
            drive,
            calibration,
        })
    }

    pub fn mask_source(&self) -> Option<MaskSource> {
        let m = self.mask.as_ref()?;
        if let Some(s) = &m.explicit {
            return s.parse().ok().map(MaskSource::Explicit);
        }
        if let Some(t) = m.beam_time_s {
            return Some(MaskSource::Probabilistic { beam_time: t });
        }
        m.pattern.as_ref().and_then(|p| p.parse().ok()).map(MaskSource::Pattern)
    }

    pub fn decoherence_model(&self) -> DecoherenceModel {
        match &self.decoherence {
            Some(d) => DecoherenceModel { tau_d: d.tau_s, asymptote: None },
            None => DecoherenceModel::none(),
        }
    }

    pub fn measurement_model(&self) -> Option<MeasurementModel> {
        self.measurement.as_ref().map(|m| MeasurementModel { spam_error: m.spam_error, shots: m.shots })
    }

    pub fn shelving_process(&self) -> ShelvingProcess {
        self.shelving.as_ref().map(|s| ShelvingProcess { tau_shelve: s.tau_s }).unwrap_or_default()
    }

    pub fn deshelving_model(&self) -> Option<DeshelvingModel> {
        self.deshelving.as_ref().map(|d| DeshelvingModel {
            reference_rabi: 2.0 * PI * d.reference_rabi_hz,
            reference_tau: d.reference_tau_s,
            exponent: d.exponent,
        })
    }

    /// Drive Rabi frequency seen by shelved ions during evolution, rad/s.
    pub fn deshelving_rabi(&self) -> Option<f64> {
        let d = self.deshelving.as_ref()?;
        let hz = d.rabi_hz.or(self.drive.as_ref().map(|dr| dr.rabi_hz)).unwrap_or(d.reference_rabi_hz);
        Some(2.0 * PI * hz)
    }

    pub fn fit_enabled(&self) -> bool {
        self.fit.as_ref().map_or(false, |f| f.enabled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
kind = "dynamics"
n_ions = 2
[trap]
freq_x_hz = 0.978e6
freq_y_hz = 1.748e6
freq_z_hz = 1.798e6
[drive]
rabi_hz = 76e3
[drive.calibration]
target_j_hz = 750.0
[times]
start_s = 0.0
stop_s = 1e-3
points = 11
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(s.time_grid().len(), 11);
        assert!((s.time_grid()[10] - 1e-3).abs() < 1e-18);
        match s.coupling_source().unwrap() {
            CouplingSource::Physical { trap, calibration, .. } => {
                assert!((trap.omega_x - 2.0 * PI * 0.978e6).abs() < 1e-6);
                assert!((calibration.unwrap().target - 2.0 * PI * 750.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_frequency_names_field() {
        let text = MINIMAL.replace("freq_y_hz = 1.748e6", "freq_y_hz = -1.0");
        match Scenario::parse(&text) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "trap.freq_y_hz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line() {
        let text = MINIMAL.replace("points = 11", "points = \"eleven\"");
        match Scenario::parse(&text) {
            Err(ConfigError::Parse(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_rejected() {
        let text = MINIMAL.replace("points = 11", "points = 11\nbogus = 1");
        assert!(matches!(Scenario::parse(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn two_mask_sources_rejected() {
        let text = format!("{MINIMAL}\n[mask]\nexplicit = \"QQ\"\nbeam_time_s = 0.01\n");
        match Scenario::parse(&text) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "mask"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mask_length_checked() {
        let text = format!("{MINIMAL}\n[mask]\nexplicit = \"QQS\"\n");
        assert!(Scenario::parse(&text).is_err());
    }
}
