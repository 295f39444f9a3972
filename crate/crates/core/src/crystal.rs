//! Coulomb crystal equilibrium and normal modes in an anisotropic harmonic trap.
//!
//! Internally everything runs in dimensionless units: lengths in
//! `ℓ = (e² / (4πε₀ m ωx²))^{1/3}`, energies in `m ωx² ℓ²` and frequencies in
//! `ωx`. In those units the potential reads
//!
//! ```text
//! U = Σᵢ ½ (xᵢ² + βy² yᵢ² + βz² zᵢ²) + Σ_{i<j} 1 / rᵢⱼ,    βa = ωa / ωx
//! ```
//!
//! and the mass-scaled Hessian has eigenvalues `(ω_k / ωx)²`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CrystalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("equilibrium search did not converge (best dimensionless gradient norm {best_residual:e})")]
    NotConverged { best_residual: f64 },
    #[error("unstable crystal: mode {mode} has negative curvature {eigenvalue:e}")]
    Unstable { mode: usize, eigenvalue: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub elementary_charge: f64,
    pub vacuum_permittivity: f64,
    pub reduced_planck: f64,
    pub ion_mass: f64,
}

impl Default for PhysicalConstants {
    /// CODATA values with a ¹⁷¹Yb⁺ ion.
    fn default() -> Self {
        Self {
            elementary_charge: 1.602_176_634e-19,
            vacuum_permittivity: 8.854_187_8128e-12,
            reduced_planck: 1.054_571_817e-34,
            ion_mass: 171.0 * ATOMIC_MASS_UNIT,
        }
    }
}

impl PhysicalConstants {
    pub fn with_mass_amu(mass_amu: f64) -> Self {
        Self { ion_mass: mass_amu * ATOMIC_MASS_UNIT, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CrystalError> {
        let fields = [
            ("elementary_charge", self.elementary_charge),
            ("vacuum_permittivity", self.vacuum_permittivity),
            ("reduced_planck", self.reduced_planck),
            ("ion_mass", self.ion_mass),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(CrystalError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `e² / (4πε₀)` in J·m.
    pub fn coulomb_constant(&self) -> f64 {
        self.elementary_charge.powi(2) / (4.0 * PI * self.vacuum_permittivity)
    }
}

/// Secular trap frequencies, stored as angular frequencies (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub omega_x: f64,
    pub omega_y: f64,
    pub omega_z: f64,
}

impl TrapConfig {
    pub fn new(omega_x: f64, omega_y: f64, omega_z: f64) -> Result<Self, CrystalError> {
        let trap = Self { omega_x, omega_y, omega_z };
        trap.validate()?;
        Ok(trap)
    }

    /// Build from ordinary frequencies in Hz.
    pub fn from_hz(fx: f64, fy: f64, fz: f64) -> Result<Self, CrystalError> {
        Self::new(2.0 * PI * fx, 2.0 * PI * fy, 2.0 * PI * fz)
    }

    /// The three-ion trap used in the experiment: 2π × {0.978, 1.748, 1.798} MHz.
    pub fn paper_default() -> Self {
        Self::from_hz(0.978e6, 1.748e6, 1.798e6).expect("positive frequencies")
    }

    pub fn validate(&self) -> Result<(), CrystalError> {
        for (name, v) in [("omega_x", self.omega_x), ("omega_y", self.omega_y), ("omega_z", self.omega_z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(CrystalError::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn omegas(&self) -> [f64; 3] {
        [self.omega_x, self.omega_y, self.omega_z]
    }

    /// Squared frequency ratios `(ωa/ωx)²`.
    fn stiffness(&self) -> [f64; 3] {
        let w = self.omegas();
        [1.0, (w[1] / w[0]).powi(2), (w[2] / w[0]).powi(2)]
    }

    /// Length scale `ℓ` in meters.
    pub fn length_scale(&self, constants: &PhysicalConstants) -> f64 {
        (constants.coulomb_constant() / (constants.ion_mass * self.omega_x.powi(2))).cbrt()
    }

    /// Energy scale `m ωx² ℓ²` in joules.
    pub fn energy_scale(&self, constants: &PhysicalConstants) -> f64 {
        constants.ion_mass * (self.omega_x * self.length_scale(constants)).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizerOptions {
    pub restarts: usize,
    /// Convergence threshold on the dimensionless gradient norm.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for MinimizerOptions {
    fn default() -> Self {
        Self { restarts: 8, gradient_tolerance: 1e-10, max_iterations: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonCrystal {
    pub n_ions: usize,
    /// Positions in meters, one `[x, y, z]` row per ion.
    pub positions: Vec<[f64; 3]>,
    /// Potential energy in joules.
    pub potential_energy: f64,
    /// Residual force norm in newtons.
    pub gradient_norm: f64,
    /// Residual in dimensionless units, compared against the tolerance.
    pub dimensionless_gradient_norm: f64,
}

impl IonCrystal {
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.positions[i], self.positions[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn center_of_mass(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.positions {
            for a in 0..3 {
                c[a] += p[a] / self.n_ions as f64;
            }
        }
        c
    }

    /// Largest absolute coordinate along each axis, a quick planarity probe.
    pub fn extent(&self) -> [f64; 3] {
        let mut e = [0.0f64; 3];
        for p in &self.positions {
            for a in 0..3 {
                e[a] = e[a].max(p[a].abs());
            }
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalModes {
    /// Mode frequencies in rad/s, ascending.
    pub frequencies: Vec<f64>,
    /// `3N × 3N` orthonormal matrix; row `3·i + axis`, column `k`.
    pub eigenvectors: DMatrix<f64>,
}

impl NormalModes {
    pub fn n_modes(&self) -> usize {
        self.frequencies.len()
    }

    pub fn n_ions(&self) -> usize {
        self.frequencies.len() / 3
    }

    pub fn component(&self, ion: usize, axis: usize, mode: usize) -> f64 {
        self.eigenvectors[(3 * ion + axis, mode)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedMode {
    pub frequency: f64,
    /// Per-ion amplitude `b_{i,k}` along the projection direction.
    pub amplitudes: Vec<f64>,
    pub participating: bool,
}

/// Dimensionless energy of a flattened configuration.
pub(crate) fn energy(stiffness: &[f64; 3], x: &[f64]) -> f64 {
    let n = x.len() / 3;
    let mut u = 0.0;
    for i in 0..n {
        for a in 0..3 {
            u += 0.5 * stiffness[a] * x[3 * i + a].powi(2);
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let r = ((x[3 * i] - x[3 * j]).powi(2)
                + (x[3 * i + 1] - x[3 * j + 1]).powi(2)
                + (x[3 * i + 2] - x[3 * j + 2]).powi(2))
            .sqrt();
            u += 1.0 / r;
        }
    }
    u
}

pub(crate) fn gradient(stiffness: &[f64; 3], x: &[f64]) -> Vec<f64> {
    let n = x.len() / 3;
    let mut g = vec![0.0; x.len()];
    for i in 0..n {
        for a in 0..3 {
            g[3 * i + a] = stiffness[a] * x[3 * i + a];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [x[3 * i] - x[3 * j], x[3 * i + 1] - x[3 * j + 1], x[3 * i + 2] - x[3 * j + 2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let inv_r3 = 1.0 / (r2 * r2.sqrt());
            for a in 0..3 {
                g[3 * i + a] -= d[a] * inv_r3;
                g[3 * j + a] += d[a] * inv_r3;
            }
        }
    }
    g
}

pub(crate) fn hessian(stiffness: &[f64; 3], x: &[f64]) -> DMatrix<f64> {
    let n = x.len() / 3;
    let mut h = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        for a in 0..3 {
            h[(3 * i + a, 3 * i + a)] = stiffness[a];
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let d = [x[3 * i] - x[3 * j], x[3 * i + 1] - x[3 * j + 1], x[3 * i + 2] - x[3 * j + 2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let r = r2.sqrt();
            let inv_r5 = 1.0 / (r2 * r2 * r);
            for a in 0..3 {
                for b in 0..3 {
                    let delta = if a == b { r2 } else { 0.0 };
                    let t = (3.0 * d[a] * d[b] - delta) * inv_r5;
                    h[(3 * i + a, 3 * i + b)] += t;
                    h[(3 * j + a, 3 * j + b)] += t;
                    h[(3 * i + a, 3 * j + b)] -= t;
                    h[(3 * j + a, 3 * i + b)] -= t;
                }
            }
        }
    }
    h
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

struct Candidate {
    x: Vec<f64>,
    energy: f64,
    grad_norm: f64,
}

/// BFGS with backtracking line search, followed by Newton polishing.
fn relax(stiffness: &[f64; 3], mut x: Vec<f64>, opts: &MinimizerOptions) -> Candidate {
    let dim = x.len();
    let mut inv_h = DMatrix::<f64>::identity(dim, dim);
    let mut g = DVector::from_vec(gradient(stiffness, &x));
    let mut f = energy(stiffness, &x);

    for _ in 0..opts.max_iterations {
        if g.norm() < 1e-8 {
            break;
        }
        let mut p = -(&inv_h * &g);
        if p.dot(&g) >= 0.0 {
            inv_h = DMatrix::identity(dim, dim);
            p = -g.clone();
        }
        // cap the step so ions never jump through one another
        let p_norm = p.norm();
        if p_norm > 0.5 {
            p *= 0.5 / p_norm;
        }
        let slope = p.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(p.iter()).map(|(a, b)| a + step * b).collect();
            let ft = energy(stiffness, &trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            inv_h = DMatrix::identity(dim, dim);
            if p.dot(&g) == -g.norm_squared() {
                break;
            }
            continue;
        };
        let g_new = DVector::from_vec(gradient(stiffness, &x_new));
        let s = DVector::from_iterator(dim, x_new.iter().zip(x.iter()).map(|(a, b)| a - b));
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let hy = &inv_h * &y;
            let yhy = y.dot(&hy);
            inv_h += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }

    // Newton polish: quadratic convergence from the BFGS basin
    for _ in 0..50 {
        if g.norm() < opts.gradient_tolerance * 1e-2 {
            break;
        }
        let h = hessian(stiffness, &x);
        let eig = SymmetricEigen::new(h);
        if eig.eigenvalues.iter().any(|&l| l < -1e-8) {
            break;
        }
        let coeffs = eig.eigenvectors.transpose() * &g;
        let scaled = DVector::from_iterator(
            dim,
            coeffs.iter().zip(eig.eigenvalues.iter()).map(|(c, &l)| if l > 1e-12 { c / l } else { 0.0 }),
        );
        let step = eig.eigenvectors * scaled;
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a - b).collect();
        let g_trial = DVector::from_vec(gradient(stiffness, &trial));
        if !(g_trial.norm() < g.norm()) {
            break;
        }
        x = trial;
        g = g_trial;
    }
    f = energy(stiffness, &x);
    Candidate { grad_norm: g.norm(), energy: f, x }
}

fn initial_configuration(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // spread roughly on the crystal size, which grows like n^{1/3}
    let scale = 1.5 * (n as f64).cbrt();
    (0..3 * n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Sort ions lexicographically by (x, y, z), treating coordinates within
/// `tol` as equal.
fn canonical_order(x: &[f64], tol: f64) -> Vec<usize> {
    let n = x.len() / 3;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        for a in 0..3 {
            let (u, v) = (x[3 * i + a], x[3 * j + a]);
            if (u - v).abs() > tol {
                return u.partial_cmp(&v).unwrap();
            }
        }
        i.cmp(&j)
    });
    order
}

pub fn solve_equilibrium(
    constants: &PhysicalConstants,
    trap: &TrapConfig,
    n: usize,
    seed: u64,
) -> Result<IonCrystal, CrystalError> {
    solve_equilibrium_with(constants, trap, n, seed, &MinimizerOptions::default())
}

pub fn solve_equilibrium_with(
    constants: &PhysicalConstants,
    trap: &TrapConfig,
    n: usize,
    seed: u64,
    opts: &MinimizerOptions,
) -> Result<IonCrystal, CrystalError> {
    if n == 0 {
        return Err(CrystalError::InvalidInput("need at least one ion".into()));
    }
    constants.validate()?;
    trap.validate()?;
    let stiffness = trap.stiffness();

    let candidates: Vec<Candidate> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(restart as u64);
            relax(&stiffness, initial_configuration(n, &mut rng), opts)
        })
        .collect();

    let mut best: Option<&Candidate> = None;
    let mut best_residual = f64::INFINITY;
    for c in &candidates {
        best_residual = best_residual.min(c.grad_norm);
        if c.grad_norm > opts.gradient_tolerance {
            continue;
        }
        match best {
            Some(b) if c.energy >= b.energy - 1e-12 * b.energy.abs() => {}
            _ => best = Some(c),
        }
    }
    let best = best.ok_or(CrystalError::NotConverged { best_residual })?;

    let length = trap.length_scale(constants);
    let energy_scale = trap.energy_scale(constants);
    let order = canonical_order(&best.x, 1e-9);
    let positions = order
        .iter()
        .map(|&i| [best.x[3 * i] * length, best.x[3 * i + 1] * length, best.x[3 * i + 2] * length])
        .collect();
    Ok(IonCrystal {
        n_ions: n,
        positions,
        potential_energy: best.energy * energy_scale,
        gradient_norm: best.grad_norm * energy_scale / length,
        dimensionless_gradient_norm: best.grad_norm,
    })
}

/// Flattened dimensionless coordinates of a crystal.
pub(crate) fn dimensionless_positions(constants: &PhysicalConstants, trap: &TrapConfig, crystal: &IonCrystal) -> Vec<f64> {
    let length = trap.length_scale(constants);
    crystal.positions.iter().flat_map(|p| p.iter().map(move |c| c / length)).collect()
}

/// Potential energy in joules of an arbitrary configuration given in meters.
pub fn potential_energy(constants: &PhysicalConstants, trap: &TrapConfig, positions: &[[f64; 3]]) -> f64 {
    let length = trap.length_scale(constants);
    let x: Vec<f64> = positions.iter().flat_map(|p| p.iter().map(move |c| c / length)).collect();
    energy(&trap.stiffness(), &x) * trap.energy_scale(constants)
}

/// Mass-scaled Hessian `∂²U/∂xᵢ∂xⱼ / m` at the crystal positions, in s⁻².
pub fn mass_scaled_hessian(constants: &PhysicalConstants, trap: &TrapConfig, crystal: &IonCrystal) -> DMatrix<f64> {
    let x = dimensionless_positions(constants, trap, crystal);
    hessian(&trap.stiffness(), &x) * trap.omega_x.powi(2)
}

const DEGENERACY_TOLERANCE: f64 = 1e-9;

/// Replace the eigenvectors of a degenerate block by the Gram-Schmidt
/// orthonormalization of the coordinate axes projected into that block.
fn canonical_basis(block: &DMatrix<f64>) -> DMatrix<f64> {
    let (dim, width) = block.shape();
    let projector = block * block.transpose();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(width);
    for axis in 0..dim {
        if basis.len() == width {
            break;
        }
        let mut v = projector.column(axis).into_owned();
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        // second pass for numerical orthogonality
        for b in &basis {
            let c = b.dot(&v);
            v -= b * c;
        }
        let nv = v.norm();
        if nv > 1e-6 {
            basis.push(v / nv);
        }
    }
    DMatrix::from_columns(&basis)
}

fn fix_sign(v: &mut DVector<f64>) {
    let max = v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if let Some(c) = v.iter().find(|c| c.abs() >= max - 1e-12) {
        if *c < 0.0 {
            v.neg_mut();
        }
    }
}

pub fn compute_normal_modes(
    constants: &PhysicalConstants,
    trap: &TrapConfig,
    crystal: &IonCrystal,
) -> Result<NormalModes, CrystalError> {
    let stiffness = trap.stiffness();
    let x = dimensionless_positions(constants, trap, crystal);
    let g = norm(&gradient(&stiffness, &x));
    if g > 1e-6 {
        return Err(CrystalError::InvalidInput(format!("crystal not at equilibrium (gradient norm {g:e})")));
    }
    let h = hessian(&stiffness, &x);
    let dim = h.nrows();
    let eig = SymmetricEigen::new(h);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::<f64>::zeros(dim, dim);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }

    for (k, &l) in values.iter().enumerate() {
        if l < -1e-9 {
            return Err(CrystalError::Unstable { mode: k, eigenvalue: l });
        }
    }

    // degenerate blocks
    let mut start = 0;
    while start < dim {
        let mut end = start + 1;
        while end < dim && (values[end] - values[start]).abs() <= DEGENERACY_TOLERANCE * values[start].abs().max(1e-300) {
            end += 1;
        }
        if end - start > 1 {
            let block = vectors.columns(start, end - start).into_owned();
            let basis = canonical_basis(&block);
            if basis.ncols() == end - start {
                vectors.columns_mut(start, end - start).copy_from(&basis);
            }
        }
        start = end;
    }

    for k in 0..dim {
        let mut v = vectors.column(k).into_owned();
        fix_sign(&mut v);
        vectors.set_column(k, &v);
    }

    let frequencies = values.iter().map(|&l| l.max(0.0).sqrt() * trap.omega_x).collect();
    Ok(NormalModes { frequencies, eigenvectors: vectors })
}

pub const DEFAULT_PARTICIPATION_CUTOFF: f64 = 1e-9;

pub fn project_modes(modes: &NormalModes, direction: &Vector3<f64>, cutoff: f64) -> Vec<ProjectedMode> {
    let n = modes.n_ions();
    (0..modes.n_modes())
        .map(|k| {
            let amplitudes: Vec<f64> = (0..n)
                .map(|i| (0..3).map(|a| modes.component(i, a, k) * direction[a]).sum())
                .collect();
            let participating = amplitudes.iter().any(|b| b.abs() >= cutoff);
            ProjectedMode { frequency: modes.frequencies[k], amplitudes, participating }
        })
        .collect()
}
