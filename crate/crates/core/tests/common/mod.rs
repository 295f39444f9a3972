//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Dense `H = Σ_{a<b} J_ab σx_a σx_b` in the z basis.
pub fn dense_hamiltonian(j: &DMatrix<f64>) -> DMatrix<f64> {
    let n = j.nrows();
    let dim = 1usize << n;
    let mut h = DMatrix::<f64>::zeros(dim, dim);
    for s in 0..dim {
        for a in 0..n {
            for b in (a + 1)..n {
                h[(s ^ (1 << a) ^ (1 << b), s)] += j[(a, b)];
            }
        }
    }
    h
}

/// `e^{-iHt}|ψ⟩` by scaling and squaring a truncated Taylor series of the
/// dense matrix exponential.
pub fn dense_evolve(j: &DMatrix<f64>, t: f64, psi: &[Complex64]) -> Vec<Complex64> {
    let h = dense_hamiltonian(j);
    let dim = h.nrows();
    let a: DMatrix<Complex64> = h.map(|v| Complex64::new(0.0, -v * t));
    let norm1 = (0..dim).map(|c| a.column(c).iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm1 > 0.25 { (norm1 / 0.25).log2().ceil() as u32 } else { 0 };
    let scaled = a / Complex64::new(2f64.powi(squarings as i32), 0.0);
    let mut exp = DMatrix::<Complex64>::identity(dim, dim);
    let mut term = DMatrix::<Complex64>::identity(dim, dim);
    for k in 1..=24 {
        term = &term * &scaled / Complex64::new(k as f64, 0.0);
        exp += &term;
    }
    for _ in 0..squarings {
        exp = &exp * &exp;
    }
    let v = nalgebra::DVector::from_column_slice(psi);
    (exp * v).iter().copied().collect()
}

pub fn random_symmetric(n: usize, scale: f64, rng: &mut impl rand::Rng) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in (a + 1)..n {
            let v = scale * rng.gen_range(-1.0..1.0);
            j[(a, b)] = v;
            j[(b, a)] = v;
        }
    }
    j
}

/// Dimensionless trap + Coulomb energy, `x` flattened as `[x0, y0, z0, x1, ...]`.
pub fn crystal_energy(beta: [f64; 3], x: &[f64]) -> f64 {
    let n = x.len() / 3;
    let mut u = 0.0;
    for i in 0..n {
        for a in 0..3 {
            u += 0.5 * beta[a] * beta[a] * x[3 * i + a] * x[3 * i + a];
        }
        for k in (i + 1)..n {
            let r2: f64 = (0..3).map(|a| (x[3 * i + a] - x[3 * k + a]).powi(2)).sum();
            u += 1.0 / r2.sqrt();
        }
    }
    u
}

pub fn crystal_force(beta: [f64; 3], x: &[f64]) -> Vec<f64> {
    let n = x.len() / 3;
    let mut g = vec![0.0; x.len()];
    for i in 0..n {
        for a in 0..3 {
            g[3 * i + a] += beta[a] * beta[a] * x[3 * i + a];
        }
        for k in (i + 1)..n {
            let d: Vec<f64> = (0..3).map(|a| x[3 * i + a] - x[3 * k + a]).collect();
            let r3 = d.iter().map(|v| v * v).sum::<f64>().powf(1.5);
            for a in 0..3 {
                g[3 * i + a] -= d[a] / r3;
                g[3 * k + a] += d[a] / r3;
            }
        }
    }
    g
}

/// Hessian from central differences of the analytic gradient.
pub fn fd_hessian(beta: [f64; 3], x: &[f64], h: f64) -> DMatrix<f64> {
    let m = x.len();
    let mut hess = DMatrix::zeros(m, m);
    for c in 0..m {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let (gp, gm) = (crystal_force(beta, &xp), crystal_force(beta, &xm));
        for r in 0..m {
            hess[(r, c)] = (gp[r] - gm[r]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Derivative-free compass search from many seeded starts.
pub fn compass_minimize(beta: [f64; 3], n: usize, starts: usize, seed: u64) -> (f64, Vec<f64>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::INFINITY, Vec::new());
    for _ in 0..starts {
        let mut x: Vec<f64> = (0..3 * n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut u = crystal_energy(beta, &x);
        let mut step = 0.5;
        while step > 1e-11 {
            let mut improved = false;
            for c in 0..x.len() {
                for sgn in [1.0, -1.0] {
                    x[c] += sgn * step;
                    let trial = crystal_energy(beta, &x);
                    if trial < u {
                        u = trial;
                        improved = true;
                    } else {
                        x[c] -= sgn * step;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if u < best.0 {
            best = (u, x);
        }
    }
    best
}
