//! Parameter recovery from simulated time series: pairwise Ising couplings,
//! exponential time constants, and power-law scaling exponents.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("fit did not converge (residual norm {residual:e})")]
    NotConverged { residual: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub value: f64,
    pub std_error: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub parameters: Vec<FitParameter>,
    /// `sqrt(Σ w r²)` at the optimum.
    pub residual_norm: f64,
    pub converged: bool,
    /// Weighted residual norm at each multi-start point, under the final weights.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub start_residuals: Vec<f64>,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.parameter(name).map(|p| p.value).unwrap_or(f64::NAN)
    }

    pub fn std_error(&self, name: &str) -> f64 {
        self.parameter(name).map(|p| p.std_error).unwrap_or(f64::NAN)
    }
}

struct LmOutcome {
    params: DVector<f64>,
    cost: f64,
    converged: bool,
    /// `JᵀWJ` at the optimum.
    normal: DMatrix<f64>,
}

/// Weighted Levenberg–Marquardt. `model` returns predictions and the
/// Jacobian of the predictions with respect to the parameters.
fn levenberg_marquardt<F>(
    start: DVector<f64>,
    y: &[f64],
    weights: &[f64],
    model: F,
) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> (Vec<f64>, DMatrix<f64>),
{
    let m = start.len();
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let eval = |p: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>, f64) {
        let (pred, jac) = model(p);
        let r = DVector::from_iterator(y.len(), pred.iter().zip(y).zip(&sqrt_w).map(|((f, o), s)| (f - o) * s));
        let mut jw = jac;
        for (i, s) in sqrt_w.iter().enumerate() {
            jw.row_mut(i).scale_mut(*s);
        }
        let cost = r.norm_squared();
        (r, jw, cost)
    };

    let mut p = start;
    let (mut r, mut jac, mut cost) = eval(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        if !cost.is_finite() {
            break;
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        if g.amax() <= 1e-14 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e16 {
            let mut a = jtj.clone();
            for k in 0..m {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let (r_t, j_t, cost_t) = eval(&trial);
            if cost_t.is_finite() && cost_t <= cost {
                let rel = (cost - cost_t) / cost.max(1e-300);
                let small_step = step.norm() <= 1e-13 * (p.norm() + 1e-13);
                p = trial;
                r = r_t;
                jac = j_t;
                cost = cost_t;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-14 || small_step || cost == 0.0 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent step exists at machine precision
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    let normal = jac.transpose() * &jac;
    LmOutcome { params: p, cost, converged, normal }
}

fn covariance_diagonal(normal: &DMatrix<f64>) -> Vec<f64> {
    match normal.clone().try_inverse() {
        Some(inv) => (0..normal.nrows()).map(|k| inv[(k, k)].max(0.0)).collect(),
        None => vec![f64::INFINITY; normal.nrows()],
    }
}

fn validate_series(times: &[f64], values: &[f64], min_points: usize) -> Result<(), FitError> {
    if times.len() != values.len() {
        return Err(FitError::InvalidInput(format!("{} times but {} values", times.len(), values.len())));
    }
    if times.len() < min_points {
        return Err(FitError::InvalidInput(format!("need at least {min_points} points, got {}", times.len())));
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(FitError::InvalidInput("non-finite sample".into()));
    }
    Ok(())
}

fn validate_shots(shots: Option<&[u64]>, len: usize) -> Result<(), FitError> {
    if let Some(s) = shots {
        if s.len() != len {
            return Err(FitError::InvalidInput(format!("{} shot counts for {len} points", s.len())));
        }
        if s.iter().any(|&n| n == 0) {
            return Err(FitError::InvalidInput("shot counts must be positive".into()));
        }
    }
    Ok(())
}

/// Inverse binomial variance with the floor `max(p(1−p), 1/n)/n`.
fn binomial_weights(predicted: &[f64], shots: &[u64]) -> Vec<f64> {
    predicted
        .iter()
        .zip(shots)
        .map(|(&p, &n)| {
            let n = n as f64;
            let p = p.clamp(0.0, 1.0);
            n / (p * (1.0 - p)).max(1.0 / n)
        })
        .collect()
}

fn pair_model(times: &[f64], p: &DVector<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (j, gamma, p_inf) = (p[0], p[1], p[2]);
    let mut pred = Vec::with_capacity(times.len());
    let mut jac = DMatrix::zeros(times.len(), 3);
    for (i, &t) in times.iter().enumerate() {
        let s = (j * t).sin();
        let s2 = s * s;
        let env = (-gamma * t).exp();
        pred.push(p_inf + (s2 - p_inf) * env);
        jac[(i, 0)] = env * (2.0 * j * t).sin() * t;
        jac[(i, 1)] = -t * (s2 - p_inf) * env;
        jac[(i, 2)] = 1.0 - env;
    }
    (pred, jac)
}

/// Angular frequency of the strongest periodogram peak of the mean-subtracted
/// series, evaluated on an 8× zero-padded frequency grid.
fn dominant_frequency(times: &[f64], values: &[f64]) -> (f64, f64) {
    let n = times.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let span = times[n - 1] - times[0];
    let dt = span / (n - 1) as f64;
    let bin = 2.0 * PI / (n as f64 * dt);
    let pad = 8;
    let mut best = (bin, f64::NEG_INFINITY);
    for k in 1..=(n * pad / 2) {
        let w = bin * k as f64 / pad as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (&t, &v) in times.iter().zip(values) {
            let (s, c) = (w * (t - times[0])).sin_cos();
            re += (v - mean) * c;
            im += (v - mean) * s;
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (w, power);
        }
    }
    (best.0, bin)
}

/// Fit `p(t) = p∞ + (sin²(Jt) − p∞) e^{−t/τ_d}` to a P(↑↑) series.
///
/// With `shots`, points are weighted by inverse binomial variance evaluated
/// on the current model (three reweighting rounds) and standard errors are
/// absolute; without, weights are uniform and errors are scaled by the
/// reduced χ².
pub fn fit_pair_coupling(times: &[f64], values: &[f64], shots: Option<&[u64]>) -> Result<FitResult, FitError> {
    validate_series(times, values, 8)?;
    validate_shots(shots, times.len())?;
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        return Err(FitError::Degenerate("constant series".into()));
    }
    let span = times[times.len() - 1] - times[0];
    if !(span > 0.0) {
        return Err(FitError::InvalidInput("times must increase".into()));
    }

    // sin²(Jt) oscillates at 2J
    let (w_peak, bin) = dominant_frequency(times, values);
    let j_peak = 0.5 * w_peak;
    let j_bin = 0.5 * bin;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut starts = Vec::new();
    for k in -2..=2 {
        let j0 = j_peak + 0.5 * k as f64 * j_bin;
        if j0 <= 0.0 {
            continue;
        }
        for gamma0 in [0.0, 1.0 / span, 3.0 / span] {
            for p0 in [0.5, mean] {
                starts.push(DVector::from_vec(vec![j0, gamma0, p0]));
            }
        }
    }

    let model = |p: &DVector<f64>| pair_model(times, p);
    let rounds = if shots.is_some() { 3 } else { 1 };
    let mut weights = vec![1.0; times.len()];
    let mut best: Option<LmOutcome> = None;
    for round in 0..rounds {
        if round > 0 {
            let (pred, _) = model(&best.as_ref().unwrap().params);
            weights = binomial_weights(&pred, shots.unwrap());
        }
        let mut candidates: Vec<DVector<f64>> = starts.clone();
        if let Some(b) = &best {
            candidates.push(b.params.clone());
        }
        best = None;
        for s in candidates {
            let out = levenberg_marquardt(s, values, &weights, model);
            if best.as_ref().map_or(true, |b| out.cost < b.cost) {
                best = Some(out);
            }
        }
    }
    let best = best.unwrap();
    let residual = best.cost.sqrt();
    if !best.converged {
        return Err(FitError::NotConverged { residual });
    }
    let start_residuals = starts
        .iter()
        .map(|s| {
            let (pred, _) = model(s);
            pred.iter().zip(values).zip(&weights).map(|((f, o), w)| w * (f - o).powi(2)).sum::<f64>().sqrt()
        })
        .collect();

    let dof = (times.len() - 3).max(1) as f64;
    let scale = if shots.is_some() { 1.0 } else { best.cost / dof };
    let var = covariance_diagonal(&best.normal);
    let (j, gamma, p_inf) = (best.params[0].abs(), best.params[1], best.params[2]);
    let se = |k: usize| (var[k] * scale).sqrt();
    let tau = if gamma > 0.0 { 1.0 / gamma } else { f64::INFINITY };
    let tau_se = if gamma > 0.0 { se(1) / (gamma * gamma) } else { f64::INFINITY };
    if j * span < 0.5 * PI {
        return Err(FitError::Degenerate(format!("series spans less than half an oscillation at J = {j:e} rad/s")));
    }
    Ok(FitResult {
        parameters: vec![
            FitParameter { name: "J".into(), value: j, std_error: se(0), unit: "rad/s".into() },
            FitParameter { name: "tau_d".into(), value: tau, std_error: tau_se, unit: "s".into() },
            FitParameter { name: "p_inf".into(), value: p_inf, std_error: se(2), unit: "1".into() },
        ],
        residual_norm: residual,
        converged: true,
        start_residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentialKind {
    /// `e^{−t/τ}`
    Decay,
    /// `1 − e^{−t/τ}`
    InverseExponential,
}

/// Single-parameter fit of `e^{−t/τ}` or `1 − e^{−t/τ}`; reports `tau`.
pub fn fit_exponential(
    times: &[f64],
    values: &[f64],
    kind: ExponentialKind,
    shots: Option<&[u64]>,
) -> Result<FitResult, FitError> {
    validate_series(times, values, 2)?;
    validate_shots(shots, times.len())?;
    // linearize on the usable points for a starting rate
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (&t, &v) in times.iter().zip(values) {
        let surv = match kind {
            ExponentialKind::Decay => v,
            ExponentialKind::InverseExponential => 1.0 - v,
        };
        if surv > 1e-6 && surv < 1.0 && t > 0.0 {
            sxy += t * -surv.ln();
            sxx += t * t;
        }
    }
    let t_max = times.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    if !(t_max > 0.0) {
        return Err(FitError::Degenerate("all sample times are zero".into()));
    }
    let rate0 = if sxx > 0.0 && sxy > 0.0 { sxy / sxx } else { 1.0 / t_max };

    let model = |p: &DVector<f64>| -> (Vec<f64>, DMatrix<f64>) {
        let k = p[0];
        let mut pred = Vec::with_capacity(times.len());
        let mut jac = DMatrix::zeros(times.len(), 1);
        for (i, &t) in times.iter().enumerate() {
            let e = (-k * t).exp();
            match kind {
                ExponentialKind::Decay => {
                    pred.push(e);
                    jac[(i, 0)] = -t * e;
                }
                ExponentialKind::InverseExponential => {
                    pred.push(1.0 - e);
                    jac[(i, 0)] = t * e;
                }
            }
        }
        (pred, jac)
    };

    let starts = [rate0, 0.3 * rate0, 3.0 * rate0];
    let rounds = if shots.is_some() { 3 } else { 1 };
    let mut weights = vec![1.0; times.len()];
    let mut best: Option<LmOutcome> = None;
    for round in 0..rounds {
        if round > 0 {
            let (pred, _) = model(&best.as_ref().unwrap().params);
            weights = binomial_weights(&pred, shots.unwrap());
        }
        let mut candidates: Vec<DVector<f64>> = starts.iter().map(|&k| DVector::from_vec(vec![k])).collect();
        if let Some(b) = &best {
            candidates.push(b.params.clone());
        }
        best = None;
        for s in candidates {
            let out = levenberg_marquardt(s, values, &weights, model);
            if best.as_ref().map_or(true, |b| out.cost < b.cost) {
                best = Some(out);
            }
        }
    }
    let best = best.unwrap();
    let residual = best.cost.sqrt();
    if !best.converged || !(best.params[0] > 0.0) {
        return Err(FitError::NotConverged { residual });
    }
    let start_residuals = starts
        .iter()
        .map(|&k| {
            let (pred, _) = model(&DVector::from_vec(vec![k]));
            pred.iter().zip(values).zip(&weights).map(|((f, o), w)| w * (f - o).powi(2)).sum::<f64>().sqrt()
        })
        .collect();
    let dof = (times.len() - 1).max(1) as f64;
    let scale = if shots.is_some() { 1.0 } else { best.cost / dof };
    let rate = best.params[0];
    let rate_se = (covariance_diagonal(&best.normal)[0] * scale).sqrt();
    Ok(FitResult {
        parameters: vec![FitParameter { name: "tau".into(), value: 1.0 / rate, std_error: rate_se / (rate * rate), unit: "s".into() }],
        residual_norm: residual,
        converged: true,
        start_residuals,
    })
}

/// Ordinary least squares of `ln τ = ln A + exponent · ln Ω`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitResult, FitError> {
    if points.len() < 3 {
        return Err(FitError::InvalidInput(format!("need at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(FitError::InvalidInput("power-law fit needs positive finite values".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FitError::Degenerate("all abscissae equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let s2 = ssr / (n - 2.0);
    let slope_se = (s2 / sxx).sqrt();
    let intercept_se = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
    let amplitude = intercept.exp();
    Ok(FitResult {
        parameters: vec![
            FitParameter { name: "amplitude".into(), value: amplitude, std_error: amplitude * intercept_se, unit: "s".into() },
            FitParameter { name: "exponent".into(), value: slope, std_error: slope_se, unit: "1".into() },
        ],
        residual_norm: ssr.sqrt(),
        converged: true,
        start_residuals: Vec::new(),
    })
}
