//! Observables shared by every solver: trajectories, populations, momentum
//! intensities, Gaussian entropy, envelope fits and conservation drifts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timegrid::TimeGrid;

/// One named real time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// Time series on a common grid plus free-form provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub columns: Vec<Series>,
    /// e.g. scheme tag, parameters, code version
    pub provenance: BTreeMap<String, String>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid) -> Self {
        let mut provenance = BTreeMap::new();
        provenance.insert("code_version".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Trajectory { grid, columns: Vec::new(), provenance }
    }

    pub fn with_provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_string(), value.to_string());
        self
    }

    pub fn len(&self) -> usize {
        self.grid.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n_steps == 0
    }

    pub fn push(&mut self, name: &str, unit: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.grid.n_steps {
            return Err(Error::validation(format!(
                "series {name} has {} points on a grid of {}",
                values.len(),
                self.grid.n_steps
            )));
        }
        if self.column(name).is_some() {
            return Err(Error::validation(format!("duplicate series {name}")));
        }
        self.columns.push(Series { name: name.to_string(), unit: unit.to_string(), values });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|s| s.name == name).map(|s| s.values.as_slice())
    }

    /// Truncate every series to the first `len` points (an interrupted run).
    pub fn truncate(&mut self, len: usize) {
        self.grid.n_steps = self.grid.n_steps.min(len);
        for c in &mut self.columns {
            c.values.truncate(len);
        }
    }

    /// Populations (series named `population*`) must be nonnegative to −10⁻⁹.
    pub fn validate(&self) -> Result<()> {
        for c in &self.columns {
            if c.values.len() != self.grid.n_steps {
                return Err(Error::validation(format!("series {} has the wrong length", c.name)));
            }
            if c.name.starts_with("population") {
                if let Some((k, v)) = c.values.iter().enumerate().find(|(_, v)| **v < -1e-9) {
                    return Err(Error::validation(format!("negative population {v} in {} at step {k}", c.name)));
                }
            }
        }
        Ok(())
    }
}

/// Per-site `|Φ_i|²` and their sum.
pub fn condensate_population(field: &[Complex64]) -> (Vec<f64>, f64) {
    let per: Vec<f64> = field.iter().map(|z| z.norm_sqr()).collect();
    let total = per.iter().sum();
    (per, total)
}

/// `n(q_k) = (1/I) Σ_ij e^{i q_k (i−j)} ⟨a_i† a_j⟩` at `q_k = 2πk/I`.
pub fn quasimomentum_intensity(spdm: &[Complex64], sites: usize) -> Result<Vec<f64>> {
    if spdm.len() != sites * sites || sites == 0 {
        return Err(Error::validation("density matrix does not match the number of sites"));
    }
    let scale = spdm.iter().map(|z| z.norm()).fold(1.0, f64::max);
    for i in 0..sites {
        for j in 0..=i {
            if (spdm[i * sites + j] - spdm[j * sites + i].conj()).norm() > 1e-9 * scale {
                return Err(Error::validation(format!("density matrix is not Hermitian at ({i},{j})")));
            }
        }
    }
    let inv = 1.0 / sites as f64;
    let mut out = Vec::with_capacity(sites);
    for k in 0..sites {
        let q = 2.0 * PI * k as f64 * inv;
        let mut s = 0.0;
        for i in 0..sites {
            for j in 0..sites {
                let ph = Complex64::from_polar(1.0, q * (i as f64 - j as f64));
                s += (ph * spdm[i * sites + j]).re;
            }
        }
        out.push(s * inv);
    }
    Ok(out)
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Entropy of one mode with symplectic eigenvalue `ν ≥ ½`.
pub fn mode_entropy(nu: f64) -> f64 {
    xlogx(nu + 0.5) - xlogx(nu - 0.5)
}

/// `ν = √det(cov)/ħ` of a 2×2 `[[xx, xp], [xp, pp]]` covariance; fails when the
/// uncertainty bound is violated beyond 10⁻¹⁰.
pub fn symplectic_eigenvalue(cov: [f64; 3], hbar: f64) -> Result<f64> {
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let bound = 0.25 * hbar * hbar;
    if !det.is_finite() || det < bound - 1e-10 {
        return Err(Error::validation(format!("covariance violates the uncertainty bound: det {det:e} < {bound:e}")));
    }
    Ok((det.max(bound)).sqrt() / hbar)
}

/// `S = Σ s(ν)` over independent modes, each given as `[xx, xp, pp]`.
pub fn gaussian_entropy(modes: &[[f64; 3]], hbar: f64) -> Result<f64> {
    let mut s = 0.0;
    for m in modes {
        s += mode_entropy(symplectic_eigenvalue(*m, hbar)?);
    }
    Ok(s)
}

/// Symplectic eigenvalues of a `2m×2m` covariance in `(x, p)` pairs: moduli of the
/// eigenvalues of `Ε·C` (in units of `ħ`).
pub fn symplectic_spectrum(n: usize, cov: &[f64], hbar: f64) -> Vec<f64> {
    let e = crate::dense::symplectic(n);
    let mut a = vec![0.0; n * n];
    crate::dense::matmul(n, &e, cov, &mut a);
    let ev = nalgebra::DMatrix::from_row_slice(n, n, &a).complex_eigenvalues();
    let mut nu: Vec<f64> = ev.iter().filter(|z| z.im > 0.0).map(|z| z.im / hbar).collect();
    // real-axis pairs only arise from unphysical input; keep the count right
    while nu.len() < n / 2 {
        nu.push(0.0);
    }
    nu.sort_by(|a, b| a.total_cmp(b));
    nu
}

/// Entropy of a coupled Gaussian state from its full covariance.
pub fn covariance_entropy(n: usize, cov: &[f64], hbar: f64) -> Result<f64> {
    let mut s = 0.0;
    for nu in symplectic_spectrum(n, cov, hbar) {
        if nu < 0.5 - 1e-10 {
            return Err(Error::validation(format!("symplectic eigenvalue {nu} below one half")));
        }
        s += mode_entropy(nu.max(0.5));
    }
    Ok(s)
}

/// Result of an envelope fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseFit {
    /// Gaussian collapse time; `f64::INFINITY` when the envelope does not decay.
    pub t_coll: f64,
    /// Exponential damping rate of the same envelope.
    pub rate: f64,
    /// RMS residual of the Gaussian fit in `ln A`.
    pub residual: f64,
    pub extrema: usize,
}

/// Envelope points below this fraction of the largest are ignored.
pub const DEFAULT_ENVELOPE_FLOOR: f64 = 1e-2;

/// Local extrema with parabolic refinement, as `(t, value)`.
pub fn extrema(times: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for k in 1..values.len().saturating_sub(1) {
        let (a, b, c) = (values[k - 1], values[k], values[k + 1]);
        let is_max = b > a && b >= c;
        let is_min = b < a && b <= c;
        if !(is_max || is_min) {
            continue;
        }
        let h = times[k + 1] - times[k];
        let den = a - 2.0 * b + c;
        let (dt, v) = if den != 0.0 {
            let x = 0.5 * (a - c) / den;
            (x * h, b - 0.25 * (a - c) * x)
        } else {
            (0.0, b)
        };
        out.push((times[k] + dt, v));
    }
    out
}

/// Envelope as half the swing between successive extrema, at their mid time.
pub fn envelope(times: &[f64], values: &[f64]) -> Vec<(f64, f64)> {
    extrema(times, values).windows(2).map(|w| (0.5 * (w[0].0 + w[1].0), 0.5 * (w[0].1 - w[1].1).abs())).collect()
}

/// Least-squares line through `(x, y)`: `(slope, intercept, rms residual)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = my - slope * mx;
    let res = (x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    (slope, icpt, res)
}

pub fn fit_collapse_time(times: &[f64], values: &[f64]) -> Result<CollapseFit> {
    fit_collapse_time_with(times, values, DEFAULT_ENVELOPE_FLOOR)
}

/// Fit the oscillation envelope to `A₀ exp(−t²/2t_coll²)` and to `A₀ exp(−γt)`.
pub fn fit_collapse_time_with(times: &[f64], values: &[f64], floor: f64) -> Result<CollapseFit> {
    if times.len() != values.len() {
        return Err(Error::validation("times and values differ in length"));
    }
    let ext = extrema(times, values).len();
    if ext < 5 {
        return Err(Error::InsufficientData(format!("{ext} extrema, need at least 5")));
    }
    let env = envelope(times, values);
    let top = env.iter().map(|p| p.1).fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = env.into_iter().filter(|p| p.1 > floor * top && p.1 > 0.0).collect();
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!("{} envelope points above the floor", pts.len())));
    }
    let t: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let t2: Vec<f64> = t.iter().map(|x| x * x).collect();
    let ln: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let (g, _, residual) = linear_fit(&t2, &ln);
    let (e, _, _) = linear_fit(&t, &ln);
    let t_coll = if -g > 1e-12 { (-0.5 / g).sqrt() } else { f64::INFINITY };
    Ok(CollapseFit { t_coll, rate: -e, residual, extrema: ext })
}

/// Largest relative deviations from the initial value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub number: f64,
    pub energy: f64,
    pub threshold: f64,
    pub violated: bool,
}

pub fn relative_drift(series: &[f64]) -> f64 {
    let Some(&x0) = series.first() else { return 0.0 };
    let scale = if x0 != 0.0 { x0.abs() } else { 1.0 };
    series.iter().map(|x| (x - x0).abs() / scale).fold(0.0, f64::max)
}

/// Drifts of the `total` and `energy` series of a trajectory.
pub fn conservation_monitor(traj: &Trajectory, threshold: f64) -> Result<DriftReport> {
    let n = traj.column("total").ok_or_else(|| Error::validation("trajectory has no total series"))?;
    let number = relative_drift(n);
    let energy = traj.column("energy").map(relative_drift).unwrap_or(0.0);
    Ok(DriftReport { number, energy, threshold, violated: number > threshold || energy > threshold })
}
