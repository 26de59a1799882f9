//! Trajectory comparison against an oracle: deviations, damping-rate verdicts,
//! conservation drifts, entropy monotonicity and collapse-time scaling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use keldysh::observables::{fit_collapse_time, linear_fit, relative_drift, CollapseFit, Trajectory};
use serde::{Deserialize, Serialize};

use crate::output::{read_trajectory, sha256_file};
use crate::CliError;

/// Largest tolerated one-step entropy decrease.
pub const ENTROPY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRef {
    pub path: String,
    pub sha256: String,
    pub label: String,
    pub scheme: String,
    pub atoms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub fit: Option<CollapseFit>,
    pub error: Option<String>,
}

impl FitOutcome {
    fn rate(&self) -> Option<f64> {
        self.fit.map(|f| f.rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drifts {
    pub number: Option<f64>,
    pub energy: Option<f64>,
}

pub fn drifts(tr: &Trajectory) -> Drifts {
    Drifts { number: tr.column("total").map(relative_drift), energy: tr.column("energy").map(relative_drift) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HTheorem {
    /// `S(t_{k+1}) ≥ S(t_k) − tolerance` for every step.
    pub nondecreasing: bool,
    pub worst_drop: f64,
    pub worst_step: usize,
    /// `max |S(t) − S(0)|`
    pub max_change: f64,
    pub tolerance: f64,
}

pub fn h_theorem(entropy: &[f64]) -> HTheorem {
    let mut worst_drop = 0.0;
    let mut worst_step = 0;
    for (k, w) in entropy.windows(2).enumerate() {
        let d = w[0] - w[1];
        if d > worst_drop {
            worst_drop = d;
            worst_step = k;
        }
    }
    let s0 = entropy.first().copied().unwrap_or(0.0);
    let max_change = entropy.iter().map(|s| (s - s0).abs()).fold(0.0, f64::max);
    HTheorem {
        nondecreasing: worst_drop <= ENTROPY_TOLERANCE,
        worst_drop,
        worst_step,
        max_change,
        tolerance: ENTROPY_TOLERANCE,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Damping {
    Underdamped,
    Matched,
    Overdamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub trajectory: TrajectoryRef,
    /// Largest absolute difference per shared column.
    pub max_deviation: BTreeMap<String, f64>,
    /// Same for the compared observable, per atom when normalised.
    pub observable_deviation: f64,
    pub fit: FitOutcome,
    /// `rate − rate(reference)`
    pub rate_offset: Option<f64>,
    pub damping: Option<Damping>,
    pub drifts: Drifts,
    pub h_theorem: Option<HTheorem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub scheme: String,
    pub atoms: Vec<f64>,
    pub t_coll: Vec<f64>,
    /// Log-log slope of `t_coll` against atom number; `½` for `t_coll ∼ √N`.
    pub slope: f64,
    /// `t_coll(N_{i+1}) / t_coll(N_i)`
    pub ratios: Vec<f64>,
    /// `√(N_{i+1}/N_i)`
    pub expected_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub observable: String,
    pub per_atom: bool,
    pub reference: TrajectoryRef,
    pub reference_fit: FitOutcome,
    pub reference_drifts: Drifts,
    pub reference_h_theorem: Option<HTheorem>,
    pub candidates: Vec<CandidateReport>,
    /// Candidate labels by `|rate offset|`, closest to the reference first.
    pub closeness: Vec<String>,
    pub collapse_scaling: Vec<ScalingReport>,
}

impl ComparisonReport {
    pub fn candidate(&self, scheme: &str) -> Option<&CandidateReport> {
        self.candidates.iter().find(|c| c.trajectory.scheme == scheme)
    }

    /// Whether candidate `a`'s damping rate is at least as close to the reference as `b`'s.
    pub fn closer_than(&self, a: &str, b: &str) -> Option<bool> {
        let off = |s: &str| self.candidate(s).and_then(|c| c.rate_offset).map(f64::abs);
        Some(off(a)? <= off(b)?)
    }
}

struct Loaded {
    r: TrajectoryRef,
    tr: Trajectory,
    obs: Vec<f64>,
    fit: FitOutcome,
}

fn load(path: &Path, observable: &str, per_atom: bool) -> Result<Loaded, CliError> {
    let tr = read_trajectory(path)?;
    let sha256 = sha256_file(path)?;
    let scheme = tr
        .provenance
        .get("scheme")
        .or_else(|| tr.provenance.get("order"))
        .cloned()
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let atoms = tr.provenance.get("atoms").and_then(|a| a.parse::<f64>().ok());
    let label = match atoms {
        Some(n) => format!("{scheme} N={n}"),
        None => scheme.clone(),
    };
    let raw =
        tr.column(observable).ok_or_else(|| CliError::Config(format!("{}: no column {observable}", path.display())))?;
    let scale = match (per_atom, atoms) {
        (true, Some(n)) if n > 0.0 => 1.0 / n,
        _ => 1.0,
    };
    let obs: Vec<f64> = raw.iter().map(|v| v * scale).collect();
    let fit = match fit_collapse_time(&tr.grid.times(), &obs) {
        Ok(f) => FitOutcome { fit: Some(f), error: None },
        Err(e) => FitOutcome { fit: None, error: Some(e.to_string()) },
    };
    Ok(Loaded { r: TrajectoryRef { path: path.display().to_string(), sha256, label, scheme, atoms }, tr, obs, fit })
}

/// Compare `candidates` against `reference`. Every file must share the reference grid.
pub fn compare_files(
    reference: &Path,
    candidates: &[PathBuf],
    observable: &str,
    per_atom: bool,
) -> Result<ComparisonReport, CliError> {
    let rf = load(reference, observable, per_atom)?;
    let cands: Vec<Loaded> = candidates.iter().map(|p| load(p, observable, per_atom)).collect::<Result<_, _>>()?;
    for c in &cands {
        let (a, b) = (c.tr.grid, rf.tr.grid);
        if a != b {
            return Err(CliError::Config(format!(
                "grid mismatch: {} has t0={} dt={} points={}, reference has t0={} dt={} points={}",
                c.r.path, a.t0, a.dt, a.n_steps, b.t0, b.dt, b.n_steps
            )));
        }
    }
    let ref_rate = rf.fit.rate();
    let mut reports = Vec::new();
    for c in &cands {
        let mut max_deviation = BTreeMap::new();
        for col in &c.tr.columns {
            if let Some(r) = rf.tr.column(&col.name) {
                let d = col.values.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                max_deviation.insert(col.name.clone(), d);
            }
        }
        let observable_deviation = c.obs.iter().zip(&rf.obs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let rate_offset = match (c.fit.rate(), ref_rate) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
        let damping = rate_offset.map(|d| {
            if d < 0.0 {
                Damping::Underdamped
            } else if d > 0.0 {
                Damping::Overdamped
            } else {
                Damping::Matched
            }
        });
        reports.push(CandidateReport {
            trajectory: c.r.clone(),
            max_deviation,
            observable_deviation,
            fit: c.fit.clone(),
            rate_offset,
            damping,
            drifts: drifts(&c.tr),
            h_theorem: c.tr.column("entropy").map(h_theorem),
        });
    }
    let mut ranked: Vec<(f64, String)> =
        reports.iter().filter_map(|c| c.rate_offset.map(|o| (o.abs(), c.trajectory.label.clone()))).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    // collapse time against atom number, per scheme, over every file that has both
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for l in std::iter::once(&rf).chain(&cands) {
        if let (Some(n), Some(f)) = (l.r.atoms, l.fit.fit) {
            if f.t_coll.is_finite() {
                groups.entry(l.r.scheme.clone()).or_default().push((n, f.t_coll));
            }
        }
    }
    let mut collapse_scaling = Vec::new();
    for (scheme, mut pts) in groups {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        if pts.len() < 2 {
            continue;
        }
        let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        collapse_scaling.push(ScalingReport {
            scheme,
            atoms: pts.iter().map(|p| p.0).collect(),
            t_coll: pts.iter().map(|p| p.1).collect(),
            slope: linear_fit(&x, &y).0,
            ratios: pts.windows(2).map(|w| w[1].1 / w[0].1).collect(),
            expected_ratios: pts.windows(2).map(|w| (w[1].0 / w[0].0).sqrt()).collect(),
        });
    }

    Ok(ComparisonReport {
        observable: observable.to_string(),
        per_atom,
        reference_fit: rf.fit.clone(),
        reference_drifts: drifts(&rf.tr),
        reference_h_theorem: rf.tr.column("entropy").map(h_theorem),
        reference: rf.r,
        candidates: reports,
        closeness: ranked.into_iter().map(|r| r.1).collect(),
        collapse_scaling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::write_trajectory;
    use keldysh::TimeGrid;

    fn damped(dir: &Path, name: &str, rate: f64, atoms: f64, dt: f64) -> PathBuf {
        let grid = TimeGrid::spanning(0.0, 20.0, dt).unwrap();
        let v: Vec<f64> =
            grid.times().iter().map(|t| atoms * (0.5 + 0.5 * (-rate * t).exp() * (3.0 * t).cos())).collect();
        let mut tr = Trajectory::new(grid).with_provenance("scheme", name).with_provenance("atoms", atoms);
        tr.push("population_0", "atoms", v).unwrap();
        tr.push("total", "atoms", vec![atoms; grid.n_steps]).unwrap();
        let p = dir.join(format!("{name}-{atoms}.dat"));
        write_trajectory(&p, &tr).unwrap();
        p
    }

    #[test]
    fn self_comparison_is_exact() {
        let d = tempfile::tempdir().unwrap();
        let a = damped(d.path(), "exact", 0.3, 40.0, 0.01);
        let r = compare_files(&a, std::slice::from_ref(&a), "population_0", true).unwrap();
        let c = &r.candidates[0];
        assert!(c.max_deviation.values().all(|v| *v == 0.0));
        assert_eq!(c.observable_deviation, 0.0);
        assert_eq!(c.damping, Some(Damping::Matched));
        assert_eq!(c.drifts.number, Some(0.0));
    }

    #[test]
    fn damping_verdicts_and_ranking() {
        let d = tempfile::tempdir().unwrap();
        let e = damped(d.path(), "exact", 0.3, 40.0, 0.01);
        let u = damped(d.path(), "hfb", 0.05, 40.0, 0.01);
        let o = damped(d.path(), "second-order", 0.9, 40.0, 0.01);
        let n = damped(d.path(), "large-n-nlo", 0.45, 40.0, 0.01);
        let r = compare_files(&e, &[u, o, n], "population_0", true).unwrap();
        assert_eq!(r.candidate("hfb").unwrap().damping, Some(Damping::Underdamped));
        assert_eq!(r.candidate("second-order").unwrap().damping, Some(Damping::Overdamped));
        assert_eq!(r.closer_than("large-n-nlo", "second-order"), Some(true));
        assert_eq!(r.closeness[0], "large-n-nlo N=40");
    }

    #[test]
    fn grid_mismatch_is_a_validation_error() {
        let d = tempfile::tempdir().unwrap();
        let a = damped(d.path(), "exact", 0.3, 40.0, 0.01);
        let b = damped(d.path(), "hfb", 0.3, 40.0, 0.02);
        let e = compare_files(&a, &[b], "population_0", true).unwrap_err();
        assert!(matches!(&e, CliError::Config(m) if m.contains("grid mismatch")), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn entropy_monotonicity() {
        assert!(h_theorem(&[0.0, 1.0, 1.0, 2.0]).nondecreasing);
        let h = h_theorem(&[0.0, 1.0, 0.5, 2.0]);
        assert!(!h.nondecreasing && h.worst_step == 1 && h.worst_drop == 0.5 && h.max_change == 2.0);
    }
}
