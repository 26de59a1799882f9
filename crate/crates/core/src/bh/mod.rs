//! Bose-Hubbard lattice: shared parameters, the exact many-body oracle and
//! the two-time equations of motion.

pub mod exact;
pub mod twopi;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observables::{quasimomentum_intensity, Trajectory};
use crate::timegrid::TimeGrid;

/// How the sites of the chain are linked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Nearest-neighbour links `i–i+1` only.
    Open,
    /// Adds the link `I–1`; requires at least three sites.
    Periodic,
    /// Two sites joined by the link counted twice, the literal periodic sum for `I = 2`.
    DoubleLink,
}

/// Lattice parameters. Energies in units of `J` are conventional; times in `ħ/J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhParams {
    pub sites: usize,
    pub j: f64,
    pub u: f64,
    /// Per-site energy offsets; empty means all zero.
    #[serde(default)]
    pub eps: Vec<f64>,
    pub boundary: Boundary,
    #[serde(default = "one")]
    pub hbar: f64,
}

fn one() -> f64 {
    1.0
}

impl BhParams {
    pub fn new(sites: usize, j: f64, u: f64, boundary: Boundary) -> Self {
        BhParams { sites, j, u, eps: Vec::new(), boundary, hbar: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites < 1 {
            return Err(Error::validation("lattice needs at least one site"));
        }
        if !self.eps.is_empty() && self.eps.len() != self.sites {
            return Err(Error::validation(format!("eps has {} entries for {} sites", self.eps.len(), self.sites)));
        }
        if !(self.hbar > 0.0) {
            return Err(Error::validation("hbar must be positive"));
        }
        for (name, v) in [("j", self.j), ("u", self.u), ("hbar", self.hbar)] {
            if !v.is_finite() {
                return Err(Error::validation(format!("{name} must be finite")));
            }
        }
        match (self.boundary, self.sites) {
            (Boundary::Periodic, s) if s < 3 => {
                Err(Error::validation("periodic boundary needs at least 3 sites; use double-link for two sites"))
            }
            (Boundary::DoubleLink, s) if s != 2 => Err(Error::validation("double-link mode applies to two sites only")),
            _ => Ok(()),
        }
    }

    pub fn eps(&self, i: usize) -> f64 {
        self.eps.get(i).copied().unwrap_or(0.0)
    }

    /// Links with multiplicity.
    pub fn links(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = (0..self.sites.saturating_sub(1)).map(|i| (i, i + 1)).collect();
        match self.boundary {
            Boundary::Open => {}
            Boundary::Periodic => v.push((self.sites - 1, 0)),
            Boundary::DoubleLink => v.push((0, 1)),
        }
        v
    }

    /// Single-particle matrix `h_ij = −J·(links between i and j) + ε_i δ_ij`, row-major.
    pub fn single_particle(&self) -> Vec<f64> {
        let s = self.sites;
        let mut h = vec![0.0; s * s];
        for (a, b) in self.links() {
            h[a * s + b] -= self.j;
            h[b * s + a] -= self.j;
        }
        for i in 0..s {
            h[i * s + i] += self.eps(i);
        }
        h
    }
}

/// Columns shared by every lattice trajectory: `population_i`, `quasimomentum_k`
/// (for more than one site), `total` and `energy`.
pub(crate) fn lattice_trajectory(
    grid: TimeGrid,
    params: &BhParams,
    populations: &[Vec<f64>],
    spdm: &[Vec<Complex64>],
    energy: Vec<f64>,
) -> Result<Trajectory> {
    let s = params.sites;
    let mut tr = Trajectory::new(grid)
        .with_provenance("model", "bose-hubbard")
        .with_provenance("sites", s)
        .with_provenance("j", params.j)
        .with_provenance("u", params.u)
        .with_provenance("hbar", params.hbar)
        .with_provenance("boundary", format!("{:?}", params.boundary).to_lowercase());
    for i in 0..s {
        tr.push(&format!("population_{i}"), "atoms", populations.iter().map(|p| p[i]).collect())?;
    }
    if s > 1 {
        let q: Vec<Vec<f64>> = spdm.iter().map(|d| quasimomentum_intensity(d, s)).collect::<Result<_>>()?;
        for k in 0..s {
            tr.push(&format!("quasimomentum_{k}"), "atoms", q.iter().map(|v| v[k]).collect())?;
        }
    }
    tr.push("total", "atoms", populations.iter().map(|p| p.iter().sum()).collect())?;
    tr.push("energy", "J", energy)?;
    Ok(tr)
}
