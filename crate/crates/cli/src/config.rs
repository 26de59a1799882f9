//! Job files: a TOML tree checked against a fixed schema. Unknown keys are rejected.
//!
//! Units: times in `ħ/J` for lattice jobs and in units of `1/M` for oscillator jobs;
//! energies (`j`, `u`, `eps`) in a common energy unit, conventionally `J = 1`;
//! `m2`, `lambda` and the spectral `cutoff` in the same (mass²) unit; radii `a1`, `a2`
//! in inverse mass. Memory caps are bytes.

use std::path::{Path, PathBuf};

use keldysh::bh::exact::DEFAULT_DIMENSION_CAP;
use keldysh::bh::twopi::Scheme;
use keldysh::bh::{BhParams, Boundary};
use keldysh::qmon::{QmonInitial, QmonParams, RadialOptions};
use keldysh::spectral::{Band, EirdThresholds};
use keldysh::timegrid::DEFAULT_MEMORY_BUDGET;
use keldysh::TimeGrid;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    Exact,
    Twopi,
    Qmon,
    Spectral,
    Compare,
}

impl JobKind {
    pub fn tag(self) -> &'static str {
        match self {
            JobKind::Exact => "exact",
            JobKind::Twopi => "twopi",
            JobKind::Qmon => "qmon",
            JobKind::Spectral => "spectral",
            JobKind::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSection {
    pub kind: Option<JobKind>,
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    /// Duration; the grid covers `[t0, t0 + t_end]`.
    pub t_end: Option<f64>,
    /// Number of steps; the grid has `steps + 1` points.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// Poisson mixture of fixed-N sectors: the state the mean-field initial data describe.
    #[default]
    Coherent,
    /// Exactly `atoms` atoms.
    FixedN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BhSection {
    #[serde(default = "two")]
    pub sites: usize,
    #[serde(default = "one")]
    pub j: f64,
    pub u: Option<f64>,
    /// `U·N/J`; fixes `U` per atom number.
    pub un: Option<f64>,
    /// All atoms start on the first site.
    pub atoms: Option<u32>,
    /// Initial occupation per site, instead of `atoms`.
    pub occupations: Option<Vec<u32>>,
    #[serde(default = "open")]
    pub boundary: Boundary,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default)]
    pub eps: Vec<f64>,
    #[serde(default)]
    pub oracle: Oracle,
    pub schemes: Option<Vec<Scheme>>,
    /// Memory window in steps; absent means the full history.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QmonRun {
    Lo,
    Nlo,
    Exact,
}

impl QmonRun {
    pub fn tag(self) -> &'static str {
        match self {
            QmonRun::Lo => "lo",
            QmonRun::Nlo => "nlo",
            QmonRun::Exact => "exact",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmonSection {
    pub components: usize,
    pub m2: f64,
    pub lambda: f64,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(default = "default_orders")]
    pub orders: Vec<QmonRun>,
    #[serde(default)]
    pub initial: QmonInitial,
    /// Radial functions of the exact solver.
    pub basis: Option<usize>,
    pub edge_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZetaSection {
    pub nu: f64,
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default)]
    pub formal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EirdSection {
    pub m_eff: f64,
    #[serde(default)]
    pub noncompact: usize,
    #[serde(default = "ten")]
    pub eta: f64,
    #[serde(default = "ten")]
    pub gap_ratio: f64,
}

impl EirdSection {
    pub fn thresholds(&self) -> EirdThresholds {
        EirdThresholds { eta: self.eta, gap_ratio: self.gap_ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeSection {
    pub band: Band,
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "twenty")]
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    pub fields: u32,
    #[serde(default)]
    pub derivatives: u32,
    pub dim: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralSection {
    pub a1: f64,
    pub a2: f64,
    #[serde(default)]
    pub m2: f64,
    pub cutoff: f64,
    pub zeta: Option<ZetaSection>,
    pub eird: Option<EirdSection>,
    #[serde(default)]
    pub slopes: Vec<SlopeSection>,
    #[serde(default)]
    pub operators: Vec<OperatorSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Oracle trajectory; relative paths are taken from the job file's directory.
    pub reference: PathBuf,
    pub candidates: Vec<PathBuf>,
    #[serde(default = "default_observable")]
    pub observable: String,
    /// Divide the observable by the `atoms` provenance entry.
    #[serde(default = "yes")]
    pub per_atom: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub atoms: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsSection {
    pub memory_bytes: Option<u64>,
    pub max_dimension: Option<u64>,
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Largest accepted dt vs dt/2 deviation; absent means report only.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub job: JobSection,
    pub grid: Option<GridSection>,
    pub bh: Option<BhSection>,
    pub qmon: Option<QmonSection>,
    pub spectral: Option<SpectralSection>,
    pub compare: Option<CompareSection>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub caps: CapsSection,
    pub verify: Option<VerifySection>,
}

fn one() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn ten() -> f64 {
    10.0
}
fn twenty() -> usize {
    20
}
fn yes() -> bool {
    true
}
fn open() -> Boundary {
    Boundary::Open
}
fn default_orders() -> Vec<QmonRun> {
    vec![QmonRun::Lo, QmonRun::Nlo]
}
fn default_observable() -> String {
    "population_0".into()
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be positive and finite, got {v}")))
    }
}

fn finite(key: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(bad(key, format!("must be finite, got {v}")))
    }
}

/// Parse and check a job file. Syntax and schema errors carry line and key.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<(RunConfig, String), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cfg = parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((cfg, text))
}

impl GridSection {
    fn check(&self) -> Result<(), CliError> {
        finite("grid.t0", self.t0)?;
        positive("grid.dt", self.dt)?;
        match (self.t_end, self.steps) {
            (Some(_), Some(_)) => Err(bad("grid", "give either t_end or steps, not both")),
            (None, None) => Err(bad("grid", "one of t_end or steps is required")),
            (Some(t), None) if !(t >= 0.0 && t.is_finite()) => {
                Err(bad("grid.t_end", format!("must be nonnegative and finite, got {t}")))
            }
            (None, Some(0)) => Err(bad("grid.steps", "must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid, CliError> {
        let g = match (self.t_end, self.steps) {
            (Some(t), _) => TimeGrid::spanning(self.t0, t, self.dt),
            (None, Some(s)) => TimeGrid::new(self.t0, self.dt, s + 1),
            (None, None) => unreachable!("checked"),
        };
        g.map_err(|e| CliError::from_solver("grid", e))
    }
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        if let Some(g) = &self.grid {
            g.check()?;
        }
        if let Some(b) = &self.bh {
            if b.sites < 1 {
                return Err(bad("bh.sites", "must be at least 1"));
            }
            finite("bh.j", b.j)?;
            positive("bh.hbar", b.hbar)?;
            match (b.u, b.un) {
                (Some(_), Some(_)) => return Err(bad("bh", "give either u or un, not both")),
                (None, None) => return Err(bad("bh", "one of u or un is required")),
                (Some(u), None) => finite("bh.u", u)?,
                (None, Some(un)) => finite("bh.un", un)?,
            }
            match (&b.atoms, &b.occupations) {
                (Some(_), Some(_)) => return Err(bad("bh", "give either atoms or occupations, not both")),
                (None, None) if self.sweep.is_none() => {
                    return Err(bad("bh", "one of atoms or occupations is required"))
                }
                (None, Some(o)) if o.len() != b.sites => {
                    return Err(bad("bh.occupations", format!("needs {} entries, got {}", b.sites, o.len())))
                }
                _ => {}
            }
            if !b.eps.is_empty() && b.eps.len() != b.sites {
                return Err(bad("bh.eps", format!("needs {} entries, got {}", b.sites, b.eps.len())));
            }
            if let Some(s) = &b.schemes {
                if s.is_empty() {
                    return Err(bad("bh.schemes", "must name at least one scheme"));
                }
            }
            if b.window == Some(0) {
                return Err(bad("bh.window", "must be at least 1"));
            }
        }
        if let Some(q) = &self.qmon {
            if q.components < 1 {
                return Err(bad("qmon.components", "must be at least 1"));
            }
            finite("qmon.m2", q.m2)?;
            if !(q.lambda >= 0.0 && q.lambda.is_finite()) {
                return Err(bad("qmon.lambda", format!("must be nonnegative, got {}", q.lambda)));
            }
            positive("qmon.hbar", q.hbar)?;
            if q.orders.is_empty() {
                return Err(bad("qmon.orders", "must name at least one of lo, nlo, exact"));
            }
            if let Some(b) = q.basis {
                if b < 4 {
                    return Err(bad("qmon.basis", "needs at least 4 functions"));
                }
            }
            if let Some(t) = q.edge_tol {
                positive("qmon.edge_tol", t)?;
            }
        }
        if let Some(s) = &self.spectral {
            positive("spectral.a1", s.a1)?;
            positive("spectral.a2", s.a2)?;
            finite("spectral.m2", s.m2)?;
            finite("spectral.cutoff", s.cutoff)?;
            if let Some(z) = &s.zeta {
                finite("spectral.zeta.nu", z.nu)?;
                positive("spectral.zeta.mu", z.mu)?;
            }
            if let Some(e) = &s.eird {
                if !(e.m_eff >= 0.0 && e.m_eff.is_finite()) {
                    return Err(bad("spectral.eird.m_eff", format!("must be nonnegative, got {}", e.m_eff)));
                }
                positive("spectral.eird.eta", e.eta)?;
                positive("spectral.eird.gap_ratio", e.gap_ratio)?;
            }
            for (i, sl) in s.slopes.iter().enumerate() {
                positive(&format!("spectral.slopes[{i}].lo"), sl.lo)?;
                if !(sl.hi > sl.lo && sl.hi <= s.cutoff) {
                    return Err(bad(&format!("spectral.slopes[{i}].hi"), "must lie in (lo, cutoff]"));
                }
                if sl.points < 2 {
                    return Err(bad(&format!("spectral.slopes[{i}].points"), "must be at least 2"));
                }
            }
            for (i, op) in s.operators.iter().enumerate() {
                if op.dim < 2 {
                    return Err(bad(&format!("spectral.operators[{i}].dim"), "must be at least 2"));
                }
            }
        }
        if let Some(c) = &self.compare {
            if c.candidates.is_empty() {
                return Err(bad("compare.candidates", "must list at least one trajectory"));
            }
        }
        if let Some(sw) = &self.sweep {
            let b = self.bh.as_ref().ok_or_else(|| bad("sweep", "needs a [bh] section"))?;
            if b.un.is_none() {
                return Err(bad("sweep.atoms", "sweeps over atom number need bh.un"));
            }
            if b.occupations.is_some() || b.atoms.is_some() {
                return Err(bad("sweep.atoms", "replaces bh.atoms and bh.occupations; remove them"));
            }
            if sw.atoms.is_empty() || sw.atoms.contains(&0) {
                return Err(bad("sweep.atoms", "must list positive atom numbers"));
            }
            let mut seen = sw.atoms.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != sw.atoms.len() {
                return Err(bad("sweep.atoms", "entries must be distinct"));
            }
        }
        if let Some(v) = &self.verify {
            if let Some(t) = v.tolerance {
                positive("verify.tolerance", t)?;
            }
        }
        Ok(())
    }

    /// Expand into concrete jobs of `kind`; a sweep gives one job per entry.
    pub fn jobs(&self, kind: JobKind, base: &Path) -> Result<Vec<Job>, CliError> {
        if let Some(k) = self.job.kind {
            if k != kind {
                return Err(bad("job.kind", format!("file is a {} job, run as {}", k.tag(), kind.tag())));
            }
        }
        let need_grid = || -> Result<TimeGrid, CliError> {
            let g = self.grid.as_ref().ok_or_else(|| bad("grid", "section is required"))?.time_grid()?;
            if let Some(m) = self.caps.max_steps {
                if g.n_steps - 1 > m {
                    return Err(CliError::Resource(format!(
                        "caps.max_steps: grid has {} steps, cap {m}",
                        g.n_steps - 1
                    )));
                }
            }
            Ok(g)
        };
        let memory = self.caps.memory_bytes.unwrap_or(DEFAULT_MEMORY_BUDGET);
        match kind {
            JobKind::Exact | JobKind::Twopi => {
                let b = self.bh.as_ref().ok_or_else(|| bad("bh", "section is required"))?;
                let grid = need_grid()?;
                let entries: Vec<(String, Vec<u32>)> = match &self.sweep {
                    Some(sw) => sw.atoms.iter().map(|&n| (format!("atoms-{n}"), first_site(n, b.sites))).collect(),
                    None => {
                        let occ = match (&b.occupations, b.atoms) {
                            (Some(o), _) => o.clone(),
                            (None, Some(n)) => first_site(n, b.sites),
                            (None, None) => unreachable!("checked"),
                        };
                        vec![(String::new(), occ)]
                    }
                };
                entries
                    .into_iter()
                    .map(|(name, occupations)| {
                        let atoms: u32 = occupations.iter().sum();
                        let u = match (b.u, b.un) {
                            (Some(u), _) => u,
                            (None, Some(un)) => {
                                if atoms == 0 {
                                    return Err(bad("bh.un", "needs at least one atom"));
                                }
                                un * b.j / atoms as f64
                            }
                            (None, None) => unreachable!("checked"),
                        };
                        let params = BhParams {
                            sites: b.sites,
                            j: b.j,
                            u,
                            eps: b.eps.clone(),
                            boundary: b.boundary,
                            hbar: b.hbar,
                        };
                        params.validate().map_err(|e| CliError::from_solver("bh", e))?;
                        let bh = BhJob {
                            params,
                            occupations,
                            atoms,
                            oracle: b.oracle,
                            schemes: b.schemes.clone().unwrap_or_else(|| Scheme::ALL.to_vec()),
                            window: b.window,
                            grid,
                            memory,
                            max_dimension: self.caps.max_dimension.unwrap_or(DEFAULT_DIMENSION_CAP as u64),
                        };
                        let spec = if kind == JobKind::Exact { JobSpec::Exact(bh) } else { JobSpec::Twopi(bh) };
                        Ok(Job { name, spec })
                    })
                    .collect()
            }
            JobKind::Qmon => {
                if self.sweep.is_some() {
                    return Err(bad("sweep", "only lattice jobs sweep over atom number"));
                }
                let q = self.qmon.as_ref().ok_or_else(|| bad("qmon", "section is required"))?;
                let params = QmonParams { components: q.components, m2: q.m2, lambda: q.lambda, hbar: q.hbar };
                params.validate().map_err(|e| CliError::from_solver("qmon", e))?;
                let mut radial = RadialOptions::default();
                if let Some(b) = q.basis {
                    radial.basis = b;
                }
                if let Some(t) = q.edge_tol {
                    radial.edge_tol = t;
                }
                Ok(vec![Job {
                    name: String::new(),
                    spec: JobSpec::Qmon(QmonJob {
                        params,
                        orders: q.orders.clone(),
                        initial: q.initial,
                        radial,
                        grid: need_grid()?,
                        memory,
                    }),
                }])
            }
            JobKind::Spectral => {
                let s = self.spectral.as_ref().ok_or_else(|| bad("spectral", "section is required"))?;
                Ok(vec![Job { name: String::new(), spec: JobSpec::Spectral(s.clone()) }])
            }
            JobKind::Compare => {
                let c = self.compare.as_ref().ok_or_else(|| bad("compare", "section is required"))?;
                let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
                let c = CompareSection {
                    reference: abs(&c.reference),
                    candidates: c.candidates.iter().map(abs).collect(),
                    ..c.clone()
                };
                Ok(vec![Job { name: String::new(), spec: JobSpec::Compare(c) }])
            }
        }
    }
}

fn first_site(n: u32, sites: usize) -> Vec<u32> {
    let mut o = vec![0; sites];
    o[0] = n;
    o
}

/// A fully resolved lattice run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BhJob {
    pub params: BhParams,
    pub occupations: Vec<u32>,
    pub atoms: u32,
    pub oracle: Oracle,
    pub schemes: Vec<Scheme>,
    pub window: Option<usize>,
    pub grid: TimeGrid,
    pub memory: u64,
    pub max_dimension: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QmonJob {
    pub params: QmonParams,
    pub orders: Vec<QmonRun>,
    pub initial: QmonInitial,
    pub radial: RadialOptions,
    pub grid: TimeGrid,
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum JobSpec {
    Exact(BhJob),
    Twopi(BhJob),
    Qmon(QmonJob),
    Spectral(SpectralSection),
    Compare(CompareSection),
}

impl JobSpec {
    pub fn grid(&self) -> Option<TimeGrid> {
        match self {
            JobSpec::Exact(b) | JobSpec::Twopi(b) => Some(b.grid),
            JobSpec::Qmon(q) => Some(q.grid),
            _ => None,
        }
    }

    /// Same job on another grid.
    pub fn with_grid(&self, grid: TimeGrid) -> JobSpec {
        let mut s = self.clone();
        match &mut s {
            JobSpec::Exact(b) | JobSpec::Twopi(b) => b.grid = grid,
            JobSpec::Qmon(q) => q.grid = grid,
            _ => {}
        }
        s
    }
}

/// One entry of a run; `name` is the output subdirectory, empty for a single job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Job {
    pub name: String,
    pub spec: JobSpec,
}
