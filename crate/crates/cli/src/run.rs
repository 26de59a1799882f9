//! Running jobs: solver orchestration, outputs, verdicts, checkpoints and the
//! dt vs dt/2 self-convergence check.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use keldysh::bh::exact::{observe_coherent, observe_exact, InitialKind};
use keldysh::bh::twopi::{samples_trajectory, Scheme, TwoPiConfig, TwoPiInitial, TwoPiSolver};
use keldysh::observables::{relative_drift, Trajectory};
use keldysh::qmon::{evolve_exact_radial, QmonConfig, QmonOrder, QmonSolver};
use keldysh::spectral::{classify_operator, count_slope, eird_classify, product_spectrum, zeta_partial, OperatorSpec};
use keldysh::timegrid::HistoryWindow;
use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::compare::{compare_files, drifts, h_theorem};
use crate::config::{BhJob, Job, JobKind, JobSpec, Oracle, QmonJob, QmonRun, RunConfig, SpectralSection};
use crate::manifest::{code_version, CheckpointRecord, FileRecord, JobRecord, Manifest};
use crate::output::{read_trajectory, sha256_file, write_bytes, write_trajectory};
use crate::CliError;

/// Mean-field amplitudes `√n_i` of an occupation pattern.
fn amplitudes(occupations: &[u32]) -> TwoPiInitial {
    TwoPiInitial { condensate: occupations.iter().map(|&n| [(n as f64).sqrt(), 0.0]).collect() }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    /// Write a checkpoint every this many steps.
    pub checkpoint_every: Option<usize>,
    /// Run the dt vs dt/2 check even when the job file does not ask for it.
    pub force_verify: bool,
}

/// Result of a run that got as far as creating its manifest.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: Manifest,
    pub error: Option<CliError>,
}

struct Context {
    out: PathBuf,
    manifest: Mutex<Manifest>,
    checkpoint_every: Option<usize>,
    resumed: bool,
}

impl Context {
    fn update(&self, f: impl FnOnce(&mut Manifest)) -> Result<(), CliError> {
        let mut m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut m);
        m.save(&self.out)
    }

    fn record(&self, job: &str) -> JobRecord {
        let mut m = self.manifest.lock().unwrap_or_else(|e| e.into_inner());
        m.job_mut(job).clone()
    }
}

/// Run every job of `cfg` as `kind` into `opts.out`, or continue the run of `resume`.
pub fn execute(
    kind: JobKind,
    cfg: &RunConfig,
    config_text: &str,
    config_dir: &Path,
    opts: &RunOptions,
    resume: Option<Manifest>,
) -> Result<Outcome, CliError> {
    let start = Instant::now();
    let jobs = cfg.jobs(kind, config_dir)?;
    let command = if opts.force_verify { "verify".to_string() } else { kind.tag().to_string() };
    let resumed = resume.is_some();
    let manifest = match resume {
        Some(m) => {
            if m.command != command || m.config_text != config_text || m.code_version != code_version() {
                return Err(CliError::Config(
                    "manifest belongs to a different command, job file or code version".into(),
                ));
            }
            for j in &jobs {
                if !m.jobs.iter().any(|r| r.name == j.name) {
                    return Err(CliError::Config(format!("manifest has no record of job {:?}", j.name)));
                }
            }
            m
        }
        None => Manifest {
            command,
            code_version: code_version(),
            config_text: config_text.to_string(),
            config_dir: config_dir.to_path_buf(),
            config: serde_json::to_value(cfg).map_err(|e| CliError::Io(e.to_string()))?,
            wall_time_s: 0.0,
            complete: false,
            jobs: jobs
                .iter()
                .map(|j| JobRecord {
                    name: j.name.clone(),
                    kind: kind.tag().to_string(),
                    params: serde_json::to_value(&j.spec).unwrap_or(Value::Null),
                    ..Default::default()
                })
                .collect(),
            error: None,
        },
    };
    std::fs::create_dir_all(&opts.out).map_err(|e| CliError::Io(format!("{}: {e}", opts.out.display())))?;
    let prior_wall = manifest.wall_time_s;
    let ctx = Context {
        out: opts.out.clone(),
        manifest: Mutex::new(manifest),
        checkpoint_every: opts.checkpoint_every.filter(|&n| n > 0),
        resumed,
    };
    ctx.update(|m| {
        m.complete = false;
        m.error = None;
    })?;
    let verify = opts.force_verify || cfg.verify.as_ref().is_some_and(|v| v.enabled);
    let tolerance = cfg.verify.as_ref().and_then(|v| v.tolerance);
    let results: Vec<Result<(), CliError>> =
        jobs.par_iter().map(|j| run_job(j, &ctx, verify.then_some(tolerance))).collect();
    let error = results.into_iter().find_map(Result::err);
    let mut manifest = ctx.manifest.into_inner().unwrap_or_else(|e| e.into_inner());
    manifest.complete = error.is_none() && manifest.jobs.iter().all(|j| j.complete);
    manifest.error = error.as_ref().map(|e| e.to_string());
    manifest.wall_time_s = prior_wall + start.elapsed().as_secs_f64();
    manifest.save(&opts.out)?;
    Ok(Outcome { manifest, error })
}

/// One solver run inside a job.
#[derive(Clone, Copy)]
enum Unit<'a> {
    Exact(&'a BhJob),
    Twopi(&'a BhJob, Scheme),
    Qmon(&'a QmonJob, QmonRun),
}

impl Unit<'_> {
    fn label(&self) -> String {
        match self {
            Unit::Exact(_) => "exact".into(),
            Unit::Twopi(_, s) => format!("twopi/{}", s.tag()),
            Unit::Qmon(_, o) => format!("qmon/{}", o.tag()),
        }
    }

    fn stem(&self) -> String {
        self.label().replace('/', "-")
    }

    fn file(&self) -> String {
        format!("{}.dat", self.stem())
    }

    fn verdicts(&self, tr: &Trajectory) -> Value {
        match self {
            Unit::Exact(_) => json!({
                "conservation": drifts(tr),
                "norm_drift": tr.column("norm").map(relative_drift),
            }),
            Unit::Twopi(..) => json!({ "conservation": drifts(tr) }),
            Unit::Qmon(_, QmonRun::Exact) => json!({
                "energy_drift": tr.column("energy").map(relative_drift),
                "norm_drift": tr.column("norm").map(relative_drift),
            }),
            Unit::Qmon(..) => json!({
                "h_theorem": tr.column("entropy").map(h_theorem),
                "energy_drift": tr.column("energy").map(relative_drift),
            }),
        }
    }
}

fn units(spec: &JobSpec) -> Vec<Unit<'_>> {
    match spec {
        JobSpec::Exact(b) => vec![Unit::Exact(b)],
        JobSpec::Twopi(b) => b.schemes.iter().map(|&s| Unit::Twopi(b, s)).collect(),
        JobSpec::Qmon(q) => q.orders.iter().map(|&o| Unit::Qmon(q, o)).collect(),
        _ => Vec::new(),
    }
}

/// Checkpointing for one unit.
struct Ck<'a> {
    ctx: &'a Context,
    job: &'a str,
    rel: String,
    path: PathBuf,
    label: String,
    hash: [u8; 32],
}

impl Ck<'_> {
    fn every(&self) -> Option<usize> {
        self.ctx.checkpoint_every
    }

    fn save(&self, step: usize, arrays: Vec<Vec<f64>>) -> Result<(), CliError> {
        let c = Checkpoint { label: self.label.clone(), config_hash: self.hash, step: step as u64, arrays };
        let sha256 = write_bytes(&self.path, &c.encode())?;
        let rec = CheckpointRecord { label: self.label.clone(), path: self.rel.clone(), step: step as u64, sha256 };
        self.ctx.update(|m| m.job_mut(self.job).set_checkpoint(rec))
    }

    /// The checkpoint of an interrupted run, when resuming.
    fn load(&self) -> Result<Option<Checkpoint>, CliError> {
        if !self.ctx.resumed || !self.path.exists() {
            return Ok(None);
        }
        let c = Checkpoint::load(&self.path)?;
        if c.label != self.label || c.config_hash != self.hash {
            return Err(CliError::Config(format!("{}: checkpoint belongs to another run", self.path.display())));
        }
        Ok(Some(c))
    }

    fn clear(&self) -> Result<(), CliError> {
        if self.path.exists() {
            std::fs::remove_file(&self.path).map_err(|e| CliError::Io(format!("{}: {e}", self.path.display())))?;
        }
        self.ctx.update(|m| m.job_mut(self.job).drop_checkpoint(&self.label))
    }
}

fn unit_hash(unit: &Unit, spec: &JobSpec) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(code_version().as_bytes());
    h.update(unit.label().as_bytes());
    h.update(serde_json::to_string(spec).unwrap_or_default().as_bytes());
    h.finalize().into()
}

fn bh_provenance(tr: Trajectory, b: &BhJob) -> Trajectory {
    let occ: Vec<String> = b.occupations.iter().map(u32::to_string).collect();
    let tr = tr.with_provenance("atoms", b.atoms).with_provenance("occupations", occ.join(","));
    match b.window {
        Some(w) => tr.with_provenance("window", w),
        None => tr,
    }
}

fn binomial(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Run one unit. On failure the trajectory up to the last good step comes back with the error.
fn simulate(unit: Unit, ck: Option<&Ck>) -> (Option<Trajectory>, Result<(), CliError>) {
    let label = unit.label();
    let solver_err = |e| CliError::from_solver(&label, e);
    match unit {
        Unit::Exact(b) => {
            let sites = b.params.sites as u64;
            let largest = match b.oracle {
                Oracle::FixedN => b.atoms as f64,
                Oracle::Coherent => {
                    let n = b.atoms as f64;
                    (n + 12.0 * n.sqrt() + 20.0).ceil()
                }
            };
            let dim = binomial(largest as u64 + sites - 1, sites - 1);
            if dim > b.max_dimension as f64 {
                return (
                    None,
                    Err(CliError::Resource(format!(
                        "caps.max_dimension: Fock space of dimension {dim:.0} exceeds {}",
                        b.max_dimension
                    ))),
                );
            }
            let series = match b.oracle {
                Oracle::FixedN => observe_exact(
                    b.atoms as usize,
                    &b.params,
                    &InitialKind::FockVector { occupations: b.occupations.clone() },
                    &b.grid,
                ),
                Oracle::Coherent => observe_coherent(&amplitudes(&b.occupations).amplitudes(), &b.params, &b.grid),
            };
            let tr = series.and_then(|s| s.trajectory(b.grid, &b.params)).map_err(solver_err);
            match tr {
                Ok(tr) => {
                    let oracle = match b.oracle {
                        Oracle::FixedN => "fixed-n",
                        Oracle::Coherent => "coherent",
                    };
                    (Some(bh_provenance(tr, b).with_provenance("oracle", oracle)), Ok(()))
                }
                Err(e) => (None, Err(e)),
            }
        }
        Unit::Twopi(b, scheme) => {
            let mut cfg = TwoPiConfig::new(b.params.clone(), scheme, b.grid, amplitudes(&b.occupations));
            cfg.window = HistoryWindow(b.window);
            cfg.memory_budget = b.memory;
            let mut s = match TwoPiSolver::new(cfg) {
                Ok(s) => s,
                Err(e) => return (None, Err(solver_err(e))),
            };
            let traj = |s: &TwoPiSolver| -> Result<Trajectory, CliError> {
                let samples: Vec<_> = (0..=s.current()).map(|k| s.sample(k)).collect();
                samples_trajectory(&samples, b.grid, &b.params, scheme).map(|t| bh_provenance(t, b)).map_err(solver_err)
            };
            if let Some(ck) = ck {
                match ck.load() {
                    Ok(Some(c)) if c.arrays.len() == 3 => {
                        if let Err(e) = s.restore(c.step as usize, &c.arrays[0], &c.arrays[1], &c.arrays[2]) {
                            return (None, Err(CliError::Config(format!("{}: {e}", ck.path.display()))));
                        }
                    }
                    Ok(Some(_)) => {
                        return (None, Err(CliError::Config(format!("{}: wrong layout", ck.path.display()))))
                    }
                    Ok(None) => {}
                    Err(e) => return (None, Err(e)),
                }
            }
            while !s.is_done() {
                if let Err(e) = s.step() {
                    return (traj(&s).ok(), Err(solver_err(e)));
                }
                if let (Some(ck), false) = (ck, s.is_done()) {
                    if ck.every().is_some_and(|n| s.current() % n == 0) {
                        let (cur, f, r, phi) = s.state();
                        if let Err(e) = ck.save(cur, vec![f.to_vec(), r.to_vec(), phi.to_vec()]) {
                            return (traj(&s).ok(), Err(e));
                        }
                    }
                }
            }
            match traj(&s) {
                Ok(t) => (Some(t), Ok(())),
                Err(e) => (None, Err(e)),
            }
        }
        Unit::Qmon(q, QmonRun::Exact) => match evolve_exact_radial(&q.params, &q.initial, &q.grid, q.radial) {
            Ok(t) => (Some(t.with_provenance("order", "exact").with_provenance("basis", q.radial.basis)), Ok(())),
            Err(e) => (None, Err(solver_err(e))),
        },
        Unit::Qmon(q, run) => {
            let order = if run == QmonRun::Lo { QmonOrder::Lo } else { QmonOrder::Nlo };
            let cfg = QmonConfig { params: q.params, order, grid: q.grid, initial: q.initial, memory_budget: q.memory };
            let mut s = match QmonSolver::new(cfg) {
                Ok(s) => s,
                Err(e) => return (None, Err(solver_err(e))),
            };
            if let Some(ck) = ck {
                match ck.load() {
                    Ok(Some(c)) if c.arrays.len() == 2 => {
                        if let Err(e) = s.restore(c.step as usize, &c.arrays[0], &c.arrays[1]) {
                            return (None, Err(CliError::Config(format!("{}: {e}", ck.path.display()))));
                        }
                    }
                    Ok(Some(_)) => {
                        return (None, Err(CliError::Config(format!("{}: wrong layout", ck.path.display()))))
                    }
                    Ok(None) => {}
                    Err(e) => return (None, Err(e)),
                }
            }
            while !s.is_done() {
                if let Err(e) = s.step() {
                    return (s.trajectory().ok(), Err(solver_err(e)));
                }
                if let (Some(ck), false) = (ck, s.is_done()) {
                    if ck.every().is_some_and(|n| s.current() % n == 0) {
                        let (rows, f, r) = s.state();
                        if let Err(e) = ck.save(rows, vec![f.to_vec(), r.to_vec()]) {
                            return (s.trajectory().ok(), Err(e));
                        }
                    }
                }
            }
            match s.trajectory() {
                Ok(t) => (Some(t), Ok(())),
                Err(e) => (None, Err(solver_err(e))),
            }
        }
    }
}

fn rel_path(job: &str, file: &str) -> String {
    if job.is_empty() {
        file.to_string()
    } else {
        format!("{job}/{file}")
    }
}

fn run_job(job: &Job, ctx: &Context, verify: Option<Option<f64>>) -> Result<(), CliError> {
    let result = match &job.spec {
        JobSpec::Spectral(s) => run_spectral(job, s, ctx),
        JobSpec::Compare(c) => {
            let rep = compare_files(&c.reference, &c.candidates, &c.observable, c.per_atom)?;
            let text = serde_json::to_string_pretty(&rep).map_err(|e| CliError::Io(e.to_string()))?;
            let rel = rel_path(&job.name, "compare.json");
            let sha256 = write_bytes(&ctx.out.join(&rel), text.as_bytes())?;
            let verdicts: BTreeMap<String, Value> = rep
                .candidates
                .iter()
                .map(|c| (c.trajectory.label.clone(), json!({ "damping": c.damping, "rate_offset": c.rate_offset })))
                .collect();
            ctx.update(|m| {
                let r = m.job_mut(&job.name);
                r.set_file(FileRecord { path: rel, sha256, complete: true });
                r.verdicts.insert("compare.json".into(), json!(verdicts));
            })
        }
        spec => run_time_job(job, spec, ctx, verify),
    };
    let complete = result.is_ok();
    let error = result.as_ref().err().map(|e| e.to_string());
    ctx.update(|m| {
        let r = m.job_mut(&job.name);
        r.complete = complete;
        r.error = error;
    })?;
    result
}

fn run_time_job(job: &Job, spec: &JobSpec, ctx: &Context, verify: Option<Option<f64>>) -> Result<(), CliError> {
    let dir = ctx.out.join(&job.name);
    let mut done: Vec<(String, Trajectory)> = Vec::new();
    for unit in units(spec) {
        let rel = rel_path(&job.name, &unit.file());
        let path = dir.join(unit.file());
        // a finished unit of an interrupted run is kept as written
        if ctx.resumed {
            let prior = ctx.record(&job.name).file(&rel).cloned();
            if let Some(f) = prior.filter(|f| f.complete) {
                if path.exists() && sha256_file(&path)? == f.sha256 {
                    done.push((unit.file(), read_trajectory(&path)?));
                    continue;
                }
            }
        }
        let ck = Ck {
            ctx,
            job: &job.name,
            rel: rel_path(&job.name, &format!("{}.ckpt", unit.stem())),
            path: dir.join(format!("{}.ckpt", unit.stem())),
            label: unit.label(),
            hash: unit_hash(&unit, spec),
        };
        let (tr, res) = simulate(unit, Some(&ck));
        if let Some(tr) = &tr {
            let sha256 = write_trajectory(&path, tr)?;
            let verdict = unit.verdicts(tr);
            let complete = res.is_ok();
            ctx.update(|m| {
                let r = m.job_mut(&job.name);
                r.set_file(FileRecord { path: rel.clone(), sha256, complete });
                r.verdicts.insert(unit.file(), verdict);
            })?;
        }
        res?;
        ck.clear()?;
        done.push((unit.file(), tr.expect("successful runs return a trajectory")));
    }
    if let (Some(tol), Some(grid)) = (verify, spec.grid()) {
        let fine = spec.with_grid(grid.refined());
        let mut files = BTreeMap::new();
        let mut worst = 0.0f64;
        let mut error = None;
        for (unit, (name, coarse)) in units(&fine).into_iter().zip(&done) {
            match simulate(unit, None) {
                (Some(half), Ok(())) => {
                    let mut cols = BTreeMap::new();
                    let mut m = 0.0f64;
                    for c in &coarse.columns {
                        if let Some(h) = half.column(&c.name) {
                            let d = c.values.iter().enumerate().map(|(k, v)| (v - h[2 * k]).abs()).fold(0.0, f64::max);
                            m = m.max(d);
                            cols.insert(c.name.clone(), d);
                        }
                    }
                    worst = worst.max(m);
                    files.insert(name.clone(), json!({ "max_deviation": m, "columns": cols }));
                }
                (_, Err(e)) => {
                    error = Some(e.to_string());
                    break;
                }
                (None, Ok(())) => unreachable!("successful runs return a trajectory"),
            }
        }
        let report = json!({
            "dt": grid.dt,
            "dt_half": grid.dt / 2.0,
            "files": files,
            "max_deviation": worst,
            "tolerance": tol,
            "passed": error.is_none() && tol.is_none_or(|t| worst <= t),
            "error": error,
        });
        ctx.update(|m| m.job_mut(&job.name).verify = Some(report))?;
    }
    Ok(())
}

fn run_spectral(job: &Job, s: &SpectralSection, ctx: &Context) -> Result<(), CliError> {
    let ctxe = |e| CliError::from_solver("spectral", e);
    let spec = product_spectrum(s.a1, s.a2, s.m2, s.cutoff).map_err(ctxe)?;
    let mut levels = String::from("# format: keldysh-levels 1\n# columns: ell n kappa2 eigenvalue degeneracy\n");
    for l in &spec.levels {
        levels.push_str(&format!("{} {} {:.16e} {:.16e} {}\n", l.ell, l.n, l.kappa2, l.eigenvalue, l.degeneracy));
    }
    let slopes: Vec<Value> = s
        .slopes
        .iter()
        .map(|sl| {
            count_slope(&spec, sl.band, sl.lo, sl.hi, sl.points)
                .map(|v| json!({ "band": sl.band, "lo": sl.lo, "hi": sl.hi, "points": sl.points, "slope": v }))
        })
        .collect::<Result<_, _>>()
        .map_err(ctxe)?;
    let zeta = match &s.zeta {
        Some(z) => Some(zeta_partial(&spec, z.nu, z.mu, z.formal).map_err(ctxe)?),
        None => None,
    };
    let eird = s.eird.as_ref().map(|e| eird_classify(&spec, e.m_eff, e.noncompact, e.thresholds()));
    let operators: Vec<Value> = s
        .operators
        .iter()
        .map(|o| {
            OperatorSpec::new(o.fields, o.derivatives, o.dim).map(|op| {
                let (d, class) = classify_operator(op);
                json!({ "fields": o.fields, "derivatives": o.derivatives, "dim": o.dim, "scaling_dimension": d, "class": class })
            })
        })
        .collect::<Result<_, _>>()
        .map_err(ctxe)?;
    let report = json!({
        "geometry": spec.geometry,
        "m2": spec.m2,
        "cutoff": spec.cutoff,
        "levels": spec.levels.len(),
        "total_states": spec.total_states(),
        "slopes": slopes,
        "zeta": zeta,
        "eird": eird,
        "operators": operators,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    let (rl, rs) = (rel_path(&job.name, "levels.dat"), rel_path(&job.name, "spectral.json"));
    let hl = write_bytes(&ctx.out.join(&rl), levels.as_bytes())?;
    let hs = write_bytes(&ctx.out.join(&rs), text.as_bytes())?;
    ctx.update(|m| {
        let r = m.job_mut(&job.name);
        r.set_file(FileRecord { path: rl, sha256: hl, complete: true });
        r.set_file(FileRecord { path: rs, sha256: hs, complete: true });
    })
}
