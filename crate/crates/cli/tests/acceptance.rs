//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria with a documented shortfall print `FAIL (known: ...)` and do not fail the
//! process; any other failure does. Pass criterion numbers as arguments to run a subset.

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use keldysh::observables::linear_fit;
use keldysh::qmon::{evolve_lo, evolve_nlo, gap_static, QmonInitial, QmonParams};
use keldysh::spectral::{
    classify_operator, count_slope, eird_classify, product_spectrum, Band, EirdThresholds, OperatorSpec, Relevance,
};
use keldysh::TimeGrid;
use keldysh_cli::compare::{ComparisonReport, Damping};

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    title: &'static str,
    /// Reason this criterion is expected to fail, if it is.
    known: Option<&'static str>,
    check: fn(&Ctx) -> Outcome,
}

struct Ctx {
    dir: tempfile::TempDir,
}

impl Ctx {
    fn path(&self, p: &str) -> std::path::PathBuf {
        self.dir.path().join(p)
    }

    /// Runs a CLI job once per context; later callers reuse the output directory.
    fn cli(&self, cmd: &str, name: &str, text: &str, extra: &[&str]) -> Result<(std::path::PathBuf, f64), String> {
        let out = self.path(name);
        let stamp = out.join(".elapsed");
        if let Ok(s) = std::fs::read_to_string(&stamp) {
            return Ok((out, s.parse().unwrap()));
        }
        let cfg = job(self.dir.path(), &format!("{name}.toml"), text);
        let t0 = Instant::now();
        let o = run(cmd, &cfg, &out, extra);
        let el = t0.elapsed().as_secs_f64();
        if !o.status.success() {
            return Err(format!("{cmd} {name} exited {:?}: {}", o.status.code(), stderr(&o).trim()));
        }
        std::fs::write(&stamp, el.to_string()).unwrap();
        Ok((out, el))
    }

    fn compare(
        &self,
        name: &str,
        reference: &Path,
        candidates: &[std::path::PathBuf],
        raw: bool,
    ) -> Result<ComparisonReport, String> {
        let out = self.path(name);
        let mut a = vec!["compare".to_string(), reference.display().to_string()];
        a.extend(candidates.iter().map(|p| p.display().to_string()));
        a.extend(["--out".into(), out.display().to_string()]);
        if raw {
            a.push("--raw".into());
        }
        let o = keldysh(&a.iter().map(String::as_str).collect::<Vec<_>>());
        if !o.status.success() {
            return Err(format!("compare exited {:?}: {}", o.status.code(), stderr(&o).trim()));
        }
        let text = std::fs::read_to_string(out.join("compare.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    }
}

const SCHEMES: [&str; 4] = ["bogoliubov", "hfb", "second-order", "large-n-nlo"];

fn free_job() -> String {
    r#"
[grid]
t_end = 20.0
dt = 0.05
[bh]
sites = 2
u = 0.0
atoms = 20
boundary = "open"
"#
    .into()
}

fn n40_job(dt: f64) -> String {
    format!(
        r#"
[grid]
t_end = 10.0
dt = {dt}
[bh]
sites = 2
un = 4.0
atoms = 40
boundary = "double-link"
"#
    )
}

fn sweep_job() -> String {
    r#"
[grid]
t_end = 10.0
dt = 0.01
[bh]
sites = 2
un = 4.0
boundary = "double-link"
[sweep]
atoms = [20, 40, 80]
"#
    .into()
}

fn twopi_files() -> Vec<String> {
    SCHEMES.iter().map(|s| format!("twopi-{s}.dat")).collect()
}

fn free_limit(c: &Ctx) -> Outcome {
    let (ex, t1) = c.cli("exact", "c1-exact", &free_job(), &[])?;
    let (tp, t2) = c.cli("twopi", "c1-twopi", &free_job(), &[])?;
    let files: Vec<_> = twopi_files().iter().map(|f| tp.join(f)).collect();
    let rep = c.compare("c1-compare", &ex.join("exact.dat"), &files, true)?;
    let tol = 1e-6 * 20.0;
    let mut worst = 0.0f64;
    for cand in &rep.candidates {
        let dev = cand
            .max_deviation
            .iter()
            .filter(|(k, _)| k.starts_with("population_"))
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        if !(dev < tol) {
            return Err(format!("{}: max population error {dev:.3e} ≥ {tol:.0e}", cand.trajectory.scheme));
        }
        worst = worst.max(dev);
    }
    if rep.candidates.len() != 4 {
        return Err(format!("{} schemes compared", rep.candidates.len()));
    }
    let el = t1 + t2;
    if el >= 30.0 {
        return Err(format!("runtime {el:.1} s ≥ 30 s (error {worst:.2e})"));
    }
    Ok(format!("max population error {worst:.2e} over Jt ∈ [0, 20], {el:.1} s"))
}

fn collapse_scaling(c: &Ctx) -> Outcome {
    let (out, el) = c.cli("exact", "c2-sweep", &sweep_job(), &[])?;
    let f = |n: u32| out.join(format!("atoms-{n}/exact.dat"));
    let rep = c.compare("c2-compare", &f(20), &[f(40), f(80)], false)?;
    let s = rep.collapse_scaling.iter().find(|s| s.scheme == "exact").ok_or("no scaling report")?;
    if s.ratios.len() != 2 {
        return Err(format!("{} ratios", s.ratios.len()));
    }
    let r2 = std::f64::consts::SQRT_2;
    let text = format!(
        "t_coll {:?}, ratios {:.3} {:.3}, {el:.1} s",
        s.t_coll.iter().map(|t| (t * 1e3).round() / 1e3).collect::<Vec<_>>(),
        s.ratios[0],
        s.ratios[1]
    );
    if s.ratios.iter().any(|r| (r / r2 - 1.0).abs() > 0.2) {
        return Err(format!("ratio outside √2 ± 20%: {text}"));
    }
    if el >= 300.0 {
        return Err(format!("runtime ≥ 5 min: {text}"));
    }
    Ok(text)
}

fn damping_order(c: &Ctx) -> Outcome {
    let (ex, _) = c.cli("exact", "c3-exact", &n40_job(0.02), &[])?;
    let (tp, _) = c.cli("twopi", "c34-coarse", &n40_job(0.02), &[])?;
    let files: Vec<_> = twopi_files().iter().map(|f| tp.join(f)).collect();
    let rep = c.compare("c3-compare", &ex.join("exact.dat"), &files, false)?;
    let cand = |s: &str| rep.candidate(s).ok_or(format!("no {s} candidate"));
    let rate = |s: &str| -> Result<f64, String> { cand(s)?.rate_offset.ok_or(format!("{s}: no damping fit")) };
    let (h, so, nlo) = (rate("hfb")?, rate("second-order")?, rate("large-n-nlo")?);
    let exact = rep.reference_fit.fit.as_ref().map(|f| f.rate).unwrap_or(f64::NAN);
    let text = format!("exact rate {exact:.3}, offsets hfb {h:+.3} second-order {so:+.3} nlo {nlo:+.3}");
    if cand("hfb")?.damping != Some(Damping::Underdamped) {
        return Err(format!("hfb not underdamped: {text}"));
    }
    if cand("second-order")?.damping != Some(Damping::Overdamped) {
        return Err(format!("second order not overdamped: {text}"));
    }
    if rep.closer_than("large-n-nlo", "second-order") != Some(true) {
        return Err(format!("nlo not closer than second order: {text}"));
    }
    Ok(text)
}

fn conservation(c: &Ctx) -> Outcome {
    let (a, _) = c.cli("twopi", "c34-coarse", &n40_job(0.02), &[])?;
    let (b, _) = c.cli("twopi", "c4-fine", &n40_job(0.01), &[])?;
    let (ma, mb) = (manifest(&a), manifest(&b));
    let drift = |m: &keldysh_cli::manifest::Manifest, f: &str, q: &str| -> Result<f64, String> {
        m.jobs[0].verdicts.get(f).and_then(|v| v["conservation"][q].as_f64()).ok_or(format!("{f}: no {q} drift"))
    };
    let mut worst_n = 0.0f64;
    let mut min_shrink = f64::INFINITY;
    for f in twopi_files() {
        let (n1, n2) = (drift(&ma, &f, "number")?, drift(&mb, &f, "number")?);
        if !(n1 < 1e-6) {
            return Err(format!("{f}: number drift {n1:.2e}"));
        }
        worst_n = worst_n.max(n1);
        min_shrink = min_shrink.min(n1 / n2);
    }
    let (e1, e2) = (drift(&ma, "twopi-hfb.dat", "energy")?, drift(&mb, "twopi-hfb.dat", "energy")?);
    let text = format!(
        "number drift ≤ {worst_n:.2e} (shrink ≥ {min_shrink:.2}×), hfb energy drift {e1:.2e} (shrink {:.2}×)",
        e1 / e2
    );
    if !(e1 < 1e-6) || min_shrink < 3.5 || e1 / e2 < 3.5 {
        return Err(text);
    }
    Ok(text)
}

fn h_theorem(c: &Ctx) -> Outcome {
    let text = r#"
[grid]
steps = 10000
dt = 0.01
[qmon]
components = 20
m2 = 1.0
lambda = 1.0
orders = ["lo", "nlo"]
initial = { kind = "gap-vacuum" }
"#;
    let (out, el) = c.cli("qmon", "c5-qmon", text, &[])?;
    let m = manifest(&out);
    let v = &m.jobs[0].verdicts;
    let nlo = &v["qmon-nlo.dat"]["h_theorem"];
    let lo = v["qmon-lo.dat"]["h_theorem"]["max_change"].as_f64().ok_or("no lo verdict")?;
    let mono = nlo["nondecreasing"].as_bool().ok_or("no nlo verdict")?;
    let summary = format!(
        "nlo worst drop {:.2e} at step {}, lo |S−S(0)| ≤ {lo:.1e}, {el:.0} s",
        nlo["worst_drop"].as_f64().unwrap_or(f64::NAN),
        nlo["worst_step"]
    );
    if !mono || !(lo < 1e-4) || el >= 600.0 {
        return Err(summary);
    }
    Ok(summary)
}

fn bisect_gap(m2: f64, lambda: f64) -> f64 {
    let g = |x: f64| x - m2 - lambda / (4.0 * x.sqrt());
    let (mut lo, mut hi) = (1e-12, 10.0 + m2.abs() + lambda);
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn static_gap(_: &Ctx) -> Outcome {
    let chi = gap_static(&QmonParams::new(20, 1.0, 1.0)).map_err(|e| e.to_string())?;
    let b = bisect_gap(1.0, 1.0);
    let free = gap_static(&QmonParams::new(20, 1.0, 0.0)).map_err(|e| e.to_string())?;
    let text = format!("gap {chi:.12}, bisection {b:.12}, λ=0 gives {free}");
    if (chi - b).abs() > 1e-12 || free != 1.0 {
        return Err(text);
    }
    Ok(text)
}

fn lo_nlo(_: &Ctx) -> Outcome {
    let g = TimeGrid::new(0.0, 0.02, 250).map_err(|e| e.to_string())?;
    let quench = QmonInitial::GapVacuum { m2: Some(2.0), lambda: None };
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for n in [25usize, 50, 100, 200] {
        let p = QmonParams::new(n, 1.0, 1.0);
        let lo = evolve_lo(p, quench, g).map_err(|e| e.to_string())?;
        let nlo = evolve_nlo(p, quench, g).map_err(|e| e.to_string())?;
        let d = lo
            .column("chi_bar")
            .unwrap()
            .iter()
            .zip(nlo.column("chi_bar").unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        x.push((n as f64).ln());
        y.push(d.ln());
    }
    let slope = linear_fit(&x, &y).0;
    let text = format!("log-log slope {slope:.3} over N = 25..200");
    if (slope + 1.0).abs() > 0.1 {
        return Err(text);
    }
    Ok(text)
}

/// States with `ℓ(ℓ+1)/a2² + n²/a1² + m2 ≤ cutoff`, one (ℓ, m, n) at a time.
fn enumerate(a1: f64, a2: f64, m2: f64, cutoff: f64) -> u64 {
    let mut count = 0;
    for ell in 0i64..200 {
        for _m in -ell..=ell {
            for n in -200i64..=200 {
                if (ell * (ell + 1)) as f64 / (a2 * a2) + (n * n) as f64 / (a1 * a1) + m2 <= cutoff {
                    count += 1;
                }
            }
        }
    }
    count
}

fn spectral_counts(_: &Ctx) -> Outcome {
    let s = product_spectrum(1.0, 1.0, 0.0, 10.0).map_err(|e| e.to_string())?;
    let (got, oracle) = (s.total_states(), enumerate(1.0, 1.0, 0.0, 10.0));
    let one =
        count_slope(&product_spectrum(100.0, 1.0, 0.0, 1.9).map_err(|e| e.to_string())?, Band::Ell(0), 0.2, 1.9, 20)
            .map_err(|e| e.to_string())?;
    let two =
        count_slope(&product_spectrum(1.0, 100.0, 0.0, 0.9).map_err(|e| e.to_string())?, Band::N(0), 0.1, 0.9, 20)
            .map_err(|e| e.to_string())?;
    let text = format!("{got} states (enumeration {oracle}), slopes {one:.3} and {two:.3}");
    if got != oracle || got != 47 || (one - 0.5).abs() > 0.05 || (two - 1.0).abs() > 0.05 {
        return Err(text);
    }
    Ok(text)
}

fn eird(_: &Ctx) -> Outcome {
    let th = EirdThresholds::default();
    let m = 0.01;
    let e = |a1: f64, a2: f64, m2: f64, cut: f64, meff: f64| -> Result<usize, String> {
        Ok(eird_classify(&product_spectrum(a1, a2, m2, cut).map_err(|e| e.to_string())?, meff, 0, th).eird)
    };
    let got = [e(1e4, 1.0, m * m, 1.0, m)?, e(1.0, 1e4, m * m, 1.0, m)?, e(1.0, 1.0, 1e4, 1e4 + 1.0, 100.0)?];
    let ops: Vec<(f64, Relevance)> =
        [2, 4, 6].iter().map(|&f| classify_operator(OperatorSpec::new(f, 0, 4).unwrap())).collect();
    let want = [(2.0, Relevance::Relevant), (4.0, Relevance::Marginal), (6.0, Relevance::Irrelevant)];
    let text = format!("regimes give {got:?}, φ²/φ⁴/φ⁶ in D=4 give {ops:?}");
    if got != [1, 2, 3] || ops != want {
        return Err(text);
    }
    Ok(text)
}

fn determinism(c: &Ctx) -> Outcome {
    let files = twopi_files();
    let names: Vec<&str> = files.iter().map(String::as_str).collect();

    let (first, _) = c.cli("twopi", "c1-twopi", &free_job(), &[])?;
    let (again, _) = c.cli("twopi", "c10-repeat", &free_job(), &[])?;
    let d = differing(&first, &again, &names);
    if !d.is_empty() {
        return Err(format!("repeat differs in {d:?}"));
    }

    let (coarse, _) = c.cli("twopi", "c34-coarse", &n40_job(0.02), &[])?;
    let cfg = job(c.dir.path(), "c10-resume.toml", &n40_job(0.02));
    interrupted_run("twopi", &cfg, &c.path("c10-resume"), "100")?;
    let d = differing(&coarse, &c.path("c10-resume"), &names);
    if !d.is_empty() {
        return Err(format!("resumed run differs in {d:?}"));
    }

    let (one, _) = c.cli("exact", "c2-sweep", &sweep_job(), &[])?;
    let (three, _) = c.cli("exact", "c10-threads", &sweep_job(), &["--threads", "3"])?;
    let sweep = ["atoms-20/exact.dat", "atoms-40/exact.dat", "atoms-80/exact.dat"];
    let d = differing(&one, &three, &sweep);
    if !d.is_empty() {
        return Err(format!("--threads 3 differs in {d:?}"));
    }
    Ok("repeat, kill + resume and --threads 3 give identical bytes".into())
}

fn main() {
    let criteria = [
        Criterion { id: 1, title: "free-limit exactness", known: None, check: free_limit },
        Criterion { id: 2, title: "collapse-time scaling", known: None, check: collapse_scaling },
        Criterion { id: 3, title: "damping ordering", known: None, check: damping_order },
        Criterion { id: 4, title: "conservation", known: None, check: conservation },
        Criterion {
            id: 5,
            title: "H-theorem",
            known: Some("NLO entropy shows small recurrences and the 10⁴-step run exceeds 10 min on one core"),
            check: h_theorem,
        },
        Criterion { id: 6, title: "static gap", known: None, check: static_gap },
        Criterion { id: 7, title: "LO/NLO 1/N consistency", known: None, check: lo_nlo },
        Criterion { id: 8, title: "spectral counts", known: None, check: spectral_counts },
        Criterion { id: 9, title: "EIRD and operator classes", known: None, check: eird },
        Criterion { id: 10, title: "determinism", known: None, check: determinism },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx { dir: tempfile::tempdir().expect("temp dir") };
    let mut unexpected = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let t0 = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (c.check)(&ctx))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let el = t0.elapsed().as_secs_f64();
        match (r, c.known) {
            (Ok(msg), _) => println!("criterion {:>2} PASS  {}: {msg} [{el:.1} s]", c.id, c.title),
            (Err(msg), Some(why)) => {
                println!("criterion {:>2} FAIL (known: {why})  {}: {msg} [{el:.1} s]", c.id, c.title)
            }
            (Err(msg), None) => {
                unexpected += 1;
                println!("criterion {:>2} FAIL  {}: {msg} [{el:.1} s]", c.id, c.title)
            }
        }
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
