//! Columnar text trajectories and file hashing.
//!
//! ```text
//! # format: keldysh-trajectory 1
//! # grid: t0=0 dt=0.01 points=1001
//! # provenance: scheme=hfb
//! # columns: t population_0 population_1 ...
//! # units: time atoms atoms ...
//! 0.0000000000000000e0 4.0000000000000000e1 ...
//! ```
//! Numbers carry 17 significant digits, enough to round-trip every `f64`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use keldysh::observables::{Series, Trajectory};
use keldysh::TimeGrid;
use sha2::{Digest, Sha256};

use crate::CliError;

const FORMAT: &str = "keldysh-trajectory 1";

pub fn render(tr: &Trajectory) -> String {
    let g = tr.grid;
    let mut s = String::new();
    let _ = writeln!(s, "# format: {FORMAT}");
    let _ = writeln!(s, "# grid: t0={:?} dt={:?} points={}", g.t0, g.dt, g.n_steps);
    for (k, v) in &tr.provenance {
        let _ = writeln!(s, "# provenance: {k}={}", v.replace('\n', " "));
    }
    let names: Vec<&str> = tr.columns.iter().map(|c| c.name.as_str()).collect();
    let units: Vec<&str> = tr.columns.iter().map(|c| c.unit.as_str()).collect();
    let _ = writeln!(s, "# columns: t {}", names.join(" "));
    let _ = writeln!(s, "# units: time {}", units.join(" "));
    for k in 0..g.n_steps {
        let _ = write!(s, "{:.16e}", g.t(k));
        for c in &tr.columns {
            let _ = write!(s, " {:.16e}", c.values[k]);
        }
        s.push('\n');
    }
    s
}

/// Write a trajectory and return the SHA-256 of the bytes written.
pub fn write_trajectory(path: &Path, tr: &Trajectory) -> Result<String, CliError> {
    write_bytes(path, render(tr).as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    // write then rename, so a kill never leaves a truncated file under the final name
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(sha256_hex(bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let b = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&b))
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory, CliError> {
    let bad = |line: usize, m: &str| CliError::Config(format!("trajectory line {}: {m}", line + 1));
    let mut grid: Option<TimeGrid> = None;
    let mut prov = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut units: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seen_format = false;
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix("# ") {
            let (key, val) = h.split_once(": ").ok_or_else(|| bad(i, "malformed header"))?;
            match key {
                "format" => {
                    if val != FORMAT {
                        return Err(bad(i, "unknown format"));
                    }
                    seen_format = true;
                }
                "grid" => {
                    let mut t0 = None;
                    let mut dt = None;
                    let mut n = None;
                    for kv in val.split_whitespace() {
                        match kv.split_once('=') {
                            Some(("t0", v)) => t0 = v.parse::<f64>().ok(),
                            Some(("dt", v)) => dt = v.parse::<f64>().ok(),
                            Some(("points", v)) => n = v.parse::<usize>().ok(),
                            _ => return Err(bad(i, "malformed grid")),
                        }
                    }
                    let (Some(t0), Some(dt), Some(n)) = (t0, dt, n) else {
                        return Err(bad(i, "incomplete grid"));
                    };
                    grid = Some(TimeGrid { t0, dt, n_steps: n });
                }
                "provenance" => {
                    let (k, v) = val.split_once('=').ok_or_else(|| bad(i, "malformed provenance"))?;
                    prov.push((k.to_string(), v.to_string()));
                }
                "columns" => names = val.split_whitespace().map(str::to_string).collect(),
                "units" => units = val.split_whitespace().map(str::to_string).collect(),
                _ => return Err(bad(i, "unknown header")),
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad(i, "not a number"))?;
        if row.len() != names.len() {
            return Err(bad(i, "wrong number of fields"));
        }
        rows.push(row);
    }
    if !seen_format {
        return Err(CliError::Config("not a trajectory file".into()));
    }
    let grid = grid.ok_or_else(|| CliError::Config("trajectory without a grid header".into()))?;
    if names.first().map(String::as_str) != Some("t") || units.len() != names.len() {
        return Err(CliError::Config("trajectory columns and units do not match".into()));
    }
    if rows.len() != grid.n_steps {
        return Err(CliError::Config(format!("trajectory has {} rows, header says {}", rows.len(), grid.n_steps)));
    }
    let mut tr = Trajectory::new(grid);
    tr.provenance.clear();
    tr.provenance.extend(prov);
    for (j, (name, unit)) in names.iter().zip(&units).enumerate().skip(1) {
        tr.columns.push(Series { name: name.clone(), unit: unit.clone(), values: rows.iter().map(|r| r[j]).collect() });
    }
    Ok(tr)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_trajectory(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
