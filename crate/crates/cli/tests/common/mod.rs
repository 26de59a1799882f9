#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use keldysh_cli::manifest::Manifest;

pub fn keldysh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keldysh")).args(args).output().expect("binary runs")
}

pub fn job(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut a = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    a.extend_from_slice(extra);
    keldysh(&a)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn manifest(out: &Path) -> Manifest {
    Manifest::load(&out.join("manifest.json")).unwrap()
}

/// Names of the files that differ between two output directories.
pub fn differing(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .map(|n| n.to_string())
        .collect()
}

/// Start `cmd` with checkpoints, kill it once a checkpoint is recorded, then resume it.
pub fn interrupted_run(cmd: &str, cfg: &Path, out: &Path, every: &str) -> Result<(), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_keldysh"))
        .args([cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--checkpoint-every", every])
        .spawn()
        .map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    loop {
        let has = Manifest::load(&out.join("manifest.json"))
            .map(|m| m.jobs.iter().any(|j| !j.checkpoints.is_empty()))
            .unwrap_or(false);
        if has {
            break;
        }
        if let Some(s) = child.try_wait().map_err(|e| e.to_string())? {
            return Err(format!("run ended before any checkpoint ({s})"));
        }
        if t0.elapsed() > Duration::from_secs(600) {
            let _ = child.kill();
            return Err("no checkpoint within 600 s".into());
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    child.kill().map_err(|e| e.to_string())?;
    child.wait().map_err(|e| e.to_string())?;
    if manifest(out).complete {
        return Err("run completed before the kill".into());
    }
    let o = keldysh(&[cmd, "--resume", out.join("manifest.json").to_str().unwrap(), "--checkpoint-every", every]);
    if !o.status.success() {
        return Err(format!("resume failed: {}", stderr(&o)));
    }
    let m = manifest(out);
    if !m.complete || m.jobs.iter().any(|j| !j.checkpoints.is_empty()) {
        return Err("resumed run left checkpoints or is incomplete".into());
    }
    Ok(())
}
