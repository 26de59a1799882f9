use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keldysh_cli::config::{load_config, parse_config, CompareSection, JobKind, RunConfig};
use keldysh_cli::manifest::{Manifest, MANIFEST_NAME};
use keldysh_cli::run::{execute, RunOptions};
use keldysh_cli::{CliError, EXIT_OK};

#[derive(Parser)]
#[command(
    name = "keldysh",
    version,
    about = "Two-time quantum dynamics jobs: exact oracles, 2PI lattice schemes, O(N) oscillator, spectra"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact Bose-Hubbard evolution
    Exact(RunArgs),
    /// 2PI lattice schemes
    Twopi(RunArgs),
    /// O(N) oscillator at LO, NLO and exactly
    Qmon(RunArgs),
    /// Product-manifold spectrum, zeta function and infrared dimension
    Spectral(RunArgs),
    /// Compare trajectories against a reference
    Compare(CompareArgs),
    /// Run the job file's job at dt and dt/2 and report the deviation
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Job file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint every this many steps
    #[arg(long, value_name = "STEPS")]
    checkpoint_every: Option<usize>,
    /// Continue the run recorded in this manifest
    #[arg(long, value_name = "MANIFEST")]
    resume: Option<PathBuf>,
    /// Worker threads; never changes results
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Trajectory files, reference first
    paths: Vec<PathBuf>,
    /// Column to fit and compare
    #[arg(long, default_value = "population_0")]
    observable: String,
    /// Compare raw values instead of values per atom
    #[arg(long)]
    raw: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32, CliError> {
    let (kind, args, inline) = match cmd {
        Cmd::Exact(a) => (Some(JobKind::Exact), a, None),
        Cmd::Twopi(a) => (Some(JobKind::Twopi), a, None),
        Cmd::Qmon(a) => (Some(JobKind::Qmon), a, None),
        Cmd::Spectral(a) => (Some(JobKind::Spectral), a, None),
        Cmd::Verify(a) => (None, a, None),
        Cmd::Compare(c) => {
            let inline = if c.paths.is_empty() {
                None
            } else {
                if c.paths.len() < 2 {
                    return Err(CliError::Config("compare needs a reference and at least one candidate".into()));
                }
                let cfg = RunConfig {
                    job: Default::default(),
                    grid: None,
                    bh: None,
                    qmon: None,
                    spectral: None,
                    compare: Some(CompareSection {
                        reference: absolute(&c.paths[0])?,
                        candidates: c.paths[1..].iter().map(|p| absolute(p)).collect::<Result<_, _>>()?,
                        observable: c.observable,
                        per_atom: !c.raw,
                    }),
                    sweep: None,
                    caps: Default::default(),
                    verify: None,
                };
                Some(toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?)
            };
            (Some(JobKind::Compare), c.run, inline)
        }
    };
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Io(e.to_string()))?;
    }

    let resume = match &args.resume {
        Some(p) => Some(Manifest::load(p)?),
        None => None,
    };
    let (cfg, text, dir) = match (&resume, &args.config, inline) {
        (Some(m), cfg_path, _) => {
            if let Some(p) = cfg_path {
                let (_, t) = load_config(p)?;
                if t != m.config_text {
                    return Err(CliError::Config("--config differs from the job file recorded in the manifest".into()));
                }
            }
            (parse_config(&m.config_text)?, m.config_text.clone(), m.config_dir.clone())
        }
        (None, _, Some(text)) => {
            (parse_config(&text)?, text, std::env::current_dir().map_err(|e| CliError::Io(e.to_string()))?)
        }
        (None, Some(p), None) => {
            let (c, t) = load_config(p)?;
            let dir = absolute(p)?.parent().map(Path::to_path_buf).unwrap_or_default();
            (c, t, dir)
        }
        (None, None, None) => return Err(CliError::Config("--config is required".into())),
    };
    let out = match (&args.out, &args.resume) {
        (Some(o), _) => o.clone(),
        (None, Some(m)) => absolute(m)?.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => return Err(CliError::Config("--out is required".into())),
    };
    let force_verify = kind.is_none();
    let kind = match kind {
        Some(k) => k,
        None => cfg
            .job
            .kind
            .ok_or_else(|| CliError::Config("job.kind: verify needs the job kind in the job file".into()))?,
    };
    let opts = RunOptions { out: out.clone(), checkpoint_every: args.checkpoint_every, force_verify };
    let outcome = execute(kind, &cfg, &text, &dir, &opts, resume)?;
    println!("{}", out.join(MANIFEST_NAME).display());
    for j in &outcome.manifest.jobs {
        let name = if j.name.is_empty() { kind.tag() } else { &j.name };
        let verify = j
            .verify
            .as_ref()
            .and_then(|v| v.get("max_deviation"))
            .map(|d| format!(" dt/2 deviation {d}"))
            .unwrap_or_default();
        println!("{name}: {}{verify}", if j.complete { "complete" } else { "incomplete" });
    }
    if let Some(e) = &outcome.error {
        eprintln!("error: {e}");
        return Ok(e.exit_code());
    }
    if outcome
        .manifest
        .jobs
        .iter()
        .any(|j| j.verify.as_ref().and_then(|v| v.get("passed")) == Some(&serde_json::Value::Bool(false)))
    {
        eprintln!("error: dt vs dt/2 deviation above tolerance");
        return Ok(keldysh_cli::EXIT_VALIDATION);
    }
    Ok(EXIT_OK)
}

fn absolute(p: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
}
