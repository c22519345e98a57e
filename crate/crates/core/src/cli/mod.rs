//! Command-line runner: config parsing, protocol dispatch, CSV and manifest
//! output, plot-data export.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 invariant or
//! contract violation, 3 numerical failure (NaN/Inf).

mod config;
mod output;

pub use config::{parse_config, OptimizerConfig, Protocol, RunConfig};
pub use output::{
    config_hash, export_plotdata, files_for, header, write_manifest, CsvSink, Manifest,
};

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::inject::preset;
use crate::lockstep::{
    run_abft, run_calibrate, run_rq1, run_rq2, run_rq3, run_shadow, Outcome, Status,
};
use crate::model::{gradcheck, read_snapshot, Params};

/// Gradient-check acceptance bound on the per-tensor relative error.
pub const GRADCHECK_TOL: f64 = 1e-2;

#[derive(Parser, Debug)]
#[command(
    name = "sdclab",
    version,
    about = "Deterministic SDC simulator for tensor-parallel training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Lock-step computation synchronization; mismatch frequency and severity.
    Rq1(RunArgs),
    /// Gradient comparison with parameter broadcast; WCNTS.
    Rq2(RunArgs),
    /// Free-running paired training; parameter drift.
    Rq3(RunArgs),
    /// Shadow data-parallel replica detector.
    Shadow(RunArgs),
    /// Checksummed matmul at every linear layer.
    Abft(RunArgs),
    /// Finite-difference gradient check.
    Gradcheck(RunArgs),
    /// Measured vs configured corruption rate.
    Calibrate(RunArgs),
    /// Merge a run's metric CSVs into plotdata.csv.
    Export { run_dir: PathBuf },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory (else config out_dir, $SDCLAB_OUT, runs/<protocol>-seed<N>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preset profile: healthy, node10-like, node11-like, node14-like.
    #[arg(long)]
    profile: Option<String>,
}

fn resolve(protocol: Protocol, args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    cfg.protocol = protocol;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(name) = &args.profile {
        cfg.profile = Some(
            preset(name)
                .ok_or_else(|| Error::config("--profile", format!("unknown preset `{name}`")))?,
        );
    }
    cfg.validate()?;
    cfg.model = Some(cfg.model());
    cfg.profile = Some(cfg.profile());
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .or_else(|| std::env::var_os("SDCLAB_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", protocol, cfg.seed)));
    cfg.out_dir = Some(out.clone());
    Ok((cfg, out))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn dispatch(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    if cfg.protocol == Protocol::Gradcheck {
        let report = gradcheck(&cfg.model(), cfg.seed, cfg.gradcheck_h)?;
        let mut sink = CsvSink::create(out, Protocol::Gradcheck)?;
        for t in &report.tensors {
            sink.write(output::GRADCHECK, t)?;
        }
        sink.finish()?;
        let worst = report.worst().map(|t| t.name.as_str()).unwrap_or("-");
        println!(
            "gradcheck: max relative error {} ({worst})",
            report.max_rel_err
        );
        if report.max_rel_err > GRADCHECK_TOL {
            return Err(Error::Invariant(format!(
                "gradcheck max relative error {} > {GRADCHECK_TOL}",
                report.max_rel_err
            )));
        }
        return Ok(Outcome {
            status: Status::Completed,
            steps_run: 0,
            events: 0,
        });
    }

    let mut exp = cfg.experiment();
    if let Some(path) = &cfg.init_snapshot {
        let template = Params::init(&exp.model, cfg.seed)?;
        exp.init = Some(read_snapshot(path, &template)?);
    }
    let mut sink = CsvSink::create(out, cfg.protocol)?;
    let res = match cfg.protocol {
        Protocol::Rq1 => run_rq1(&exp, &mut sink),
        Protocol::Rq2 => run_rq2(&exp, &mut sink),
        Protocol::Rq3 => run_rq3(&exp, &mut sink),
        Protocol::Shadow => run_shadow(&exp, &mut sink),
        Protocol::Abft => run_abft(&exp, &mut sink),
        Protocol::Calibrate => run_calibrate(&exp, &mut sink).map(|(row, o)| {
            println!(
                "calibrate: measured {} expected {} 99% CI [{}, {}]",
                row.measured_rate, row.expected_rate, row.ci_lo, row.ci_hi
            );
            o
        }),
        Protocol::Gradcheck => unreachable!(),
    };
    let flushed = sink.finish();
    let outcome = res?;
    flushed?;
    Ok(outcome)
}

fn failure_status(e: &Error) -> &'static str {
    if let Error::PrecisionUnsupported { .. } = e {
        return "precision_unsupported";
    }
    match e.exit_code() {
        1 => "config_error",
        2 => "invariant_violation",
        _ => "numerical_failure",
    }
}

/// Runs one protocol and writes its manifest. Returns the process exit code.
pub fn execute(cfg: &RunConfig, out: &Path) -> i32 {
    let start_unix = now();
    if let Err(e) = std::fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return 1;
    }
    let res = dispatch(cfg, out);
    let (status, exit_code, message, outcome) = match &res {
        Ok(o) => (o.status.name().to_string(), 0, None, Some(o)),
        Err(e) => (
            failure_status(e).to_string(),
            e.exit_code(),
            Some(e.to_string()),
            None,
        ),
    };
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        protocol: cfg.protocol,
        seed: cfg.seed,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
        start_unix,
        end_unix: now(),
        status,
        exit_code,
        message: message.clone(),
        steps_run: outcome.map(|o| o.steps_run),
        fault_events: outcome.map(|o| o.events),
    };
    if let Err(e) = write_manifest(out, &manifest) {
        eprintln!("error: writing manifest: {e}");
        return 1;
    }
    match &res {
        Ok(o) => {
            let extra = match o.status {
                Status::UnhealthyDiverged { step } => {
                    format!(" (unhealthy node diverged at step {step})")
                }
                Status::Completed => String::new(),
            };
            println!(
                "{}: {} after {} steps, {} fault events{extra} -> {}",
                cfg.protocol,
                o.status.name(),
                o.steps_run,
                o.events,
                out.display()
            );
        }
        Err(e) => eprintln!("error: {e}"),
    }
    exit_code
}

/// Entry point shared by the binary and tests. Returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (protocol, args) = match cli.cmd {
        Cmd::Export { run_dir } => {
            return match export_plotdata(&run_dir) {
                Ok(p) => {
                    println!("wrote {}", p.display());
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            };
        }
        Cmd::Rq1(a) => (Protocol::Rq1, a),
        Cmd::Rq2(a) => (Protocol::Rq2, a),
        Cmd::Rq3(a) => (Protocol::Rq3, a),
        Cmd::Shadow(a) => (Protocol::Shadow, a),
        Cmd::Abft(a) => (Protocol::Abft, a),
        Cmd::Gradcheck(a) => (Protocol::Gradcheck, a),
        Cmd::Calibrate(a) => (Protocol::Calibrate, a),
    };
    match resolve(protocol, &args) {
        Ok((cfg, out)) => execute(&cfg, &out),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 1, "steps": 5, "out_dir": "from-file"}"#).unwrap();
        let args = RunArgs {
            config: Some(p.clone()),
            seed: Some(9),
            profile: Some("node11-like".into()),
            ..RunArgs::default()
        };
        let (cfg, out) = resolve(Protocol::Rq1, &args).unwrap();
        assert_eq!((cfg.seed, cfg.steps, cfg.protocol), (9, 5, Protocol::Rq1));
        assert_eq!(out, PathBuf::from("from-file"));
        assert_eq!(cfg.profile(), preset("node11-like").unwrap());
        let args = RunArgs {
            config: Some(p),
            out: Some("flag".into()),
            ..RunArgs::default()
        };
        assert_eq!(
            resolve(Protocol::Rq1, &args).unwrap().1,
            PathBuf::from("flag")
        );
    }

    #[test]
    fn unknown_profile_flag_is_config_error() {
        let args = RunArgs {
            profile: Some("node99".into()),
            ..RunArgs::default()
        };
        assert_eq!(resolve(Protocol::Rq3, &args).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn hash_ignores_out_dir() {
        let a = RunConfig {
            out_dir: Some("a".into()),
            ..RunConfig::default()
        };
        let b = RunConfig {
            out_dir: Some("b".into()),
            ..RunConfig::default()
        };
        assert_eq!(config_hash(&a), config_hash(&b));
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(config_hash(&a), config_hash(&c));
    }
}
