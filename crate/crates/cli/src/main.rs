//! `overtake` — command-line front end for the overtaking NMPC stack.
//!
//! Subcommands:
//!
//! * `run` — one closed-loop simulation, logged step by step.
//! * `experiment` — a paired randomized study across formulations.
//! * `shapes` — contour grids of a shape family at chosen sharpness values.
//! * `path-export` — a sampled random reference road.
//!
//! Every invocation writes its outputs into a single directory together with
//! `resolved_config.json`, the fully-resolved configuration (defaults, then
//! config file, then command-line flags), so any result can be reproduced
//! from its own output directory.
//!
//! Exit codes: `0` success, `2` command-line usage error, `3` invalid
//! configuration, `4` I/O failure, `5` runtime (solver/simulation) failure.
//! Failures print one machine-readable JSON line on stderr.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use overtake_core::path::{build_path, random_road, write_path_csv};
use overtake_core::qp::QpStatus;
use overtake_core::shape::{write_contour_csv, ShapeKind, ShapeSpec};
use overtake_core::sim::{
    compute_metrics, randomize, run_closed_loop, run_experiment, write_metrics_csv,
    write_run_log, ExperimentTable, Formulation, RunParams, RunRow,
};

const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Runtime(m) => m,
        }
    }
}

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

#[derive(Parser, Debug)]
#[command(
    name = "overtake",
    version,
    about = "NMPC overtaking planner: closed-loop runs, studies, and exports"
)]
struct Cli {
    /// JSON config file with harness parameters; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory (defaults to a per-invocation directory under ./out).
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one closed-loop overtake and write a step-by-step log.
    Run {
        /// Scenario seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Study design: 1 (nominal lane weight) or 2 (strong lane keeping).
        #[arg(long, default_value_t = 1)]
        experiment: u8,
        /// Obstacle formulation: scalednorm, lse, boltzmann, pnorm2, pnorm4,
        /// pnorm6, or relu2.
        #[arg(long, default_value = "scalednorm")]
        formulation: String,
        #[command(flatten)]
        params: ParamFlags,
    },
    /// Run a paired randomized study and write the aggregate metrics table.
    Experiment {
        /// Study design id: 1 or 2.
        #[arg(long = "id", default_value_t = 1)]
        id: u8,
        /// Number of random scenarios (each formulation sees the same ones).
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Base seed; scenario k uses seed `seed + k`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated formulations (default: all seven).
        #[arg(long, value_delimiter = ',')]
        formulations: Vec<String>,
        #[command(flatten)]
        params: ParamFlags,
    },
    /// Export contour grids of one shape family at several sharpness values.
    Shapes {
        /// Shape family: scalednorm, lse, boltzmann, pnorm, or relu2.
        #[arg(long)]
        kind: String,
        /// Comma-separated sharpness values, one contour file each.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        /// Grid half-width: values are sampled on [-extent, extent]^2.
        #[arg(long, default_value_t = 2.5)]
        extent: f64,
        /// Grid resolution (steps per axis).
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Sample a random reference road and export it as CSV.
    PathExport {
        /// Road seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Road length in meters.
        #[arg(long, default_value_t = 400.0)]
        length: f64,
        /// Arc-length sample spacing in meters.
        #[arg(long, default_value_t = 0.1)]
        ds: f64,
    },
}

/// Harness parameters as optional command-line overrides. Anything left
/// unset falls back to the config file, then to the built-in defaults.
#[derive(Args, Debug, Clone, Copy, Default)]
struct ParamFlags {
    /// Simulated closed-loop time in seconds.
    #[arg(long)]
    t_sim: Option<f64>,
    /// Planning horizon length in stages of 0.1 s.
    #[arg(long)]
    n_stages: Option<usize>,
    /// Ego footprint used to inflate obstacles (m).
    #[arg(long)]
    ego_length: Option<f64>,
    #[arg(long)]
    ego_width: Option<f64>,
    /// Homotopy width at the first stage (tight end, > 1).
    #[arg(long)]
    d_bar_0: Option<f64>,
    /// Homotopy width at the last stage (smooth end, >= d_bar_0).
    #[arg(long)]
    d_bar_n: Option<f64>,
    /// QP convergence tolerance.
    #[arg(long)]
    kkt_tol: Option<f64>,
    /// QP iteration cap.
    #[arg(long)]
    max_qp_iter: Option<usize>,
}

/// JSON config file: the same keys as the harness parameter struct, all
/// optional. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    t_sim: Option<f64>,
    n_stages: Option<usize>,
    ego_length: Option<f64>,
    ego_width: Option<f64>,
    d_bar_0: Option<f64>,
    d_bar_n: Option<f64>,
    kkt_tol: Option<f64>,
    max_qp_iter: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| io_err(&format!("reading config file {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

/// Defaults, overridden by the config file, overridden by flags.
fn resolve_params(file: &FileConfig, flags: &ParamFlags) -> Result<RunParams, CliError> {
    let mut p = RunParams::default();
    macro_rules! apply {
        ($field:ident) => {
            if let Some(v) = file.$field {
                p.$field = v;
            }
            if let Some(v) = flags.$field {
                p.$field = v;
            }
        };
    }
    apply!(t_sim);
    apply!(n_stages);
    apply!(ego_length);
    apply!(ego_width);
    apply!(d_bar_0);
    apply!(d_bar_n);
    apply!(kkt_tol);
    apply!(max_qp_iter);

    let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
    if !(p.t_sim > 0.0 && p.t_sim.is_finite()) {
        return bad("t_sim must be positive and finite");
    }
    if p.n_stages < 2 {
        return bad("n_stages must be at least 2");
    }
    if !(p.ego_length > 0.0 && p.ego_width > 0.0) {
        return bad("ego dimensions must be positive");
    }
    if !(p.d_bar_0 > 1.0 && p.d_bar_n >= p.d_bar_0) {
        return bad("require 1 < d_bar_0 <= d_bar_n");
    }
    if !(p.kkt_tol > 0.0 && p.kkt_tol.is_finite()) {
        return bad("kkt_tol must be positive and finite");
    }
    if p.max_qp_iter == 0 {
        return bad("max_qp_iter must be at least 1");
    }
    Ok(p)
}

fn parse_formulation(name: &str) -> Result<Formulation, CliError> {
    Formulation::from_name(name).ok_or_else(|| {
        CliError::Config(format!(
            "unknown formulation '{name}' (expected one of: {})",
            Formulation::ALL
                .iter()
                .map(|f| f.name())
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })
}

fn parse_formulations(names: &[String]) -> Result<Vec<Formulation>, CliError> {
    if names.is_empty() {
        return Ok(Formulation::ALL.to_vec());
    }
    names.iter().map(|n| parse_formulation(n)).collect()
}

fn parse_shape_kind(name: &str) -> Result<ShapeKind, CliError> {
    match name {
        "scalednorm" => Ok(ShapeKind::ScaledNorm),
        "lse" => Ok(ShapeKind::LogSumExp),
        "boltzmann" => Ok(ShapeKind::Boltzmann),
        "pnorm" => Ok(ShapeKind::FixedPNorm),
        "relu2" => Ok(ShapeKind::Relu2),
        other => Err(CliError::Config(format!(
            "unknown shape kind '{other}' (expected one of: scalednorm, lse, boltzmann, pnorm, relu2)"
        ))),
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| io_err(&format!("creating output directory {}", dir.display()), e))
}

fn create_output(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    let file =
        File::create(&path).map_err(|e| io_err(&format!("creating {}", path.display()), e))?;
    Ok(BufWriter::new(file))
}

fn write_resolved_config(dir: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut w = create_output(dir, "resolved_config.json")?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| io_err("writing resolved_config.json", e))?;
    writeln!(w).map_err(|e| io_err("writing resolved_config.json", e))?;
    w.flush().map_err(|e| io_err("writing resolved_config.json", e))
}

/// Trim a float for use in file/directory names: `0.1` -> "0p1".
fn fname_num(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.message(), "exit_code": e.code() });
            eprintln!("{line}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let file_cfg = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run {
            seed,
            experiment,
            formulation,
            params,
        } => cmd_run(cli.out_dir, &file_cfg, seed, experiment, &formulation, &params),
        Command::Experiment {
            id,
            n,
            seed,
            formulations,
            params,
        } => cmd_experiment(cli.out_dir, &file_cfg, id, n, seed, &formulations, &params),
        Command::Shapes {
            kind,
            alphas,
            extent,
            steps,
        } => cmd_shapes(cli.out_dir, &kind, &alphas, extent, steps),
        Command::PathExport { seed, length, ds } => cmd_path_export(cli.out_dir, seed, length, ds),
    }
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    experiment: u8,
    formulation: &'a str,
    steps: usize,
    all_optimal: bool,
    metrics: overtake_core::sim::Metrics,
}

fn cmd_run(
    out_dir: Option<PathBuf>,
    file_cfg: &FileConfig,
    seed: u64,
    experiment: u8,
    formulation: &str,
    flags: &ParamFlags,
) -> Result<(), CliError> {
    if !(experiment == 1 || experiment == 2) {
        return Err(CliError::Config("experiment must be 1 or 2".into()));
    }
    let f = parse_formulation(formulation)?;
    let params = resolve_params(file_cfg, flags)?;
    let dir = out_dir
        .unwrap_or_else(|| PathBuf::from(format!("out/run-seed{seed}-exp{experiment}-{}", f.name())));
    ensure_out_dir(&dir)?;

    let scenario = randomize(seed, experiment);
    let result = run_closed_loop(&scenario, f, &params)
        .map_err(|e| CliError::Runtime(format!("closed-loop run failed: {e}")))?;
    let metrics = compute_metrics(&result, &params);
    let all_optimal = result
        .records
        .iter()
        .all(|r| r.qp_status == QpStatus::Optimal);

    write_resolved_config(
        &dir,
        &serde_json::json!({
            "schema": "config/v1",
            "command": "run",
            "seed": seed,
            "experiment": experiment,
            "formulation": f.name(),
            "params": params,
            "scenario": scenario,
        }),
    )?;

    let log = create_output(&dir, "run-log.jsonl")?;
    write_run_log(&result, log).map_err(|e| io_err("writing run-log.jsonl", e))?;

    let table = ExperimentTable {
        experiment,
        base_seed: seed,
        rows: vec![RunRow {
            seed,
            formulation: f,
            completed: true,
            error: None,
            metrics: Some(metrics),
            all_optimal,
        }],
    };
    let csv = create_output(&dir, "metrics.csv")?;
    write_metrics_csv(&table, csv).map_err(|e| io_err("writing metrics.csv", e))?;

    let summary = RunSummary {
        seed,
        experiment,
        formulation: f.name(),
        steps: result.records.len(),
        all_optimal,
        metrics,
    };
    println!(
        "{}",
        serde_json::to_string(&summary).map_err(|e| io_err("encoding summary", e))?
    );
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn cmd_experiment(
    out_dir: Option<PathBuf>,
    file_cfg: &FileConfig,
    id: u8,
    n: usize,
    seed: u64,
    formulation_names: &[String],
    flags: &ParamFlags,
) -> Result<(), CliError> {
    if !(id == 1 || id == 2) {
        return Err(CliError::Config("experiment id must be 1 or 2".into()));
    }
    if n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    let formulations = parse_formulations(formulation_names)?;
    let params = resolve_params(file_cfg, flags)?;
    let dir = out_dir
        .unwrap_or_else(|| PathBuf::from(format!("out/experiment{id}-n{n}-seed{seed}")));
    ensure_out_dir(&dir)?;

    write_resolved_config(
        &dir,
        &serde_json::json!({
            "schema": "config/v1",
            "command": "experiment",
            "id": id,
            "n": n,
            "base_seed": seed,
            "formulations": formulations.iter().map(|f| f.name()).collect::<Vec<_>>(),
            "params": params,
        }),
    )?;

    let table = run_experiment(id, n, &formulations, seed, &params);
    let csv = create_output(&dir, "metrics.csv")?;
    write_metrics_csv(&table, csv).map_err(|e| io_err("writing metrics.csv", e))?;

    // Per-formulation medians over its completed runs, as one JSON line each.
    for &f in &formulations {
        let completed = table
            .rows
            .iter()
            .filter(|r| r.formulation == f && r.completed)
            .count();
        let line = serde_json::json!({
            "formulation": f.name(),
            "completed": completed,
            "runs": n,
            "median_delta_n_max": table.median(f, |m| m.delta_n_max),
            "median_delta_n_min": table.median(f, |m| m.delta_n_min),
            "median_delta_s": table.median(f, |m| Some(m.delta_s)),
            "median_solve_ms": table.median(f, |m| Some(m.solve_ms_median)),
        });
        println!("{line}");
    }
    println!("outputs written to {}", dir.display());
    Ok(())
}

fn cmd_shapes(
    out_dir: Option<PathBuf>,
    kind_name: &str,
    alphas: &[f64],
    extent: f64,
    steps: usize,
) -> Result<(), CliError> {
    let kind = parse_shape_kind(kind_name)?;
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(CliError::Config("extent must be positive and finite".into()));
    }
    if steps < 2 {
        return Err(CliError::Config("steps must be at least 2".into()));
    }
    let dir = out_dir.unwrap_or_else(|| PathBuf::from(format!("out/shapes-{kind_name}")));
    ensure_out_dir(&dir)?;

    write_resolved_config(
        &dir,
        &serde_json::json!({
            "schema": "config/v1",
            "command": "shapes",
            "kind": kind_name,
            "alphas": alphas,
            "extent": extent,
            "steps": steps,
        }),
    )?;

    for &alpha in alphas {
        let spec = ShapeSpec::new(kind, alpha)
            .map_err(|e| CliError::Config(format!("invalid sharpness {alpha}: {e}")))?;
        let name = format!("contour_{kind_name}_a{}.csv", fname_num(alpha));
        let out = create_output(&dir, &name)?;
        write_contour_csv(&spec, -extent, extent, steps, out)
            .map_err(|e| CliError::Runtime(format!("evaluating contour for alpha {alpha}: {e}")))?;
        println!("wrote {}", dir.join(&name).display());
    }
    Ok(())
}

fn cmd_path_export(
    out_dir: Option<PathBuf>,
    seed: u64,
    length: f64,
    ds: f64,
) -> Result<(), CliError> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(CliError::Config("length must be positive and finite".into()));
    }
    if !(ds > 0.0 && ds <= length) {
        return Err(CliError::Config("ds must be positive and at most length".into()));
    }
    let dir = out_dir.unwrap_or_else(|| PathBuf::from(format!("out/path-seed{seed}")));
    ensure_out_dir(&dir)?;

    write_resolved_config(
        &dir,
        &serde_json::json!({
            "schema": "config/v1",
            "command": "path-export",
            "seed": seed,
            "length": length,
            "ds": ds,
        }),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = random_road(&mut rng, (0.01, 0.06), (30.0, 60.0), length);
    let path = build_path(profile, ds)
        .map_err(|e| CliError::Runtime(format!("building reference path: {e}")))?;
    let out = create_output(&dir, "path.csv")?;
    write_path_csv(&path, out).map_err(|e| io_err("writing path.csv", e))?;
    println!("wrote {}", dir.join("path.csv").display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_then_file_then_flags() {
        let file = FileConfig {
            t_sim: Some(5.0),
            n_stages: Some(40),
            ..Default::default()
        };
        let flags = ParamFlags {
            t_sim: Some(2.0),
            ..Default::default()
        };
        let p = resolve_params(&file, &flags).unwrap();
        assert_eq!(p.t_sim, 2.0); // flag beats file
        assert_eq!(p.n_stages, 40); // file beats default
        assert_eq!(p.max_qp_iter, RunParams::default().max_qp_iter);
    }

    #[test]
    fn invalid_params_are_config_errors() {
        let bad = ParamFlags {
            d_bar_0: Some(0.9),
            ..Default::default()
        };
        match resolve_params(&FileConfig::default(), &bad) {
            Err(CliError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn formulation_lists_default_to_all() {
        assert_eq!(parse_formulations(&[]).unwrap(), Formulation::ALL.to_vec());
        let named = parse_formulations(&["scalednorm".into(), "pnorm4".into()]).unwrap();
        assert_eq!(named, vec![Formulation::ScaledNorm, Formulation::PNorm4]);
        assert!(parse_formulations(&["nope".into()]).is_err());
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let err = serde_json::from_str::<FileConfig>(r#"{"t_sims": 4.0}"#);
        assert!(err.is_err());
    }

    #[test]
    fn filename_numbers_are_path_safe() {
        assert_eq!(fname_num(0.1), "0p1");
        assert_eq!(fname_num(20.0), "20");
        assert_eq!(fname_num(-1.5), "m1p5");
    }
}
