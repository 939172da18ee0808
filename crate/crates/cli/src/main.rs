//! Command-line front end for the diffusion adaptation harness. Each
//! subcommand reads one JSON experiment config, never modifies it, writes its
//! artifacts under the configured output directory, and prints a fixed-width
//! summary to standard output. Machine-readable results go to the CSV and
//! JSON files only, so stdout stays stable for humans.
//!
//! Exit codes: 0 on success, 1 for configuration errors (unreadable or
//! invalid config, bad flags), 2 for runtime failures such as every trial of
//! a strategy diverging.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use diffnet::graph::CombinationMatrices;
use diffnet::harness::output::{
    overlay_rows, write_curves, write_metadata, write_node_curves, write_overlay, write_steady,
    write_sweep, write_theory_csv, write_theory_json, write_track,
};
use diffnet::harness::{
    reference_vector, run_experiment, sweep, tracking_experiment, Experiment, ExperimentConfig,
    HarnessError, SweepParam, TheoryOverlayRow,
};
use diffnet::strategies::Strategy;
use diffnet::theory;

#[derive(Parser)]
#[command(
    name = "diffnet",
    version,
    about = "Diffusion adaptation over networks: simulation, steady-state analysis, tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Report resolved parameters and written files on standard error.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte Carlo experiment and write learning curves.
    Run(CommonArgs),
    /// Re-run the experiment for each value of one parameter.
    Sweep(SweepArgs),
    /// Evaluate the closed-form steady-state analysis without simulating.
    Theory(CommonArgs),
    /// Run the moving-target experiment and record node trajectories.
    Track(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment config (JSON).
    config: PathBuf,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Parameter to vary: mu, rho, or epsilon.
    #[arg(long)]
    param: String,
    /// Comma-separated parameter values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed; real
            // usage errors are config errors in the exit-code contract.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let verbose = cli.verbose > 0;
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args, verbose),
        Command::Sweep(args) => cmd_sweep(args, verbose),
        Command::Theory(args) => cmd_theory(args, verbose),
        Command::Track(args) => cmd_track(args, verbose),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Parse the config and apply command-line overrides; the file on disk is
/// never written back.
fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        config.run.seed = Some(seed);
    }
    if let Some(trials) = args.trials {
        config.run.trials = Some(trials);
    }
    if let Some(dir) = &args.out_dir {
        config.output.dir = Some(dir.clone());
    }
    Ok(config)
}

fn resolve(args: &CommonArgs, verbose: bool) -> Result<Experiment, HarnessError> {
    let exp = load_config(args)?.resolve()?;
    if verbose {
        eprintln!(
            "resolved: {} nodes, dim {}, horizon {}, trials {}, seed {}",
            exp.network.n_nodes(),
            exp.w_true.len(),
            exp.horizon,
            exp.trials,
            exp.seed
        );
    }
    fs::create_dir_all(&exp.out_dir).map_err(|source| HarnessError::Write {
        path: exp.out_dir.display().to_string(),
        source,
    })?;
    Ok(exp)
}

fn artifact(exp: &Experiment, suffix: &str) -> PathBuf {
    exp.out_dir.join(format!("{}_{suffix}", exp.prefix))
}

fn note_written(path: &Path, verbose: bool) {
    if verbose {
        eprintln!("wrote {}", path.display());
    }
}

fn cmd_run(args: &CommonArgs, verbose: bool) -> Result<ExitCode, HarnessError> {
    let exp = resolve(args, verbose)?;
    let result = run_experiment(&exp)?;

    let curves = artifact(&exp, "curves.csv");
    write_curves(&curves, &result.curves)?;
    note_written(&curves, verbose);
    if exp.per_node {
        let nodes = artifact(&exp, "nodes.csv");
        write_node_curves(&nodes, &result.curves)?;
        note_written(&nodes, verbose);
    }
    let steady = artifact(&exp, "steady.csv");
    write_steady(&steady, &result.steady)?;
    note_written(&steady, verbose);
    if exp.theory {
        let overlay = artifact(&exp, "overlay.csv");
        write_overlay(&overlay, &overlay_rows(&result.theory))?;
        note_written(&overlay, verbose);
    }
    let metadata = artifact(&exp, "metadata.json");
    write_metadata(&metadata, &result.metadata)?;
    note_written(&metadata, verbose);

    let mut rows = Vec::new();
    for estimate in &result.steady {
        let theory_row = result
            .theory
            .iter()
            .find(|t| t.strategy == estimate.strategy);
        rows.push(vec![
            estimate.strategy.clone(),
            format!("{:.2}", estimate.msd_db),
            theory_row
                .and_then(|t| t.network_msd_db)
                .map_or_else(|| "-".into(), |db| format!("{db:.2}")),
            theory_row.map_or("-", overlay_verdict).to_string(),
        ]);
    }
    print_table(
        &["strategy", "msd (dB)", "theory (dB)", "verdict"],
        &rows,
    );
    for count in &result.metadata.divergence {
        if count.count > 0 {
            println!(
                "{}: {} of {} trials diverged",
                count.strategy, count.count, exp.trials
            );
        }
    }
    for note in &result.metadata.notes {
        println!("note: {note}");
    }
    println!("artifacts in {}", exp.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn overlay_verdict(row: &TheoryOverlayRow) -> &'static str {
    if row.network_msd_db.is_some() {
        if row.non_convex_caveat {
            "stable (local)"
        } else {
            "stable"
        }
    } else if row.note.as_deref().is_some_and(|n| n.contains("unstable")) {
        "unstable"
    } else {
        "-"
    }
}

fn cmd_sweep(args: &SweepArgs, verbose: bool) -> Result<ExitCode, HarnessError> {
    let param = SweepParam::parse(&args.param)?;
    let config = load_config(&args.common)?;
    let out_dir = PathBuf::from(config.output.dir.as_deref().unwrap_or("out"));
    let prefix = config.output.prefix.as_deref().unwrap_or("experiment");
    fs::create_dir_all(&out_dir).map_err(|source| HarnessError::Write {
        path: out_dir.display().to_string(),
        source,
    })?;

    let result = sweep(&config, param, &args.values)?;
    for failure in &result.failures {
        eprintln!(
            "sweep {} = {}: {}",
            param.name(),
            failure.value,
            failure.message
        );
    }

    let csv = out_dir.join(format!("{prefix}_sweep.csv"));
    write_sweep(&csv, &result.rows)?;
    note_written(&csv, verbose);
    let sidecar = out_dir.join(format!("{prefix}_sweep_metadata.json"));
    write_sidecar(
        &sidecar,
        &serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "param": param.name(),
            "values": args.values,
            "seed": config.run.seed,
            "trials": config.run.trials,
            "failures": result.failures,
        }),
    )?;
    note_written(&sidecar, verbose);

    let rows: Vec<Vec<String>> = result
        .rows
        .iter()
        .map(|r| {
            vec![
                r.param.clone(),
                format!("{}", r.value),
                r.strategy.clone(),
                format!("{:.2}", r.msd_db),
                r.theory_msd_db
                    .map_or_else(|| "-".into(), |db| format!("{db:.2}")),
            ]
        })
        .collect();
    print_table(
        &["param", "value", "strategy", "msd (dB)", "theory (dB)"],
        &rows,
    );
    println!("artifacts in {}", out_dir.display());

    if result.rows.is_empty() {
        eprintln!("error: no sweep value produced a result");
        let config_fault = result.failures.iter().any(|f| f.config);
        return Ok(ExitCode::from(if config_fault { 1 } else { 2 }));
    }
    Ok(ExitCode::SUCCESS)
}

fn write_sidecar(path: &Path, value: &serde_json::Value) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("json value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| HarnessError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn cmd_theory(args: &CommonArgs, verbose: bool) -> Result<ExitCode, HarnessError> {
    let exp = resolve(args, verbose)?;
    if exp.trajectory.is_some() {
        return Err(HarnessError::Invalid(
            "the config has a target trajectory; steady-state analysis needs a static target"
                .into(),
        ));
    }
    let diffusion: Vec<(&str, &CombinationMatrices)> = exp
        .strategies
        .iter()
        .filter_map(|named| match &named.strategy {
            Strategy::Diffusion(cm) => Some((named.name.as_str(), cm)),
            _ => None,
        })
        .collect();
    if diffusion.is_empty() {
        return Err(HarnessError::Invalid(
            "steady-state analysis needs a diffusion strategy (atc, cta, or noncoop)".into(),
        ));
    }

    let w_opt = reference_vector(&exp)?;
    let mut rows = Vec::new();
    for (name, cm) in diffusion {
        let report = theory::report(cm, &exp.costs, &w_opt);
        let json = artifact(&exp, &format!("theory_{name}.json"));
        write_theory_json(&json, &report)?;
        note_written(&json, verbose);
        let csv = artifact(&exp, &format!("theory_{name}.csv"));
        write_theory_csv(&csv, &report)?;
        note_written(&csv, verbose);

        rows.push(vec![
            name.to_string(),
            report
                .b_rho
                .map_or_else(|| "-".into(), |rho| format!("{rho:.4}")),
            if report.mean_dynamics_stable {
                "stable".to_string()
            } else {
                "unstable".to_string()
            },
            report
                .steady_state
                .as_ref()
                .map_or_else(|| "-".into(), |s| {
                    format!("{:.2}", diffnet::harness::to_db(s.network))
                }),
        ]);
        if let Some(e) = &report.steady_state_error {
            println!("note: {name}: {e}");
        }
    }
    print_table(&["strategy", "rho(B)", "mean dynamics", "msd (dB)"], &rows);
    println!("artifacts in {}", exp.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_track(args: &CommonArgs, verbose: bool) -> Result<ExitCode, HarnessError> {
    let exp = resolve(args, verbose)?;
    let result = tracking_experiment(&exp)?;

    let curves = artifact(&exp, "curves.csv");
    write_curves(&curves, &result.curves)?;
    note_written(&curves, verbose);
    if exp.per_node {
        let nodes = artifact(&exp, "nodes.csv");
        write_node_curves(&nodes, &result.curves)?;
        note_written(&nodes, verbose);
    }
    let steady = artifact(&exp, "steady.csv");
    write_steady(&steady, &result.steady)?;
    note_written(&steady, verbose);
    let paths = artifact(&exp, "paths.csv");
    write_track(&paths, &result)?;
    note_written(&paths, verbose);
    let metadata = artifact(&exp, "metadata.json");
    write_metadata(&metadata, &result.metadata)?;
    note_written(&metadata, verbose);

    let rows: Vec<Vec<String>> = result
        .steady
        .iter()
        .map(|e| {
            vec![
                e.strategy.clone(),
                format!("{:.2}", e.msd_db),
                format!("{}", e.diverged),
            ]
        })
        .collect();
    print_table(&["strategy", "tail msd (dB)", "diverged"], &rows);
    for note in &result.metadata.notes {
        println!("note: {note}");
    }
    println!("artifacts in {}", exp.out_dir.display());
    Ok(ExitCode::SUCCESS)
}

/// Two-space separated columns, first column left-aligned, the rest right
/// aligned; widths fit the longest cell so the table is stable for a given
/// result.
fn print_table(headers: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (width, cell) in widths.iter_mut().zip(row) {
            *width = (*width).max(cell.len());
        }
    }
    let render = |cells: &[String]| {
        let mut line = String::new();
        for (i, (cell, width)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i == 0 {
                line.push_str(&format!("{cell:<width$}"));
            } else {
                line.push_str(&format!("{cell:>width$}"));
            }
        }
        println!("{}", line.trim_end());
    };
    let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    render(&header_cells);
    for row in rows {
        render(row);
    }
}
