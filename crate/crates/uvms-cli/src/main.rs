//! Command-line front end: validate scenario files, run closed-loop
//! simulations (single or batch), and regenerate plots/summaries from
//! existing telemetry.
//!
//! Exit codes: 0 success, 1 simulation abort, 2 config/usage error.

mod plots;
mod telemetry;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde_json::json;

use telemetry::LogMeta;
use uvms::config::ScenarioConfig;
use uvms::sim::{run_scenario, summarize, RunOutput, RunSummary, Scenario};

#[derive(Parser)]
#[command(name = "uvms", version, about = "Switching-NMPC UVMS scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario (or a batch) and write telemetry artifacts.
    Run {
        /// Scenario TOML file.
        #[arg(long, conflicts_with = "batch")]
        scenario: Option<PathBuf>,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Also write SVG plots.
        #[arg(long)]
        plots: bool,
        /// Glob of scenario files; each runs into its own subdirectory.
        #[arg(long)]
        batch: Option<String>,
        /// Recorded in the summary; the simulation itself is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a scenario file without simulating.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Regenerate summary and plots from an existing telemetry CSV.
    Replay {
        #[arg(long)]
        telemetry: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { scenario, out, plots, batch, seed } => cmd_run(scenario, out, plots, batch, seed),
        Command::Validate { scenario } => cmd_validate(&scenario),
        Command::Replay { telemetry, out } => cmd_replay(&telemetry, &out),
    };
    ExitCode::from(code)
}

/// Print a machine-readable error and return the exit code.
fn fail(code: u8, kind: &str, message: impl std::fmt::Display) -> u8 {
    eprintln!("{}", json!({ "error": kind, "message": message.to_string() }));
    code
}

fn load_scenario(path: &Path) -> Result<Scenario, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg = ScenarioConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    cfg.build().map_err(|e| e.to_string())
}

fn cmd_validate(path: &Path) -> u8 {
    match load_scenario(path) {
        Ok(s) => {
            println!("{}", json!({ "ok": true, "scenario": s.name }));
            0
        }
        Err(e) => fail(2, "config", e),
    }
}

fn cmd_run(
    scenario: Option<PathBuf>,
    out: PathBuf,
    plots: bool,
    batch: Option<String>,
    seed: u64,
) -> u8 {
    let paths: Vec<PathBuf> = if let Some(pattern) = batch {
        match glob::glob(&pattern) {
            Ok(matches) => match matches.collect::<Result<Vec<_>, _>>() {
                Ok(p) if !p.is_empty() => p,
                Ok(_) => return fail(2, "config", "batch glob matched no files"),
                Err(e) => return fail(2, "config", e),
            },
            Err(e) => return fail(2, "config", e),
        }
    } else if let Some(path) = scenario {
        vec![path]
    } else {
        return fail(2, "config", "either --scenario or --batch is required");
    };

    // Fail fast on any invalid file before simulating.
    let mut scenarios = Vec::new();
    for path in &paths {
        match load_scenario(path) {
            Ok(s) => scenarios.push(s),
            Err(e) => return fail(2, "config", e),
        }
    }

    if let Err(e) = fs::create_dir_all(&out) {
        return fail(2, "config", format!("{}: {e}", out.display()));
    }

    let single = scenarios.len() == 1;
    let results: Vec<Result<RunSummary, String>> = scenarios
        .into_par_iter()
        .map(|s| {
            let dir = if single { out.clone() } else { out.join(&s.name) };
            run_one(&s, &dir, plots)
        })
        .collect();

    let mut summaries = Vec::new();
    let mut aborted = false;
    for r in results {
        match r {
            Ok(summary) => {
                aborted |= summary.aborted;
                summaries.push(summary);
            }
            Err(e) => return fail(1, "run", e),
        }
    }

    if !single {
        let aggregate = json!({ "seed": seed, "runs": summaries });
        if let Err(e) = fs::write(
            out.join("summary.json"),
            serde_json::to_string_pretty(&aggregate).expect("summary serialization"),
        ) {
            return fail(1, "run", e);
        }
    }
    if aborted {
        return fail(1, "run", "one or more scenarios aborted (partial telemetry kept)");
    }
    0
}

fn run_one(scenario: &Scenario, dir: &Path, plots: bool) -> Result<RunSummary, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let RunOutput { records, summary } =
        run_scenario(scenario).map_err(|e| e.to_string())?;
    let meta = LogMeta {
        name: scenario.name.clone(),
        target: Vector3::new(
            scenario.reference[0],
            scenario.reference[1],
            scenario.reference[2],
        ),
        aborted: summary.aborted,
    };
    telemetry::write_telemetry(&dir.join("telemetry.csv"), &meta, &records)?;
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialization"),
    )
    .map_err(|e| e.to_string())?;
    if plots && !records.is_empty() {
        write_plots(dir, &records)?;
    }
    println!(
        "{}",
        json!({
            "scenario": summary.name,
            "steps": summary.steps,
            "modes": summary.mode_sequence,
            "final_task_error": summary.final_task_error,
            "aborted": summary.aborted,
        })
    );
    Ok(summary)
}

fn write_plots(dir: &Path, records: &[uvms::sim::TelemetryRecord]) -> Result<(), String> {
    fs::write(dir.join("states.svg"), plots::states_plot(records)).map_err(|e| e.to_string())?;
    fs::write(dir.join("controls.svg"), plots::controls_plot(records))
        .map_err(|e| e.to_string())?;
    fs::write(dir.join("distances.svg"), plots::distances_plot(records))
        .map_err(|e| e.to_string())?;
    Ok(())
}

fn cmd_replay(telemetry_path: &Path, out: &Path) -> u8 {
    let (meta, records) = match telemetry::read_telemetry(telemetry_path) {
        Ok(pair) => pair,
        Err(e) => return fail(2, "config", e),
    };
    if let Err(e) = fs::create_dir_all(out) {
        return fail(2, "config", format!("{}: {e}", out.display()));
    }
    let summary = summarize(&meta.name, &meta.target, &records, meta.aborted);
    if let Err(e) = fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialization"),
    ) {
        return fail(2, "config", e);
    }
    if let Err(e) = write_plots(out, &records) {
        return fail(2, "config", e);
    }
    println!(
        "{}",
        json!({ "scenario": summary.name, "steps": summary.steps, "replayed": true })
    );
    0
}

#[cfg(test)]
mod tests {
    use super::*;
    use uvms::model::{ContactWrench, ControlInput, UvmsState};
    use uvms::ocp::Mode;
    use uvms::sim::TelemetryRecord;
    use uvms::solver::SolveStatus;

    fn sample_records(n: usize) -> Vec<TelemetryRecord> {
        (0..n)
            .map(|k| {
                let mut state = UvmsState::zero(3);
                state.position.x = 0.05 * k as f64;
                state.linear_velocity.x = 0.1 + 1e-13 * k as f64;
                let mut input = ControlInput::zero(3);
                input.vehicle_wrench[0] = (k as f64).sin() * 7.0;
                input.joint_torques[1] = -0.25;
                TelemetryRecord {
                    time: 0.1 * k as f64,
                    mode: if k < 3 { Mode::I } else { Mode::II },
                    state,
                    input,
                    distances: vec![2.0 - 0.1 * k as f64, 1.8, 1.7, 1.6],
                    closing_speeds: vec![-0.1, 0.0, 0.05, 0.025],
                    contact_wrench: ContactWrench::from_force(Vector3::new(
                        k as f64, 0.1, -0.2,
                    )),
                    solver_status: SolveStatus::Optimal,
                    solver_iterations: 12,
                    horizon: 8,
                    dt_star: 0.1,
                    feasible: if k == 0 { Some(true) } else { None },
                    degraded: false,
                }
            })
            .collect()
    }

    #[test]
    fn telemetry_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.csv");
        let records = sample_records(6);
        let meta = LogMeta { name: "rt".into(), target: Vector3::new(1.0, 2.0, 3.0), aborted: false };
        telemetry::write_telemetry(&path, &meta, &records).unwrap();
        let (meta2, records2) = telemetry::read_telemetry(&path).unwrap();
        assert_eq!(meta2.name, "rt");
        assert_eq!(meta2.target, meta.target);
        assert!(!meta2.aborted);
        assert_eq!(records2.len(), records.len());
        for (a, b) in records.iter().zip(&records2) {
            assert_eq!(a.time, b.time);
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.state.to_vector(), b.state.to_vector());
            assert_eq!(a.input.to_vector(), b.input.to_vector());
            assert_eq!(a.distances, b.distances);
            assert_eq!(a.contact_wrench.force, b.contact_wrench.force);
            assert_eq!(a.solver_status, b.solver_status);
            assert_eq!(a.feasible, b.feasible);
        }
        // Summaries from original and round-tripped logs agree exactly.
        let s1 = summarize("rt", &meta.target, &records, false);
        let s2 = summarize("rt", &meta2.target, &records2, meta2.aborted);
        assert_eq!(
            serde_json::to_string(&s1).unwrap(),
            serde_json::to_string(&s2).unwrap()
        );
    }

    #[test]
    fn replay_rejects_unknown_schema_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.csv");
        let records = sample_records(4);
        let meta = LogMeta { name: "rt".into(), target: Vector3::zeros(), aborted: false };
        telemetry::write_telemetry(&path, &meta, &records).unwrap();

        let text = fs::read_to_string(&path).unwrap();

        // Unknown schema version is rejected.
        let bumped = text.replacen("# uvms-telemetry v1", "# uvms-telemetry v99", 1);
        let bad = dir.path().join("bumped.csv");
        fs::write(&bad, bumped).unwrap();
        let err = telemetry::read_telemetry(&bad).unwrap_err();
        assert!(err.contains("unsupported telemetry schema"), "got: {err}");

        // A truncated row is rejected.
        let mut lines: Vec<&str> = text.lines().collect();
        let last = lines.pop().unwrap();
        let cut = &last[..last.len() / 2];
        let truncated = format!("{}\n{cut}", lines.join("\n"));
        let bad = dir.path().join("truncated.csv");
        fs::write(&bad, truncated).unwrap();
        assert!(telemetry::read_telemetry(&bad).is_err());

        // An empty log is rejected.
        let header_only: Vec<&str> = text.lines().take(3).collect();
        let bad = dir.path().join("empty.csv");
        fs::write(&bad, header_only.join("\n")).unwrap();
        let err = telemetry::read_telemetry(&bad).unwrap_err();
        assert!(err.contains("no records"), "got: {err}");
    }

    #[test]
    fn plots_emit_valid_svg_shells() {
        let records = sample_records(8);
        for svg in [
            plots::states_plot(&records),
            plots::controls_plot(&records),
            plots::distances_plot(&records),
        ] {
            assert!(svg.starts_with("<svg"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains("polyline"));
        }
        // Mode II band appears.
        assert!(plots::states_plot(&records).contains("#fff3cd"));
    }
}
