//! Versioned telemetry CSV: one row per control step, preceded by two
//! metadata comment lines (schema version; scenario name, target position
//! and abort flag). Replay rejects unknown schema versions.

use std::fs;
use std::path::Path;

use nalgebra::{DVector, Vector3};
use uvms::model::{ContactWrench, ControlInput, UvmsState};
use uvms::ocp::Mode;
use uvms::sim::TelemetryRecord;
use uvms::solver::SolveStatus;

pub const SCHEMA_VERSION: u32 = 1;

const N_LINKS: usize = 3;
const N_BODIES: usize = 4;

/// Everything a replay needs besides the rows themselves.
#[derive(Debug, Clone)]
pub struct LogMeta {
    pub name: String,
    pub target: Vector3<f64>,
    pub aborted: bool,
}

fn header() -> Vec<String> {
    let mut cols = vec!["time".to_string(), "mode".to_string()];
    let state_names = ["x", "y", "z", "roll", "pitch", "yaw"];
    cols.extend(state_names.iter().map(|n| n.to_string()));
    cols.extend((0..N_LINKS).map(|j| format!("q{j}")));
    let vel_names = ["vx", "vy", "vz", "wx", "wy", "wz"];
    cols.extend(vel_names.iter().map(|n| n.to_string()));
    cols.extend((0..N_LINKS).map(|j| format!("qd{j}")));
    let input_names = ["fx", "fy", "fz", "mx", "my", "mz"];
    cols.extend(input_names.iter().map(|n| format!("u_{n}")));
    cols.extend((0..N_LINKS).map(|j| format!("u_tau{j}")));
    cols.extend((0..N_BODIES).map(|j| format!("d{j}")));
    cols.extend((0..N_BODIES).map(|j| format!("dd{j}")));
    cols.extend(["fc_x", "fc_y", "fc_z"].iter().map(|n| n.to_string()));
    cols.extend(
        ["status", "iterations", "horizon", "dt_star", "feasible", "degraded"]
            .iter()
            .map(|n| n.to_string()),
    );
    cols
}

fn status_label(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Optimal => "optimal",
        SolveStatus::Infeasible => "infeasible",
        SolveStatus::IterationLimit => "iteration_limit",
    }
}

fn parse_status(s: &str) -> Result<SolveStatus, String> {
    match s {
        "optimal" => Ok(SolveStatus::Optimal),
        "infeasible" => Ok(SolveStatus::Infeasible),
        "iteration_limit" => Ok(SolveStatus::IterationLimit),
        other => Err(format!("unknown solver status '{other}'")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "I" => Ok(Mode::I),
        "II" => Ok(Mode::II),
        "III" => Ok(Mode::III),
        other => Err(format!("unknown mode '{other}'")),
    }
}

fn fmt(v: f64) -> String {
    // Shortest round-trip representation keeps the files diffable and the
    // replay summary bit-identical.
    format!("{v:?}")
}

pub fn write_telemetry(
    path: &Path,
    meta: &LogMeta,
    records: &[TelemetryRecord],
) -> Result<(), String> {
    let mut out = String::new();
    out.push_str(&format!("# uvms-telemetry v{SCHEMA_VERSION}\n"));
    out.push_str(&format!(
        "# scenario={} target={},{},{} aborted={}\n",
        meta.name,
        fmt(meta.target.x),
        fmt(meta.target.y),
        fmt(meta.target.z),
        meta.aborted as u8
    ));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header()).map_err(|e| e.to_string())?;
    for r in records {
        let mut row: Vec<String> = vec![fmt(r.time), r.mode.to_string()];
        let hv = r.state.to_vector();
        row.extend(hv.iter().map(|v| fmt(*v)));
        let uv = r.input.to_vector();
        row.extend(uv.iter().map(|v| fmt(*v)));
        row.extend(r.distances.iter().map(|v| fmt(*v)));
        row.extend(r.closing_speeds.iter().map(|v| fmt(*v)));
        row.extend(r.contact_wrench.force.iter().map(|v| fmt(*v)));
        row.push(status_label(r.solver_status).to_string());
        row.push(r.solver_iterations.to_string());
        row.push(r.horizon.to_string());
        row.push(fmt(r.dt_star));
        row.push(match r.feasible {
            None => String::new(),
            Some(f) => (f as u8).to_string(),
        });
        row.push((r.degraded as u8).to_string());
        w.write_record(&row).map_err(|e| e.to_string())?;
    }
    let body = w.into_inner().map_err(|e| e.to_string())?;
    out.push_str(&String::from_utf8(body).map_err(|e| e.to_string())?);
    fs::write(path, out).map_err(|e| e.to_string())
}

pub fn read_telemetry(path: &Path) -> Result<(LogMeta, Vec<TelemetryRecord>), String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let version_line = lines.next().ok_or("empty telemetry file")?;
    let version = version_line
        .strip_prefix("# uvms-telemetry v")
        .ok_or("missing telemetry version line")?
        .trim()
        .parse::<u32>()
        .map_err(|_| "malformed telemetry version".to_string())?;
    if version != SCHEMA_VERSION {
        return Err(format!(
            "unsupported telemetry schema v{version} (expected v{SCHEMA_VERSION})"
        ));
    }
    let meta_line = lines.next().ok_or("missing telemetry metadata line")?;
    let meta = parse_meta(meta_line)?;

    let body: String = lines.collect::<Vec<_>>().join("\n");
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let expected = header();
    let got: Vec<String> =
        reader.headers().map_err(|e| e.to_string())?.iter().map(|s| s.to_string()).collect();
    if got != expected {
        return Err("telemetry column schema mismatch".into());
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        if row.len() != expected.len() {
            return Err(format!("telemetry row has {} fields, expected {}", row.len(), expected.len()));
        }
        records.push(parse_row(&row)?);
    }
    if records.is_empty() {
        return Err("telemetry file contains no records".into());
    }
    Ok((meta, records))
}

fn parse_meta(line: &str) -> Result<LogMeta, String> {
    let rest = line.strip_prefix("# ").ok_or("malformed metadata line")?;
    let mut name = None;
    let mut target = None;
    let mut aborted = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("scenario=") {
            name = Some(v.to_string());
        } else if let Some(v) = part.strip_prefix("target=") {
            let comps: Vec<f64> =
                v.split(',').map(|c| c.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| {
                    "malformed target in metadata".to_string()
                })?;
            if comps.len() != 3 {
                return Err("target in metadata must have 3 components".into());
            }
            target = Some(Vector3::new(comps[0], comps[1], comps[2]));
        } else if let Some(v) = part.strip_prefix("aborted=") {
            aborted = Some(v == "1");
        }
    }
    Ok(LogMeta {
        name: name.ok_or("metadata missing scenario name")?,
        target: target.ok_or("metadata missing target")?,
        aborted: aborted.ok_or("metadata missing aborted flag")?,
    })
}

fn parse_row(row: &csv::StringRecord) -> Result<TelemetryRecord, String> {
    let num = |i: usize| -> Result<f64, String> {
        row[i].parse::<f64>().map_err(|_| format!("bad number in column {i}"))
    };
    let n_x = 2 * (6 + N_LINKS);
    let n_u = 6 + N_LINKS;
    let mut c = 0;
    let time = num(c)?;
    c += 1;
    let mode = parse_mode(&row[c])?;
    c += 1;
    let hv = DVector::from_iterator(n_x, (c..c + n_x).map(num).collect::<Result<Vec<_>, _>>()?);
    c += n_x;
    let uv = DVector::from_iterator(n_u, (c..c + n_u).map(num).collect::<Result<Vec<_>, _>>()?);
    c += n_u;
    let distances = (c..c + N_BODIES).map(num).collect::<Result<Vec<_>, _>>()?;
    c += N_BODIES;
    let closing_speeds = (c..c + N_BODIES).map(num).collect::<Result<Vec<_>, _>>()?;
    c += N_BODIES;
    let force = Vector3::new(num(c)?, num(c + 1)?, num(c + 2)?);
    c += 3;
    let solver_status = parse_status(&row[c])?;
    c += 1;
    let solver_iterations =
        row[c].parse::<usize>().map_err(|_| "bad iteration count".to_string())?;
    c += 1;
    let horizon = row[c].parse::<usize>().map_err(|_| "bad horizon".to_string())?;
    c += 1;
    let dt_star = num(c)?;
    c += 1;
    let feasible = match &row[c] {
        "" => None,
        "0" => Some(false),
        "1" => Some(true),
        other => return Err(format!("bad feasible flag '{other}'")),
    };
    c += 1;
    let degraded = match &row[c] {
        "0" => false,
        "1" => true,
        other => return Err(format!("bad degraded flag '{other}'")),
    };

    Ok(TelemetryRecord {
        time,
        mode,
        state: UvmsState::from_vector(N_LINKS, &hv),
        input: ControlInput::from_vector(N_LINKS, &uv),
        distances,
        closing_speeds,
        contact_wrench: ContactWrench::from_force(force),
        solver_status,
        solver_iterations,
        horizon,
        dt_star,
        feasible,
        degraded,
    })
}
