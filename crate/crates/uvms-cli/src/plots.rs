//! Static SVG telemetry plots: hand-rolled line charts (no plotting
//! dependency) for states, control forces, and plane distances with
//! controller-mode bands.

use uvms::ocp::Mode;
use uvms::sim::TelemetryRecord;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 9] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2",
    "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct ModeBand {
    start: f64,
    end: f64,
    mode: Mode,
}

fn mode_bands(records: &[TelemetryRecord], dt: f64) -> Vec<ModeBand> {
    let mut bands: Vec<ModeBand> = Vec::new();
    for r in records {
        match bands.last_mut() {
            Some(b) if b.mode == r.mode => b.end = r.time + dt,
            _ => bands.push(ModeBand { start: r.time, end: r.time + dt, mode: r.mode }),
        }
    }
    bands
}

fn band_color(mode: Mode) -> &'static str {
    match mode {
        Mode::I => "#ffffff",
        Mode::II => "#fff3cd",
        Mode::III => "#f8d7da",
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(mag * 10.0);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-12 {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render one chart. Mode bands, when given, are drawn behind the curves.
fn chart(title: &str, y_label: &str, series: &[Series], bands: &[ModeBand]) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x_lo, x_hi) = bounds(&xs, 0.0);
    let (y_lo, y_hi) = bounds(&ys, 0.05);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo).max(1e-12) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - y_lo) / (y_hi - y_lo).max(1e-12) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    for b in bands {
        if b.mode == Mode::I {
            continue;
        }
        let x0 = sx(b.start.max(x_lo));
        let x1 = sx(b.end.min(x_hi));
        svg.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{ph}\" fill=\"{}\"/>\n",
            (x1 - x0).max(0.0),
            band_color(b.mode)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"#888\">{}</text>\n",
            (x0 + x1) / 2.0,
            MARGIN_T + 14.0,
            b.mode
        ));
    }

    for t in nice_ticks(y_lo, y_hi) {
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L + pw,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(x_lo, x_hi) {
        let x = sx(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MARGIN_T}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#eee\"/>\n\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN_T + ph,
            MARGIN_T + ph + 18.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" \
         stroke=\"#333\"/>\n"
    ));

    for (k, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * k as f64 + 10.0;
        let lx = MARGIN_L + pw + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{:.1}\">{}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            s.name
        ));
    }

    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        MARGIN_L + pw / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">time [s]</text>\n",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {:.1})\">{y_label}</text>\n",
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0
    ));
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64], pad_frac: f64) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = (hi - lo).max(1e-9) * pad_frac;
    (lo - pad, hi + pad)
}

fn extract(records: &[TelemetryRecord], f: impl Fn(&TelemetryRecord) -> f64) -> Vec<(f64, f64)> {
    records.iter().map(|r| (r.time, f(r))).collect()
}

pub fn states_plot(records: &[TelemetryRecord]) -> String {
    let dt = step(records);
    let names = ["x", "y", "z", "roll", "pitch", "yaw"];
    let mut series: Vec<Series> = (0..6)
        .map(|i| Series {
            name: format!("{} [m|rad]", names[i]),
            points: extract(records, |r| r.state.to_vector()[i]),
        })
        .collect();
    let n_links = records[0].state.joint_angles.len();
    for j in 0..n_links {
        series.push(Series {
            name: format!("q{j} [rad]"),
            points: extract(records, |r| r.state.joint_angles[j]),
        });
    }
    chart("UVMS states", "pose / joint angle", &series, &mode_bands(records, dt))
}

pub fn controls_plot(records: &[TelemetryRecord]) -> String {
    let dt = step(records);
    let names = ["fx [N]", "fy [N]", "fz [N]", "mx [Nm]", "my [Nm]", "mz [Nm]"];
    let mut series: Vec<Series> = (0..6)
        .map(|i| Series {
            name: names[i].to_string(),
            points: extract(records, |r| r.input.vehicle_wrench[i]),
        })
        .collect();
    let n_links = records[0].input.joint_torques.len();
    for j in 0..n_links {
        series.push(Series {
            name: format!("tau{j} [Nm]"),
            points: extract(records, |r| r.input.joint_torques[j]),
        });
    }
    chart("UVMS control inputs", "force / torque", &series, &mode_bands(records, dt))
}

pub fn distances_plot(records: &[TelemetryRecord]) -> String {
    let dt = step(records);
    let n_bodies = records[0].distances.len();
    let mut series: Vec<Series> = (0..n_bodies)
        .map(|j| Series {
            name: if j == 0 { "hull d0 [m]".into() } else { format!("link d{j} [m]") },
            points: extract(records, |r| r.distances[j]),
        })
        .collect();
    series.push(Series {
        name: "hull rate [m/s]".into(),
        points: extract(records, |r| r.closing_speeds[0]),
    });
    series.push(Series {
        name: "contact F_n/100 [N]".into(),
        points: extract(records, |r| r.contact_wrench.force.x / 100.0),
    });
    chart(
        "Plane distances and contact",
        "distance / rate",
        &series,
        &mode_bands(records, dt),
    )
}

fn step(records: &[TelemetryRecord]) -> f64 {
    if records.len() >= 2 {
        records[1].time - records[0].time
    } else {
        0.1
    }
}
