use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schemes::Scheme;

use super::sweep::SweepResult;

pub const CSV_HEADER: &str = "sweep_param,sweep_value,scheme,mean_mse,std_err,trials,failures";

/// Ten significant digits in scientific notation.
fn sci(x: f64) -> String {
    format!("{x:.9e}")
}

pub fn csv_string(result: &SweepResult) -> String {
    let mut rows: Vec<_> = result.rows.iter().collect();
    rows.sort_by(|a, b| a.sweep_value.total_cmp(&b.sweep_value).then(a.scheme.id().cmp(b.scheme.id())));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            result.param.id(),
            sci(r.sweep_value),
            r.scheme.id(),
            sci(r.mean_mse),
            sci(r.std_err),
            r.trials,
            r.failures
        );
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn emit_csv(result: &SweepResult, path: &Path) -> Result<()> {
    write(path, &csv_string(result))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 60.0;

fn color(s: Scheme) -> &'static str {
    match s {
        Scheme::Proposed => "#1f77b4",
        Scheme::Isotropic => "#2ca02c",
        Scheme::TimeDivision => "#d62728",
    }
}

fn label(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e6 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

/// SVG line plot with a log-scale MSE axis, one series per scheme.
pub fn svg_string(result: &SweepResult) -> Result<String> {
    let points: Vec<_> = result.rows.iter().filter(|r| r.mean_mse > 0.0 && r.mean_mse.is_finite()).collect();
    if points.is_empty() {
        return Err(Error::InvalidParameter("sweep result has no finite MSE to plot".into()));
    }
    let xs = result.sweep_values();
    let (mut x0, mut x1) = (xs[0], xs[xs.len() - 1]);
    if x0 == x1 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    let logs: Vec<f64> = points.iter().map(|r| r.mean_mse.log10()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min).floor();
    let mut hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (hi - y.log10()) / (hi - lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let mut decade = lo as i32;
    while decade as f64 <= hi {
        let y = py(10f64.powi(decade));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{decade}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
        decade += 1;
    }
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(x),
            TOP + ph + 18.0,
            label(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        result.param.id()
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">MSE</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );

    for (i, scheme) in result.schemes().into_iter().enumerate() {
        let mut series: Vec<(f64, f64)> = points
            .iter()
            .filter(|r| r.scheme == scheme)
            .map(|r| (px(r.sweep_value), py(r.mean_mse)))
            .collect();
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        let c = color(scheme);
        if series.len() > 1 {
            let path: Vec<String> = series.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                path.join(" ")
            );
        }
        for (x, y) in &series {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3.5" fill="{c}"/>"#);
        }
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = LEFT + pw - 130.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/>"#,
            lx + 24.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 30.0, ly + 4.0, scheme.id());
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the plot. Mean orderings that contradict proposed <= isotropic <=
/// time division are logged as warnings.
pub fn emit_plot(result: &SweepResult, path: &Path) -> Result<()> {
    for v in result.ordering_violations(&Scheme::ALL) {
        log::warn!("{v}");
    }
    write(path, &svg_string(result)?)
}
