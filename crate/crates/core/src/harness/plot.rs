//! Learning-curve plots as standalone SVG 1.1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::trainer::MetricsTable;

use super::run::{RunRecord, METRICS_FILE};
use super::HarnessError;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One learning curve: mean across seeds, with the across-seed standard
/// deviation when there is more than one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub steps: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Option<Vec<f64>>,
}

/// Every directory under `root` (including `root`) holding a metrics CSV.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(METRICS_FILE).is_file() {
            found.push(dir.clone());
        }
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Replaces non-finite values with the previous finite one (the first
/// finite one for a leading gap). `None` if nothing is finite.
fn fill_gaps(xs: &[f64]) -> Option<Vec<f64>> {
    let first = xs.iter().copied().find(|x| x.is_finite())?;
    let mut last = first;
    Some(
        xs.iter()
            .map(|&x| {
                if x.is_finite() {
                    last = x;
                }
                last
            })
            .collect(),
    )
}

/// Groups runs by variant (and agent count when several are present) and
/// averages their return curves row by row.
pub fn load_curves(root: &Path) -> Result<Vec<Curve>, HarnessError> {
    let dirs = find_runs(root)?;
    if dirs.is_empty() {
        return Err(HarnessError::Config(format!("no runs found under {}", root.display())));
    }
    let mut runs = Vec::new();
    for dir in &dirs {
        let text = fs::read_to_string(dir.join(METRICS_FILE))?;
        let table = MetricsTable::parse(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?;
        let record = RunRecord::load(dir).ok();
        let label = record.as_ref().map(|r| r.variant.label().to_string()).unwrap_or_else(|| {
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
        });
        let n_agents = record.map(|r| r.n_agents);
        let (Some(steps), Some(returns)) = (table.column("env_steps"), table.column("mean_return")) else {
            return Err(HarnessError::Config(format!("{}: missing columns", dir.display())));
        };
        if let Some(returns) = fill_gaps(&returns) {
            runs.push((label, n_agents, steps, returns));
        }
    }
    let mut agent_counts: Vec<Option<usize>> = runs.iter().map(|r| r.1).collect();
    agent_counts.sort();
    agent_counts.dedup();
    let mut groups: Vec<(String, Vec<(Vec<f64>, Vec<f64>)>)> = Vec::new();
    for (label, n, steps, returns) in runs {
        let key = match (agent_counts.len() > 1, n) {
            (true, Some(n)) => format!("{label} N={n}"),
            _ => label,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push((steps, returns)),
            None => groups.push((key, vec![(steps, returns)])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(label, members)| {
            let len = members.iter().map(|(s, _)| s.len()).min().unwrap_or(0);
            let k = members.len() as f64;
            let steps = members[0].0[..len].to_vec();
            let mean: Vec<f64> = (0..len).map(|i| members.iter().map(|m| m.1[i]).sum::<f64>() / k).collect();
            let std = (members.len() > 1).then(|| {
                (0..len)
                    .map(|i| {
                        let var = members.iter().map(|m| (m.1[i] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0);
                        var.sqrt()
                    })
                    .collect()
            });
            Curve { label, steps, mean, std }
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|i| lo + (hi - lo) * i as f64 / count as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{:.0}k", v / 1000.0)
    } else if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

/// Renders `curves` as mean return against environment steps.
pub fn render_svg(curves: &[Curve]) -> String {
    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for c in curves {
        for (i, (&x, &m)) in c.steps.iter().zip(&c.mean).enumerate() {
            let s = c.std.as_ref().map_or(0.0, |s| s[i]);
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
            y_lo = y_lo.min(m - s);
            y_hi = y_hi.max(m + s);
        }
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let py = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g id="axes" stroke="black" stroke-width="1"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = TOP + plot_h,
        r = LEFT + plot_w
    );
    let _ = writeln!(svg, r#"<g id="ticks" font-family="sans-serif" font-size="11">"#);
    for x in nice_ticks(x_lo, x_hi, 5) {
        let _ = writeln!(
            svg,
            r#"<line x1="{X:.2}" y1="{b}" x2="{X:.2}" y2="{b2}" stroke="black"/><text x="{X:.2}" y="{t}" text-anchor="middle">{l}</text>"#,
            X = px(x),
            b = TOP + plot_h,
            b2 = TOP + plot_h + 5.0,
            t = TOP + plot_h + 18.0,
            l = fmt_tick(x)
        );
    }
    for y in nice_ticks(y_lo, y_hi, 5) {
        let _ = writeln!(
            svg,
            r#"<line x1="{l1}" y1="{Y:.2}" x2="{LEFT}" y2="{Y:.2}" stroke="black"/><text x="{t}" y="{ty:.2}" text-anchor="end">{l}</text>"#,
            l1 = LEFT - 5.0,
            Y = py(y),
            t = LEFT - 8.0,
            ty = py(y) + 4.0,
            l = fmt_tick(y)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{y}" font-family="sans-serif" font-size="13" text-anchor="middle">environment steps</text>"#,
        cx = LEFT + plot_w / 2.0,
        y = HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{cy}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {cy})">mean return</text>"#,
        cy = TOP + plot_h / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some(std) = &c.std {
            let upper = c.steps.iter().zip(&c.mean).zip(std).map(|((&x, &m), &s)| (px(x), py(m + s)));
            let lower = c.steps.iter().zip(&c.mean).zip(std).rev().map(|((&x, &m), &s)| (px(x), py(m - s)));
            let pts: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                svg,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> =
            c.steps.iter().zip(&c.mean).map(|(&x, &m)| format!("{:.2},{:.2}", px(x), py(m))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curve" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(&c.label),
            pts.join(" ")
        );
    }
    let _ = writeln!(svg, r#"<g id="legend" font-family="sans-serif" font-size="12">"#);
    for (i, c) in curves.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = LEFT + plot_w + 15.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{ry}" width="14" height="4" fill="{color}"/><text x="{tx}" y="{ty}">{label}</text>"#,
            ry = y - 4.0,
            color = COLORS[i % COLORS.len()],
            tx = x + 20.0,
            ty = y + 2.0,
            label = escape(&c.label)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}

/// Reads every run under `runs` and writes the plot to `out`.
pub fn plot_runs(runs: &Path, out: &Path) -> Result<usize, HarnessError> {
    if !runs.is_dir() {
        return Err(HarnessError::Config(format!("{} is not a directory", runs.display())));
    }
    let curves = load_curves(runs)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, render_svg(&curves))?;
    Ok(curves.len())
}
