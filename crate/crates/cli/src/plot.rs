//! Static SVG line charts of a run's metric logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 3] = ["#c0392b", "#2471a3", "#229954"];

type Series = (String, Vec<(f64, f64)>);

fn read_series(path: &Path, keys: &[&str]) -> Result<Vec<Series>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut series: Vec<Series> = keys.iter().map(|k| (k.to_string(), Vec::new())).collect();
    for (i, line) in text.lines().enumerate() {
        let v: Value = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        let step = v["step"].as_f64().unwrap_or(i as f64);
        for (key, points) in series.iter_mut() {
            if let Some(y) = v[key.as_str()].as_f64() {
                points.push((step, y));
            }
        }
    }
    Ok(series)
}

/// Renders every series on shared axes.
pub fn svg_chart(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    y0 = y0.min(0.0);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0).max(1e-12) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">{x0}</text><text x="{}" y="{}" text-anchor="end">{x1}</text>"#, H - PAD + 16.0, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="4" y="{}">{y0:.3}</text><text x="4" y="{}">{y1:.3}</text>"#, H - PAD, PAD);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, W - PAD - 150.0, PAD + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `loss.svg`, `train_accuracy.svg` and, when `eval.jsonl` exists, `eval_accuracy.svg`.
pub fn plot_run(dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = dir.join("metrics.jsonl");
    let mut jobs = vec![
        ("loss.svg", "training loss", metrics.clone(), vec!["loss_total", "loss_action", "loss_reasoning"]),
        ("train_accuracy.svg", "training accuracy", metrics, vec!["action_accuracy", "reasoning_accuracy", "action_l1"]),
    ];
    let eval = dir.join("eval.jsonl");
    if eval.exists() {
        jobs.push(("eval_accuracy.svg", "held-out accuracy", eval, vec!["action_accuracy", "reasoning_accuracy", "action_l1"]));
    }
    let mut written = Vec::new();
    for (file, title, src, keys) in jobs {
        let series = read_series(&src, &keys)?;
        let path = dir.join(file);
        fs::write(&path, svg_chart(title, &series)).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
