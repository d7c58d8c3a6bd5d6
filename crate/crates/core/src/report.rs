//! CSV tables and small static SVG charts for experiment results.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{AblationRow, StrategyTable, SweepRow};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format("csv", format!("{}: {e}", path.display()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `epoch,loss`, epochs counted from 1.
pub fn write_loss_csv(path: &Path, curve: &[f64]) -> Result<()> {
    write_rows(
        path,
        &["epoch", "loss"],
        curve.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]),
    )
}

/// `strategy,<metric>`.
pub fn write_strategy_csv(path: &Path, table: &StrategyTable) -> Result<()> {
    write_rows(
        path,
        &["strategy", table.metric_name()],
        table.rows.iter().map(|(s, m)| vec![s.to_string(), m.to_string()]),
    )
}

/// `sigma,strategy,<metric>`.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow], metric: &str) -> Result<()> {
    write_rows(
        path,
        &["sigma", "strategy", metric],
        rows.iter()
            .map(|r| vec![r.sigma.to_string(), r.strategy.to_string(), r.metric.to_string()]),
    )
}

/// `config,layers,<metric>`.
pub fn write_ablation_csv(path: &Path, rows: &[AblationRow], metric: &str) -> Result<()> {
    write_rows(
        path,
        &["config", "layers", metric],
        rows.iter()
            .map(|r| vec![r.label.clone(), r.layers.to_string(), r.metric.to_string()]),
    )
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>
"#,
        (LEFT + W - RIGHT) / 2.0,
        escape(title),
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn y_axis(out: &mut String, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = move |v: f64| H - BOTTOM - (v - lo) / span * (H - TOP - BOTTOM);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    for k in 0..=4 {
        let v = lo + span * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end">{4:.3}</text>"##,
            y(v),
            W - RIGHT,
            LEFT - 6.0,
            y(v) + 4.0,
            v
        );
    }
    y
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo.min(0.0), hi.max(lo + 1e-9))
    } else {
        (0.0, 1.0)
    }
}

/// Multi-series line chart over a numeric x axis.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, y_label);
    let (_, y_hi) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let y = y_axis(&mut out, 0.0, y_hi);
    let (x_lo, x_hi) = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x_lo, x_hi) = if x_lo.is_finite() { (x_lo, x_hi) } else { (0.0, 1.0) };
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let x = |v: f64| LEFT + (v - x_lo) / x_span * (W - LEFT - RIGHT);
    let _ = writeln!(
        out,
        r#"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT
    );
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#,
            x(t),
            H - BOTTOM + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.1},{:.1}", x(a), y(b))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(a, b) in pts {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(a), y(b));
        }
        let ly = TOP + 18.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT + 14.0,
            ly,
            W - RIGHT + 32.0,
            ly + 10.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Labelled bar chart.
pub fn svg_bar_plot(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title, y_label);
    let (_, y_hi) = bounds(bars.iter().map(|b| b.1));
    let y = y_axis(&mut out, 0.0, y_hi);
    let slot = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let x0 = LEFT + slot * k as f64 + slot * 0.15;
        let top = y(v.max(0.0));
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            slot * 0.7,
            (H - BOTTOM - top).max(0.0),
            COLORS[0]
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.3}</text>"#,
            x0 + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(label),
            x0 + slot * 0.35,
            top - 4.0
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Noise sweep chart: one line per strategy.
pub fn sweep_svg(rows: &[SweepRow], metric: &str) -> String {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let name = r.strategy.to_string();
        match series.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1.push((r.sigma, r.metric)),
            None => series.push((name, vec![(r.sigma, r.metric)])),
        }
    }
    svg_line_plot("Noise robustness", "noise sigma (8-bit steps)", metric, &series)
}

pub fn ablation_svg(rows: &[AblationRow], metric: &str) -> String {
    let bars: Vec<(String, f64)> = rows.iter().map(|r| (r.label.clone(), r.metric)).collect();
    svg_bar_plot("Priming ablation", metric, &bars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Strategy;

    #[test]
    fn svg_outputs_are_well_formed_and_stable() {
        let rows = vec![
            SweepRow { sigma: 0.0, strategy: Strategy::Free, metric: 0.5 },
            SweepRow { sigma: 20.0, strategy: Strategy::Free, metric: 0.4 },
            SweepRow { sigma: 0.0, strategy: Strategy::Prime, metric: 0.7 },
            SweepRow { sigma: 20.0, strategy: Strategy::Prime, metric: 0.6 },
        ];
        let a = sweep_svg(&rows, "map");
        assert_eq!(a, sweep_svg(&rows, "map"));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<polyline").count(), 2);
        let b = svg_bar_plot("t", "y", &[("a<b".into(), 0.2)]);
        assert!(b.contains("a&lt;b"));
    }

    #[test]
    fn loss_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[1.5, 0.25]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,loss\n1,1.5\n2,0.25\n");
    }
}
