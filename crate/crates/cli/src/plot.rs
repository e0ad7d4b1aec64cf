//! Static SVG line charts of mean MCC against data size.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Method;
use crate::results::ResultRow;
use crate::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Mean MCC per N for one (method, L) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub method: String,
    pub layers: usize,
    pub points: Vec<(usize, f64)>,
}

/// Groups successful scored rows by panel, then by (method, L), averaging
/// over seeds.
pub fn curves(rows: &[ResultRow]) -> BTreeMap<String, Vec<Curve>> {
    let mut acc: BTreeMap<(String, String, usize), BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_ok()) {
        let Some(mcc) = r.mcc else { continue };
        let panel = r
            .method
            .parse::<Method>()
            .map(|m| m.panel().to_string())
            .unwrap_or_else(|_| r.method.clone());
        let slot = acc
            .entry((panel, r.method.clone(), r.layers))
            .or_default()
            .entry(r.len)
            .or_insert((0.0, 0));
        slot.0 += mcc;
        slot.1 += 1;
    }
    let mut out: BTreeMap<String, Vec<Curve>> = BTreeMap::new();
    for ((panel, method, layers), by_len) in acc {
        let points = by_len
            .into_iter()
            .map(|(len, (sum, k))| (len, sum / k as f64))
            .collect();
        out.entry(panel).or_default().push(Curve { method, layers, points });
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One chart: log₂ N on x, mean MCC in [0, 1] on y, one polyline per curve.
pub fn render_svg(title: &str, curves: &[Curve]) -> String {
    let lens: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| (p.0 as f64).log2()))
        .collect();
    let (mut lo, mut hi) = lens
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1.0 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let px = |log_n: f64| MARGIN + (log_n - lo) / (hi - lo) * plot_w;
    let py = |mcc: f64| HEIGHT - MARGIN - mcc.clamp(0.0, 1.0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{0}" stroke="black"/>"#,
        HEIGHT - MARGIN,
        WIDTH - MARGIN
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let (tx, ty, y, x2) = (MARGIN - 6.0, py(v) + 4.0, py(v), WIDTH - MARGIN);
        let _ = writeln!(
            s,
            r##"<text x="{tx}" y="{ty}" text-anchor="end">{v:.1}</text><line x1="{MARGIN}" y1="{y}" x2="{x2}" y2="{y}" stroke="#ddd"/>"##
        );
    }
    for e in (lo.ceil() as i64)..=(hi.floor() as i64) {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">2^{e}</text>"#,
            px(e as f64),
            HEIGHT - MARGIN + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">N</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">mean MCC</text>"#,
        HEIGHT / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(len, mcc)| format!("{:.2},{:.2}", px((len as f64).log2()), py(mcc)))
            .collect();
        let label = format!("{} L={}", c.method, c.layers);
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(&label)
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#,
            WIDTH - MARGIN - 110.0,
            WIDTH - MARGIN - 90.0,
            WIDTH - MARGIN - 85.0,
            ly + 4.0,
            escape(&label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `mcc_<panel>.svg` per panel into `dir` and returns the paths.
pub fn write_panels(dir: &Path, rows: &[ResultRow]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (panel, cs) in curves(rows) {
        let path = dir.join(format!("mcc_{panel}.svg"));
        fs::write(&path, render_svg(&format!("{panel} panel"), &cs))?;
        paths.push(path);
    }
    Ok(paths)
}
