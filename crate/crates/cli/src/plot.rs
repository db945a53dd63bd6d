//! SVG figures from a metrics CSV: outer loss per bit decision, method
//! comparison bars, and brute-force rankings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mil_core::baselines::mean_std;
use mil_core::experiment::{read_metrics, MetricsFile, MetricsRow};

use crate::args::PlotArgs;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 90.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: Option<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, provenance: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, "<!-- {} -->", provenance.replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let vals: Vec<f64> = values.filter(|v| v.is_finite()).map(|v| if log { v.log10() } else { v }).collect();
        let (mut lo, mut hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        Axis {
            lo: lo - pad,
            hi: hi + pad,
            log,
        }
    }

    fn include_zero(mut self) -> Self {
        self.lo = self.lo.min(0.0);
        self.hi = self.hi.max(0.0);
        self
    }

    /// Fraction of the way from `lo` to `hi`.
    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        (0..=4)
            .map(|i| {
                let t = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
                if self.log {
                    (10f64.powf(t), format!("1e{t:.1}"))
                } else {
                    (t, format!("{t:.3}"))
                }
            })
            .collect()
    }
}

fn y_px(axis: &Axis, v: f64) -> f64 {
    HEIGHT - MARGIN_BOTTOM - axis.frac(v) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
}

fn y_axis(out: &mut String, axis: &Axis, label: &str) {
    for (v, text) in axis.ticks() {
        let y = y_px(axis, v);
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN_LEFT}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{text}</text>"##,
            WIDTH - MARGIN_RIGHT,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(18 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (HEIGHT - MARGIN_BOTTOM + MARGIN_TOP) / 2.0,
        escape(label)
    );
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], provenance: &str) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let log = all().all(|p| p.1 > 0.0);
    let y = Axis::fit(all().map(|p| p.1), log);
    let x = Axis::fit(all().map(|p| p.0), false);
    let x_px = |v: f64| MARGIN_LEFT + x.frac(v) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT);
    let mut out = String::new();
    header(&mut out, title, provenance);
    y_axis(&mut out, &y, y_label);
    let (first, last) = (x.lo.ceil() as i64, x.hi.floor() as i64);
    let step = ((last - first) / 8).max(1) as usize;
    for v in (first..=last).step_by(step) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{v}</text>"#,
            x_px(v as f64),
            HEIGHT - MARGIN_BOTTOM + 18.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - MARGIN_BOTTOM + 40.0,
        escape(x_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(a, b)| format!("{:.1},{:.1}", x_px(a), y_px(&y, b))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for &(a, b) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, x_px(a), y_px(&y, b));
        }
        let ly = MARGIN_TOP + 16.0 * i as f64;
        let lx = WIDTH - MARGIN_RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
            ly,
            lx + 14.0,
            ly + 9.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar], provenance: &str) -> String {
    let extents = bars.iter().flat_map(|b| {
        let e = b.err.unwrap_or(0.0);
        [b.value - e, b.value + e]
    });
    let y = Axis::fit(extents, false).include_zero();
    let slot = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) / bars.len().max(1) as f64;
    let mut out = String::new();
    header(&mut out, title, provenance);
    y_axis(&mut out, &y, y_label);
    let zero = y_px(&y, 0.0);
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let top = y_px(&y, b.value);
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>{}: {}</title></rect>"#,
            cx - 0.35 * slot,
            top.min(zero),
            0.7 * slot,
            (top - zero).abs(),
            escape(&b.label),
            b.value
        );
        if let Some(e) = b.err {
            let _ = writeln!(
                out,
                r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y_px(&y, b.value - e),
                y_px(&y, b.value + e)
            );
        }
        let _ = writeln!(
            out,
            r#"<text transform="translate({cx:.1} {:.1}) rotate(35)">{}</text>"#,
            HEIGHT - MARGIN_BOTTOM + 14.0,
            escape(&b.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Accepted outer loss after each bit decision, one series per run.
pub fn loss_series(rows: &[MetricsRow]) -> Vec<Series> {
    let mut runs: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.row_kind == "decision") {
        let (Some(l0), Some(l1), Some(chosen)) = (r.l_out_0, r.l_out_1, r.chosen) else {
            continue;
        };
        let accepted = if chosen == 1 { l1 } else { l0 };
        runs.entry((r.method.clone(), r.seed.unwrap_or(0))).or_default().push(accepted);
    }
    runs.into_iter()
        .map(|((method, seed), losses)| Series {
            label: format!("{method} seed {seed}"),
            points: losses.into_iter().enumerate().map(|(i, l)| ((i + 1) as f64, l)).collect(),
        })
        .collect()
}

pub fn method_bars(rows: &[MetricsRow]) -> Vec<Bar> {
    rows.iter()
        .filter(|r| r.row_kind == "aggregate")
        .filter_map(|r| {
            Some(Bar {
                label: r.method.clone(),
                value: r.mean?,
                err: r.std,
            })
        })
        .collect()
}

/// Mean validation loss per mask over the ranked seeds, best first.
pub fn ranking_bars(rows: &[MetricsRow]) -> Vec<Bar> {
    let mut by_mask: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.row_kind == "ranked") {
        if let (Some(mask), Some(l)) = (&r.mask_bits, r.l_out) {
            by_mask.entry(mask.clone()).or_default().push(l);
        }
    }
    let mut bars: Vec<Bar> = by_mask
        .into_iter()
        .map(|(label, ls)| {
            let (value, err) = mean_std(&ls);
            Bar { label, value, err }
        })
        .collect();
    bars.sort_by(|a, b| a.value.total_cmp(&b.value));
    bars
}

fn metric_name(rows: &[MetricsRow]) -> String {
    rows.iter().find_map(|r| r.metric_name.clone()).unwrap_or_else(|| "test metric".into())
}

/// Renders every figure the file has data for; returns the written paths.
pub fn render(file: &MetricsFile, out: &Path) -> Result<Vec<PathBuf>> {
    let provenance = format!("build: {}; config: {}", file.build_id, file.config_json);
    let mut figures = Vec::new();
    let series = loss_series(&file.rows);
    if !series.is_empty() {
        figures.push((
            "outer_loss.svg",
            line_chart("Outer loss per bit decision", "bit decision", "accepted L_out", &series, &provenance),
        ));
    }
    let bars = method_bars(&file.rows);
    if !bars.is_empty() {
        let metric = metric_name(&file.rows);
        figures.push(("methods.svg", bar_chart(&format!("Test {metric} by method"), &metric, &bars, &provenance)));
    }
    let ranked = ranking_bars(&file.rows);
    if !ranked.is_empty() {
        figures.push(("ranking.svg", bar_chart("Validation loss by mask", "L_out", &ranked, &provenance)));
    }
    if figures.is_empty() {
        bail!("no decision, aggregate or ranked rows to plot");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    figures
        .into_iter()
        .map(|(name, svg)| {
            let path = out.join(name);
            fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
            Ok(path)
        })
        .collect()
}

pub fn plot(args: &PlotArgs) -> Result<()> {
    let text = fs::read_to_string(&args.metrics).with_context(|| format!("reading {}", args.metrics.display()))?;
    let file = read_metrics(&text)?;
    for path in render(&file, &args.out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
