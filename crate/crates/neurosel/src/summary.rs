//! Sweep summary rows, CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use neurosel_core::pruner::PruneMode;
use serde::{Deserialize, Serialize};

/// One pruning level of one mode (and seed, for random mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: PruneMode,
    pub seed: Option<u64>,
    pub nominal_ratio: f64,
    pub prune_count: usize,
    pub exact_ratio_percent: String,
    pub d_ff_kept: usize,
    pub accuracy: f64,
    pub relative_accuracy_loss: Option<f64>,
    pub trap_rate_total: f64,
    pub trap_rate_type1: f64,
    pub trap_rate_type2: f64,
    pub delta_selective_random: Option<f64>,
    pub distractor_accuracy: Option<f64>,
    pub distractor_similarity: Option<f64>,
    pub param_count: u64,
    pub param_delta: u64,
    pub flops_per_token: u64,
    pub flops_delta: u64,
    pub positive_pruned: Option<usize>,
    pub finetuned_accuracy: Option<f64>,
    pub relative_gain: Option<f64>,
    pub finetuned_trap_rate: Option<f64>,
}

impl SummaryRow {
    pub fn series(&self) -> String {
        match self.seed {
            Some(s) if self.mode == PruneMode::Random => format!("random (seed {s})"),
            _ => self.mode.as_str().to_string(),
        }
    }
}

pub fn to_csv(rows: &[SummaryRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("csv rows serialize");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn from_csv(bytes: &[u8]) -> Result<Vec<SummaryRow>, csv::Error> {
    csv::Reader::from_reader(bytes).deserialize().collect()
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Static line chart of `metric` against the nominal pruning ratio, one line
/// per series.
pub fn line_chart(rows: &[SummaryRow], title: &str, y_label: &str, metric: fn(&SummaryRow) -> f64) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        series.entry(r.series()).or_default().push((r.nominal_ratio, metric(r)));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.nominal_ratio).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let x_max = xs.iter().copied().fold(0.0, f64::max).max(x_min + 1e-9);
    let y_max = rows.iter().map(metric).fold(1.0, f64::max);
    let px = |x: f64| left + (x - x_min) / (x_max - x_min) * pw;
    let py = |y: f64| top + ph - y / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{title}</text>"#, left + pw / 2.0);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        top + ph,
        left + pw,
        top + ph
    );
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    for k in 0..=4 {
        let y = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.2}</text>"#,
            left - 6.0,
            py(y) + 4.0
        );
    }
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}%</text>"#,
            px(x),
            top + ph + 18.0,
            fmt_pct(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">nominal pruning ratio</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            left + pw + 12.0,
            left + pw + 32.0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">{name}</text>"#, left + pw + 38.0, ly + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_pct(x: f64) -> String {
    let p = x * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p:.1}")
    }
}

pub fn accuracy_chart(rows: &[SummaryRow]) -> String {
    line_chart(rows, "Target accuracy vs pruning level", "accuracy", |r| r.accuracy)
}

pub fn trap_chart(rows: &[SummaryRow]) -> String {
    line_chart(rows, "Trap rate vs pruning level", "trap rate", |r| r.trap_rate_total)
}
