//! Accuracy-curve SVGs and the aligned Table 1 text.

use std::io::{self, Write};

use super::config::{Dataset, EncodingKind};
use super::run::RunSummary;

/// Mean and sample std of every epoch. The mean covers the runs still active
/// at that epoch. The std is only defined while every run is active, so
/// the band is truncated at the earliest stop.
pub fn curve_statistics(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<Option<f64>>) {
    let longest = curves.iter().map(Vec::len).max().unwrap_or(0);
    let shortest = curves.iter().map(Vec::len).min().unwrap_or(0);
    let mut means = Vec::with_capacity(longest);
    let mut stds = Vec::with_capacity(longest);
    for e in 0..longest {
        let xs: Vec<f64> = curves.iter().filter_map(|c| c.get(e).copied()).collect();
        means.push(super::run::mean(&xs));
        stds.push(if e < shortest { super::run::sample_std(&xs).or(Some(0.0)) } else { None });
    }
    (means, stds)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Validation accuracy against epoch: mean polyline over a translucent
/// ±1 std band, y axis fixed to [0, 1].
pub fn write_curves_svg<W: Write>(mut out: W, title: &str, curves: &[Vec<f64>]) -> io::Result<()> {
    let (means, stds) = curve_statistics(curves);
    let epochs = means.len().max(2);
    let x = |e: usize| LEFT + (e as f64) / (epochs - 1) as f64 * (W - LEFT - RIGHT);
    let y = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0)) * (H - TOP - BOTTOM);

    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#)?;
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, W / 2.0, escape(title))?;
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/><text x="{2}" y="{3:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1}</text>"##,
            y(v),
            W - RIGHT,
            LEFT - 6.0,
            y(v) + 4.0
        )?;
    }
    for i in 0..=4 {
        let e = (epochs - 1) * i / 4;
        writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            x(e),
            H - BOTTOM + 16.0,
            e + 1
        )?;
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">epoch</text>"#, W / 2.0, H - 12.0)?;
    writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">validation accuracy</text>"#,
        H / 2.0,
        H / 2.0
    )?;

    let band: Vec<(usize, f64, f64)> =
        stds.iter().enumerate().filter_map(|(e, s)| s.map(|s| (e, means[e] - s, means[e] + s))).collect();
    if band.len() > 1 {
        let mut pts: Vec<String> = band.iter().map(|&(e, _, hi)| format!("{:.1},{:.1}", x(e), y(hi))).collect();
        pts.extend(band.iter().rev().map(|&(e, lo, _)| format!("{:.1},{:.1}", x(e), y(lo))));
        writeln!(out, r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>"##, pts.join(" "))?;
    }
    if !means.is_empty() {
        let pts: Vec<String> = means.iter().enumerate().map(|(e, &m)| format!("{:.1},{:.1}", x(e), y(m))).collect();
        writeln!(out, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##, pts.join(" "))?;
    }
    writeln!(out, "</svg>")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Acceptance band on the mean max validation accuracy of one encoding.
pub fn accuracy_band(encoding: EncodingKind) -> (f64, f64) {
    match encoding {
        EncodingKind::Autoencoder => (0.90, 1.0),
        EncodingKind::Classifier => (0.70, 1.0),
        EncodingKind::Random => (0.45, 0.65),
    }
}

/// Minimum gap between adjacent tiers of the ordering.
pub const TIER_GAP: f64 = 0.05;

/// The five configurations of the table, in row order.
pub fn table1_rows() -> [(Dataset, EncodingKind); 5] {
    [
        (Dataset::Mnist2500, EncodingKind::Autoencoder),
        (Dataset::Mnist5000, EncodingKind::Autoencoder),
        (Dataset::Mnist2500, EncodingKind::Classifier),
        (Dataset::Mnist5000, EncodingKind::Classifier),
        (Dataset::Mnist2500, EncodingKind::Random),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table1Row {
    pub dataset: Dataset,
    pub encoding: EncodingKind,
    pub summary: RunSummary,
}

impl Table1Row {
    pub fn in_band(&self) -> bool {
        let (lo, hi) = accuracy_band(self.encoding);
        (lo..=hi).contains(&self.summary.mean_max_val_accuracy)
    }
}

/// Result of the ordering check for one dataset size.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingCheck {
    pub dataset: Dataset,
    /// Mean accuracies in tier order (autoencoder, classifier, random) for
    /// the tiers present.
    pub tiers: Vec<(EncodingKind, f64)>,
    pub pass: bool,
}

/// Autoencoder > classifier > random with gaps of at least [`TIER_GAP`],
/// over whichever tiers each dataset has.
pub fn ordering_checks(rows: &[Table1Row]) -> Vec<OrderingCheck> {
    let mut datasets: Vec<Dataset> = rows.iter().map(|r| r.dataset).collect();
    datasets.sort();
    datasets.dedup();
    datasets
        .into_iter()
        .map(|d| {
            let tiers: Vec<(EncodingKind, f64)> = EncodingKind::ALL
                .iter()
                .filter_map(|&k| rows.iter().find(|r| r.dataset == d && r.encoding == k).map(|r| (k, r.summary.mean_max_val_accuracy)))
                .collect();
            let pass = tiers.windows(2).all(|w| w[0].1 - w[1].1 >= TIER_GAP);
            OrderingCheck { dataset: d, tiers, pass }
        })
        .collect()
}

fn flag(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn pm(mean: f64, std: Option<f64>, decimals: usize) -> String {
    match std {
        Some(s) => format!("{mean:.decimals$} ± {s:.decimals$}"),
        None => format!("{mean:.decimals$}"),
    }
}

/// Aligned plain-text table with one line per row plus the ordering checks.
pub fn render_table1(rows: &[Table1Row]) -> String {
    let header = ["Dataset", "Encoding Method", "Max Validation Accuracy", "Epoch", "Band", "Check"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            let (lo, hi) = accuracy_band(r.encoding);
            [
                r.dataset.label().to_string(),
                r.encoding.label().to_string(),
                pm(r.summary.mean_max_val_accuracy, r.summary.std_max_val_accuracy, 4),
                pm(r.summary.mean_stopping_epoch, r.summary.std_stopping_epoch, 2),
                format!("[{lo:.2}, {hi:.2}]"),
                flag(r.in_band()).to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(|h| h.chars().count());
    for line in &body {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_line = |cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut s = fmt_line(&header);
    s += &fmt_line(&widths.map(|w| "-".repeat(w)).iter().map(String::as_str).collect::<Vec<_>>());
    for line in &body {
        s += &fmt_line(&line.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for c in ordering_checks(rows) {
        if c.tiers.len() < 2 {
            continue;
        }
        let chain: Vec<String> = c.tiers.iter().map(|(k, a)| format!("{} {a:.4}", k.tag())).collect();
        s += &format!("\nordering {}: {} (gap ≥ {TIER_GAP}) {}", c.dataset.label(), chain.join(" > "), flag(c.pass));
    }
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::run::SeedResult;

    fn summary(dataset: Dataset, encoding: EncodingKind, accs: &[f64]) -> Table1Row {
        let seeds = accs
            .iter()
            .enumerate()
            .map(|(i, &a)| SeedResult {
                seed: i as u64 + 1,
                max_val_accuracy: a,
                best_epoch: 1,
                stopping_epoch: 10 + i,
                stop_reason: "early_stop",
                val_accuracy: vec![a],
            })
            .collect();
        let cfg = crate::experiment::ExperimentConfig { dataset, encoding, ..Default::default() };
        Table1Row { dataset, encoding, summary: RunSummary::aggregate(&cfg, seeds) }
    }

    #[test]
    fn band_stops_at_the_shortest_run() {
        let (m, s) = curve_statistics(&[vec![0.5, 0.6, 0.7], vec![0.7, 0.8]]);
        assert_eq!(m.len(), 3);
        assert!((m[0] - 0.6).abs() < 1e-12 && (m[2] - 0.7).abs() < 1e-12);
        assert!(s[0].is_some() && s[1].is_some() && s[2].is_none());
        assert!((s[0].unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn svg_has_band_and_mean_line() {
        let mut buf = Vec::new();
        write_curves_svg(&mut buf, "a & b", &[vec![0.5, 0.6, 0.7], vec![0.55, 0.62]]).unwrap();
        let svg = String::from_utf8(buf).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("a &amp; b"));
    }

    #[test]
    fn full_table_has_five_rows_and_orders_tiers() {
        let rows: Vec<Table1Row> = table1_rows()
            .iter()
            .map(|&(d, k)| {
                let base = match k {
                    EncodingKind::Autoencoder => 0.95,
                    EncodingKind::Classifier => 0.80,
                    EncodingKind::Random => 0.55,
                };
                summary(d, k, &[base - 0.01, base, base + 0.01])
            })
            .collect();
        let text = render_table1(&rows);
        let row_lines = text.lines().filter(|l| l.starts_with("MNIST-")).count();
        assert_eq!(row_lines, 5);
        assert!(rows.iter().all(Table1Row::in_band));
        let checks = ordering_checks(&rows);
        assert_eq!(checks.len(), 2);
        assert!(checks.iter().all(|c| c.pass));
        assert!(text.contains("0.9500 ± 0.0100"));
        assert!(!text.contains("FAIL"));
    }

    #[test]
    fn single_row_table_and_failures() {
        let rows = vec![summary(Dataset::Mnist2500, EncodingKind::Random, &[0.70])];
        let text = render_table1(&rows);
        assert_eq!(text.lines().filter(|l| l.starts_with("MNIST-")).count(), 1);
        assert!(text.contains("FAIL") && !text.contains("ordering"));

        let close = vec![
            summary(Dataset::Mnist2500, EncodingKind::Classifier, &[0.80]),
            summary(Dataset::Mnist2500, EncodingKind::Random, &[0.77]),
        ];
        assert!(!ordering_checks(&close)[0].pass);
    }
}
