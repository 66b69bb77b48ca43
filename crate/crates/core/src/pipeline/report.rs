//! Plain-text tables and a dependency-free SVG line chart.

use std::fmt::Write;

use crate::causal::SiteSummary;
use crate::forecaster::HookSite;
use crate::taxonomy::{ConceptLabel, TaxonomyReport};

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

/// Ablation statistics per site.
pub fn table1(rows: &[SiteSummary]) -> String {
    let header: Vec<String> = [
        "Site", "N", "CRPS clean", "CRPS patched", "Mean dCRPS", "Median", "Max", "Std", "+Frac", "Max/Med",
    ]
    .map(String::from)
    .to_vec();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let s = &r.summary;
            vec![
                r.site.to_string(),
                s.n.to_string(),
                format!("{:.4}", r.crps_clean),
                format!("{:.4}", r.crps_baseline),
                format!("{:.5}", s.mean),
                format!("{:.5}", s.median),
                format!("{:.5}", s.max),
                format!("{:.5}", s.std),
                format!("{:.2}", s.positive_fraction),
                s.max_over_median.map_or("n/a".into(), |v| format!("{v:.2}")),
            ]
        })
        .collect();
    format!("Table 1. Single-feature ablation (dCRPS = ablated - patched baseline)\n{}", render(&header, &body))
}

/// Concept counts per site; counts below `floor` print as `-`.
pub fn table2(reports: &[TaxonomyReport], floor: usize) -> String {
    let mut header = vec!["Concept".to_string()];
    header.extend(reports.iter().map(|r| r.site.to_string()));
    let mut body = Vec::new();
    for c in ConceptLabel::CONCEPTS.iter().chain([ConceptLabel::Unknown].iter()) {
        let mut row = vec![c.as_str().to_string()];
        for r in reports {
            let n = r.counts.get(c).copied().unwrap_or(0);
            row.push(if n < floor { "-".into() } else { n.to_string() });
        }
        body.push(row);
    }
    let mut row = vec!["labeled (%)".to_string()];
    row.extend(reports.iter().map(|r| format!("{:.1}", 100.0 * r.labeled_fraction)));
    body.push(row);
    format!("Table 2. Feature concepts per site (counts < {floor} hidden)\n{}", render(&header, &body))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// CRPS against number of ablated features, log2 x axis. The patched
/// baseline (0 features) sits one octave left of 1.
pub fn progressive_svg(curves: &[(HookSite, Vec<(usize, f64)>)]) -> String {
    let xpos = |c: usize| if c == 0 { -1.0 } else { (c as f64).log2() };
    let pts = curves.iter().flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(c, y) in pts {
        x0 = x0.min(xpos(c));
        x1 = x1.max(xpos(c));
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
    let mut e = x0.ceil() as i32;
    while e as f64 <= x1 {
        let x = sx(e as f64);
        let label = if e < 0 { "0".to_string() } else { (1u64 << e).to_string() };
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{b}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            b + 4.0,
            b + 16.0
        );
        e += 1;
    }
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            l - 4.0,
            l - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">features ablated (log scale)</text>"#,
        W / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">mean CRPS</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (site, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = curve
            .iter()
            .map(|&(c, y)| format!("{:.1},{:.1}", sx(xpos(c)), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-site="{site}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{site}</text>"#,
            r - 90.0,
            r - 70.0,
            r - 64.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::summarize;

    #[test]
    fn table2_masks_small_counts() {
        let site: HookSite = "enc.1".parse().unwrap();
        let mut counts = std::collections::BTreeMap::new();
        counts.insert(ConceptLabel::CONCEPTS[0], 12);
        counts.insert(ConceptLabel::CONCEPTS[1], 3);
        let rep = TaxonomyReport {
            site,
            n_features: 20,
            counts,
            labeled: 15,
            labeled_fraction: 0.75,
        };
        let t = table2(&[rep], 10);
        let first = ConceptLabel::CONCEPTS[0].as_str();
        let second = ConceptLabel::CONCEPTS[1].as_str();
        assert!(t.lines().any(|l| l.starts_with(first) && l.ends_with("12")));
        assert!(t.lines().any(|l| l.starts_with(second) && l.ends_with('-')));
        assert!(t.contains("75.0"));
    }

    #[test]
    fn svg_has_one_polyline_per_site() {
        let a: HookSite = "enc.1".parse().unwrap();
        let b: HookSite = "dec.0".parse().unwrap();
        let curve = vec![(0, 1.0), (1, 1.1), (2, 1.3), (64, 2.0)];
        let svg = progressive_svg(&[(a, curve.clone()), (b, curve)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">64</text>"));
        let row = SiteSummary {
            site: a,
            crps_clean: 1.0,
            crps_baseline: 1.0,
            summary: summarize(&[0.1, -0.2, 0.3]).unwrap(),
        };
        assert!(table1(&[row]).contains("enc.1"));
    }
}
