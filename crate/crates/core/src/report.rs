//! Text artifacts: metric and curve CSVs, loss logs, ablation tables and an
//! SVG precision-recall chart. Every artifact opens with a comment carrying
//! the config hash.

use std::fmt::Write as _;

use crate::eval::MetricReport;
use crate::rce::EpochRecord;

pub fn hash_header(config_hash: &str) -> String {
    format!("# config-hash {config_hash}\n")
}

/// `metric,value` rows.
pub fn metrics_csv(report: &MetricReport, config_hash: &str, title: &str) -> String {
    let mut s = hash_header(config_hash);
    let _ = writeln!(s, "# {title}");
    s.push_str("metric,value\n");
    for (k, v) in [("map", report.map), ("ndcg", report.ndcg), ("anmrr", report.anmrr)] {
        let _ = writeln!(s, "{k},{v}");
    }
    for (k, v) in [
        ("queries", report.queries),
        ("skipped_queries", report.skipped_queries),
        ("zero_norm_queries", report.zero_norm_queries),
        ("zero_norm_targets", report.zero_norm_targets),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// `recall,precision` rows.
pub fn pr_csv(curve: &[(f64, f64)], config_hash: &str, title: &str) -> String {
    let mut s = hash_header(config_hash);
    let _ = writeln!(s, "# {title}");
    s.push_str("recall,precision\n");
    for (r, p) in curve {
        let _ = writeln!(s, "{r},{p}");
    }
    s
}

pub fn rce_loss_csv(log: &[EpochRecord], config_hash: &str) -> String {
    let mut s = hash_header(config_hash);
    s.push_str("epoch,total,residual_center,cross_reconstruction\n");
    for r in log {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.epoch, r.loss.total, r.loss.residual_center, r.loss.cross_reconstruction
        );
    }
    s
}

pub fn hsl_loss_csv(log: &[f64], config_hash: &str) -> String {
    let mut s = hash_header(config_hash);
    s.push_str("epoch,loss\n");
    for (e, l) in log.iter().enumerate() {
        let _ = writeln!(s, "{e},{l}");
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per variant: `variant,map,ndcg,anmrr`.
pub fn ablation_csv(rows: &[(String, MetricReport)], config_hash: &str) -> String {
    let mut s = hash_header(config_hash);
    s.push_str("variant,map,ndcg,anmrr\n");
    for (name, r) in rows {
        let _ = writeln!(s, "{},{},{},{}", csv_field(name), r.map, r.ndcg, r.anmrr);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line chart, recall on x and precision on y, both on
/// `[0, 1]`.
pub fn pr_svg(title: &str, series: &[(&str, &[(f64, f64)])], config_hash: &str) -> String {
    let (w, h) = (480.0, 360.0);
    let (left, right, top, bottom) = (56.0, 16.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |r: f64| left + r.clamp(0.0, 1.0) * pw;
    let y = |p: f64| top + (1.0 - p.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<!-- config-hash {config_hash} -->");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            s,
            "<line x1=\"{l}\" y1=\"{yy:.1}\" x2=\"{r}\" y2=\"{yy:.1}\" stroke=\"#ddd\"/>\n\
             <text x=\"{tx}\" y=\"{ty:.1}\" text-anchor=\"end\">{v:.1}</text>\n\
             <line x1=\"{xx:.1}\" y1=\"{t}\" x2=\"{xx:.1}\" y2=\"{b}\" stroke=\"#ddd\"/>\n\
             <text x=\"{xx:.1}\" y=\"{bx}\" text-anchor=\"middle\">{v:.1}</text>",
            l = left,
            r = left + pw,
            yy = y(v),
            tx = left - 6.0,
            ty = y(v) + 4.0,
            xx = x(v),
            t = top,
            b = top + ph,
            bx = top + ph + 16.0,
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">recall</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">precision</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (name, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve.iter().map(|&(r, p)| format!("{:.2},{:.2}", x(r), y(p))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 14.0 * i as f64;
        let lx = left + pw - 110.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
