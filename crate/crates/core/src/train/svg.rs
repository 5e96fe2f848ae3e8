//! Minimal grouped bar charts with error bars.

use std::fmt::Write as _;

/// One bar series: a label and `(mean, stdev)` per category.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub values: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars on a `[0, 1]` axis. Non-finite means are drawn as gaps.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            w - right,
            left - 6.0,
            y(v) + 4.0,
            y = y(v)
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        escape(y_label)
    );
    let n_cat = categories.len().max(1) as f64;
    let group_w = plot_w / n_cat;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        for (si, ser) in series.iter().enumerate() {
            let Some(&(mean, sd)) = ser.values.get(ci) else { continue };
            if !mean.is_finite() {
                continue;
            }
            let x = gx + bar_w * si as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                y(mean),
                bar_w * 0.9,
                y(0.0) - y(mean),
                PALETTE[si % PALETTE.len()]
            );
            if sd.is_finite() && sd > 0.0 {
                let cx = x + bar_w * 0.45;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                    y(mean - sd),
                    y(mean + sd)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            y(0.0) + 16.0,
            escape(cat)
        );
    }
    for (si, ser) in series.iter().enumerate() {
        let lx = left + 10.0 + 130.0 * si as f64;
        let ly = h - 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{ly}">{}</text>"#,
            ly - 10.0,
            PALETTE[si % PALETTE.len()],
            lx + 16.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
