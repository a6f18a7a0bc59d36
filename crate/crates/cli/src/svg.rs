use std::fmt::Write;

/// Half-width of the fixed square viewport in data units.
pub const VIEW: f64 = 1.3;
/// Panel side in SVG user units.
pub const PANEL: f64 = 400.0;
/// Marker radius as a fraction of the viewport side.
pub const MARKER_FRACTION: f64 = 0.008;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Panel {
    pub label: String,
    pub points: Vec<[f64; 2]>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Side-by-side scatter panels over `[-VIEW, VIEW]²`. Points outside the
/// viewport are clipped by the panel.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL * panels.len() as f64;
    let r = MARKER_FRACTION * PANEL;
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{PANEL}" viewBox="0 0 {width} {PANEL}">"#
    )
    .unwrap();
    writeln!(s, "<defs>").unwrap();
    for k in 0..panels.len() {
        writeln!(
            s,
            r#"<clipPath id="clip{k}"><rect x="{}" y="0" width="{PANEL}" height="{PANEL}"/></clipPath>"#,
            k as f64 * PANEL
        )
        .unwrap();
    }
    writeln!(s, "</defs>").unwrap();
    for (k, p) in panels.iter().enumerate() {
        let x0 = k as f64 * PANEL;
        let color = COLORS[k % COLORS.len()];
        writeln!(
            s,
            r##"<g class="panel"><rect x="{x0}" y="0" width="{PANEL}" height="{PANEL}" fill="#ffffff" stroke="#444444"/>"##
        )
        .unwrap();
        writeln!(
            s,
            r##"<text x="{}" y="18" font-family="sans-serif" font-size="14" fill="#222222">{}</text>"##,
            x0 + 8.0,
            escape(&p.label)
        )
        .unwrap();
        writeln!(s, r#"<g clip-path="url(#clip{k})" fill="{color}" fill-opacity="0.6">"#).unwrap();
        for [x, y] in &p.points {
            let cx = x0 + (x + VIEW) / (2.0 * VIEW) * PANEL;
            let cy = (VIEW - y) / (2.0 * VIEW) * PANEL;
            writeln!(s, r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="{r}"/>"#).unwrap();
        }
        writeln!(s, "</g></g>").unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}
