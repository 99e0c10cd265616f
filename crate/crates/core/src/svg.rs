//! Minimal SVG charts for evaluation reports.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, y_max: f64) {
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">0</text>"#,
        PAD - 4.0,
        PAD + 4.0,
        fmt_num(y_max),
        PAD - 4.0,
        H - PAD + 4.0
    );
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - 150.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            W - 136.0,
            y,
            escape(n)
        );
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Grouped bars: one group per category, one bar per series.
pub fn grouped_bars(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut s = open(title);
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold(0.0, f64::max)
        .max(1.0);
    axes(&mut s, y_max);
    let plot_w = W - 1.5 * PAD;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let x0 = PAD + group_w * c as f64 + group_w * 0.1;
        for (k, (_, v)) in series.iter().enumerate() {
            let h = v.get(c).copied().unwrap_or(0.0) / y_max * (H - 2.0 * PAD);
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x0 + bar_w * k as f64,
                H - PAD - h,
                bar_w,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + group_w * 0.4,
            H - PAD + 14.0,
            escape(cat)
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Line chart over numeric x values; points may be missing per series.
pub fn lines(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = open(title);
    let pts = series.iter().flat_map(|(_, v)| v.iter());
    let (x_min, x_max, y_max) = pts.fold((f64::INFINITY, f64::NEG_INFINITY, 0.0f64), |(a, b, c), &(x, y)| {
        (a.min(x), b.max(x), c.max(y))
    });
    let (x_min, x_max) = if x_min.is_finite() { (x_min, x_max.max(x_min + 1.0)) } else { (0.0, 1.0) };
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    axes(&mut s, y_max);
    let sx = |x: f64| PAD + (x - x_min) / (x_max - x_min) * (W - 1.5 * PAD);
    let sy = |y: f64| H - PAD - y / y_max * (H - 2.0 * PAD);
    for (k, (_, v)) in series.iter().enumerate() {
        let path: Vec<String> = v.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            path.join(" ")
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text><text x="{PAD}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H - PAD + 14.0,
        fmt_num(x_min),
        W - PAD / 2.0,
        H - PAD + 14.0,
        fmt_num(x_max)
    );
    legend(&mut s, &series.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Square heatmap with counts in each cell; rows are true classes.
pub fn heatmap(title: &str, labels: &[&str], cells: &[Vec<usize>]) -> String {
    let mut s = open(title);
    let n = labels.len().max(1) as f64;
    let size = (H - 2.0 * PAD).min(W - 2.0 * PAD) / n;
    let max = cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let x0 = (W - size * n) / 2.0;
    for (r, row) in cells.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = 255 - (v as f64 / max * 200.0).round() as u8;
            let (x, y) = (x0 + size * c as f64, PAD + size * r as f64);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{size:.2}" height="{size:.2}" fill="rgb({shade},{shade},255)" stroke="white"/><text x="{:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#,
                x + size / 2.0,
                y + size / 2.0 + 4.0
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x0 - 4.0,
            PAD + size * (i as f64 + 0.5) + 4.0,
            escape(l),
            x0 + size * (i as f64 + 0.5),
            PAD + size * n + 14.0,
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let bars = grouped_bars("e<r", &["0".into(), "1".into()], &[("m".into(), vec![3.0, 1.0])]);
        assert!(bars.starts_with("<svg") && bars.trim_end().ends_with("</svg>"));
        assert!(bars.contains("e&lt;r"));
        assert_eq!(bars.matches("<rect").count(), 2 + 2);
        let l = lines("rmse", "window", &[("a".into(), vec![(1.0, 0.5), (2.0, 0.25)])]);
        assert!(l.contains("<polyline"));
        let h = heatmap("cm", &["a", "b"], &[vec![1, 0], vec![2, 5]]);
        assert_eq!(h.matches(">5</text>").count(), 1);
    }
}
