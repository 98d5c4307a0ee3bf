//! Minimal static SVG charts: line plots, a heatmap and a scatter plot.
//! Output depends only on the input data, so re-rendering is byte-stable.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Half-width of an error bar per point, if any.
    pub errors: Option<Vec<f64>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        esc(title)
    );
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for (x, y) in points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let pad = |a: f64, b: f64| {
            if b - a < 1e-12 {
                (a - 0.5, b + 0.5)
            } else {
                (a, b)
            }
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        let dy = (y1 - y0) * 0.05;
        Frame {
            x0,
            x1,
            y0: y0 - dy,
            y1: y1 + dy,
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = writeln!(
            out,
            r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
        );
        for k in 0..=4 {
            let fx = self.x0 + (self.x1 - self.x0) * k as f64 / 4.0;
            let fy = self.y0 + (self.y1 - self.y0) * k as f64 / 4.0;
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                self.px(fx),
                b + 16.0,
                tick(fx)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                l - 6.0,
                self.py(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            H - 10.0,
            esc(xlabel)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            esc(ylabel)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract().abs() < 1e-9 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{c}"/><text x="{}" y="{:.1}">{}</text>"#,
            W - RIGHT + 12.0,
            y,
            W - RIGHT + 26.0,
            y + 9.0,
            esc(l)
        );
    }
}

pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let frame = Frame::fit(series.iter().flat_map(|s| {
        s.points.iter().enumerate().flat_map(move |(k, &(x, y))| {
            let e = s.errors.as_ref().map_or(0.0, |e| e[k]);
            [(x, y - e), (x, y + e)]
        })
    }));
    frame.axes(&mut out, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(k, &(x, y))| {
                format!(
                    "{}{:.1} {:.1}",
                    if k == 0 { "M" } else { "L" },
                    frame.px(x),
                    frame.py(y)
                )
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<path d="{}" stroke="{c}" stroke-width="2" fill="none"/>"#,
            d.join(" ")
        );
        for (k, &(x, y)) in s.points.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#,
                frame.px(x),
                frame.py(y)
            );
            if let Some(e) = s.errors.as_ref().map(|e| e[k]).filter(|e| *e > 0.0) {
                let _ = writeln!(
                    out,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{c}"/>"#,
                    frame.py(y - e),
                    frame.py(y + e),
                    x = frame.px(x)
                );
            }
        }
    }
    legend(
        &mut out,
        &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Scatter plot with a least-squares line.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    frame.axes(&mut out, xlabel, ylabel);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}" fill-opacity="0.6"/>"#,
                frame.px(x),
                frame.py(y)
            );
        }
        if let Some((a, b)) = least_squares(&s.points) {
            let (xa, xb) = (frame.x0, frame.x1);
            let _ = writeln!(
                out,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-dasharray="4 3"/>"#,
                frame.px(xa),
                frame.py((a + b * xa).clamp(frame.y0, frame.y1)),
                frame.px(xb),
                frame.py((a + b * xb).clamp(frame.y0, frame.y1))
            );
        }
    }
    legend(
        &mut out,
        &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

fn least_squares(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if n < 2.0 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx < 1e-15 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Heatmap of a square count matrix with a summary row beneath it.
pub fn heatmap(title: &str, labels: &[String], cells: &[Vec<u32>], summary: &[f64]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let k = labels.len().max(1);
    let size = ((H - TOP - BOTTOM - 30.0) / (k as f64 + 1.0)).min((W - 2.0 * LEFT) / k as f64);
    let x0 = (W - size * k as f64) / 2.0 + 30.0;
    let y0 = TOP + 20.0;
    let max = cells.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for (i, row) in cells.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y0 + size * (i as f64 + 0.5) + 4.0,
            esc(&labels[i])
        );
        for (j, v) in row.iter().enumerate() {
            let shade = 255 - (*v as f64 / max * 200.0).round() as u8;
            let _ = writeln!(
                out,
                r##"<rect x="{:.1}" y="{:.1}" width="{size:.1}" height="{size:.1}" fill="rgb({shade},{shade},255)" stroke="#999"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{v}</text>"##,
                x0 + size * j as f64,
                y0 + size * i as f64,
                x0 + size * (j as f64 + 0.5),
                y0 + size * (i as f64 + 0.5) + 4.0
            );
        }
    }
    let ys = y0 + size * k as f64 + 4.0;
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">mean</text>"#,
        x0 - 6.0,
        ys + size * 0.5 + 4.0
    );
    for (j, v) in summary.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text>"#,
            x0 + size * (j as f64 + 0.5),
            ys + size * 0.5 + 4.0
        );
    }
    for (j, l) in labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + size * (j as f64 + 0.5),
            y0 - 6.0,
            esc(l)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed_and_stable() {
        let s = vec![Series {
            label: "a<b".into(),
            points: vec![(0.0, 0.1), (10.0, 0.5)],
            errors: Some(vec![0.0, 0.05]),
        }];
        let a = line_chart("t", "x", "y", &s);
        assert_eq!(a, line_chart("t", "x", "y", &s));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("a&lt;b"));
        let h = heatmap(
            "w",
            &["p".into(), "q".into()],
            &[vec![0, 2], vec![1, 0]],
            &[1.0, 2.0],
        );
        assert!(h.contains(">mean<"));
        let sc = scatter("s", "x", "y", &s);
        assert!(sc.contains("stroke-dasharray"));
        assert!(line_chart("empty", "x", "y", &[]).contains("</svg>"));
    }

    #[test]
    fn least_squares_line() {
        let (a, b) = least_squares(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12);
        assert!(least_squares(&[(1.0, 1.0), (1.0, 2.0)]).is_none());
    }
}
