//! A minimal line/scatter SVG emitter.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 48.0;

pub const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

enum Mark {
    Line { pts: Vec<(f64, f64)>, color: String, width: f64 },
    Dots { pts: Vec<(f64, f64)>, color: String, r: f64 },
}

pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    marks: Vec<Mark>,
    legend: Vec<(String, String)>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            marks: Vec::new(),
            legend: Vec::new(),
        }
    }

    pub fn line(&mut self, pts: Vec<(f64, f64)>, color: &str, width: f64) -> &mut Self {
        self.marks.push(Mark::Line {
            pts,
            color: color.into(),
            width,
        });
        self
    }

    pub fn dots(&mut self, pts: Vec<(f64, f64)>, color: &str, r: f64) -> &mut Self {
        self.marks.push(Mark::Dots { pts, color: color.into(), r });
        self
    }

    pub fn legend(&mut self, label: &str, color: &str) -> &mut Self {
        self.legend.push((label.into(), color.into()));
        self
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for m in &self.marks {
            let pts = match m {
                Mark::Line { pts, .. } | Mark::Dots { pts, .. } => pts,
            };
            for &(x, y) in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
            }
        }
        if !b.0.is_finite() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let widen = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let (x0, x1) = widen(b.0, b.1);
        let (y0, y1) = widen(b.2, b.3);
        (x0, x1, y0, y1)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#, W / 2.0, H - 8.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, H - PAD + 14.0, tick(v));
        }
        for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
            let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="10">{}</text>"#, PAD - 4.0, tick(v));
        }
        for m in &self.marks {
            match m {
                Mark::Line { pts, color, width } => {
                    let path: Vec<String> = pts
                        .iter()
                        .filter(|p| p.0.is_finite() && p.1.is_finite())
                        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(
                        s,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#,
                        path.join(" ")
                    );
                }
                Mark::Dots { pts, color, r } => {
                    for &(x, y) in pts.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{color}"/>"#, sx(x), sy(y));
                    }
                }
            }
        }
        for (k, (label, color)) in self.legend.iter().enumerate() {
            let y = PAD + 16.0 + 16.0 * k as f64;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - PAD - 140.0, y - 9.0);
            let _ = writeln!(s, r#"<text x="{}" y="{y}" font-size="11">{}</text>"#, W - PAD - 124.0, escape(label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
