//! Fixed-bin error histogram as CSV and a static SVG bar chart.

use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal bins over `[0, max]`; the maximum lands in the last bin.
    pub fn new(values: &[f64], bins: usize) -> Self {
        let max = values.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1e-3 };
        let mut counts = vec![0; bins];
        for &v in values {
            let b = ((v / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { lo: 0.0, width, counts }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let a = self.lo + i as f64 * self.width;
            let _ = writeln!(out, "{},{},{}", a, a + self.width, c);
        }
        out
    }

    pub fn to_svg(&self, title: &str, x_label: &str) -> String {
        let (w, h) = (640.0, 360.0);
        let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
        let plot_w = w - left - right;
        let plot_h = h - top - bottom;
        let peak = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bar = plot_w / self.counts.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
        for (i, &c) in self.counts.iter().enumerate() {
            let bh = plot_h * c as f64 / peak;
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4477aa" stroke="white"/>"##,
                left + i as f64 * bar,
                top + plot_h - bh,
                bar,
                bh
            );
        }
        let (x0, y0) = (left, top + plot_h);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, left + plot_w);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{top}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
        let hi = self.lo + self.width * self.counts.len() as f64;
        let _ = writeln!(s, r#"<text x="{x0}" y="{}" text-anchor="middle">{:.4}</text>"#, y0 + 16.0, self.lo);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.4}</text>"#, left + plot_w, y0 + 16.0, hi);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + plot_w / 2.0, h - 12.0, escape(x_label));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, top + 4.0, peak);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, left - 6.0, y0);
        s.push_str("</svg>\n");
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
