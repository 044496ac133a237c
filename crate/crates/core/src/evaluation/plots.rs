//! Plain SVG charts and PNG projection images.

use std::fmt::Write as _;
use std::path::Path;

use image::{GrayImage, Luma};

use super::metrics::Projection;
use super::stats::BlandAltmanStats;
use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 56.0;

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        let span = (hi - lo).max(1e-9);
        Self { lo: lo - 0.08 * span, hi: hi + 0.08 * span }
    }

    fn map(&self, v: f64, a: f64, b: f64) -> f64 {
        a + (v - self.lo) / (self.hi - self.lo) * (b - a)
    }
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_axis(s: &mut String, axis: &Axis, label: &str) {
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for k in 0..=4 {
        let v = axis.lo + (axis.hi - axis.lo) * k as f64 / 4.0;
        let y = axis.map(v, H - PAD, PAD);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{PAD}" y2="{y:.1}" stroke="black"/>"#, PAD - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, PAD - 6.0, y + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(14 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        H / 2.0,
        escape(label)
    );
}

fn gaussian_kde(values: &[f64], at: f64, h: f64) -> f64 {
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    values.iter().map(|v| (-0.5 * ((at - v) / h).powi(2)).exp()).sum::<f64>() * norm
}

/// One violin per group (Gaussian kernel density, Silverman bandwidth),
/// with the individual values drawn as dots.
pub fn violin_svg(groups: &[(String, Vec<f64>)], title: &str, y_label: &str) -> String {
    let axis = Axis::fit(groups.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut s = open(title);
    y_axis(&mut s, &axis, y_label);
    let slot = (W - 2.0 * PAD) / groups.len().max(1) as f64;
    for (gi, (name, values)) in groups.iter().enumerate() {
        let cx = PAD + slot * (gi as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{}" text-anchor="middle">{}</text>"#, H - PAD + 18.0, escape(name));
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        let h = if sd > 0.0 { 1.06 * sd * n.powf(-0.2) } else { (axis.hi - axis.lo) * 0.02 };
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let steps = 48;
        let pts: Vec<(f64, f64)> = (0..=steps)
            .map(|k| {
                let v = lo + (hi - lo) * k as f64 / steps as f64;
                (v, gaussian_kde(values, v, h))
            })
            .collect();
        let peak = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-12);
        let half = slot * 0.4;
        let mut d = String::new();
        for (k, (v, dens)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.1},{:.1} ", if k == 0 { "M" } else { "L" }, cx + dens / peak * half, axis.map(*v, H - PAD, PAD));
        }
        for (v, dens) in pts.iter().rev() {
            let _ = write!(d, "L{:.1},{:.1} ", cx - dens / peak * half, axis.map(*v, H - PAD, PAD));
        }
        let _ = writeln!(s, r##"<path d="{d}Z" fill="#9ecae1" stroke="#3182bd"/>"##);
        for v in values {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="black"/>"#, axis.map(*v, H - PAD, PAD));
        }
        let y = axis.map(mean, H - PAD, PAD);
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#de2d26" stroke-width="2"/>"##, cx - half / 2.0, cx + half / 2.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Difference against mean per pair, with the mean difference and the
/// limits of agreement as horizontal lines.
pub fn bland_altman_svg(stats: &BlandAltmanStats, title: &str, units: &str) -> String {
    let xa = Axis::fit(stats.points.iter().map(|p| p.0));
    let ya = Axis::fit(stats.points.iter().map(|p| p.1).chain([stats.loa_low, stats.loa_high]));
    let mut s = open(title);
    y_axis(&mut s, &ya, &format!("difference, pred - gt ({units})"));
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    for k in 0..=4 {
        let v = xa.lo + (xa.hi - xa.lo) * k as f64 / 4.0;
        let x = xa.map(v, PAD, W - PAD);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.3}</text>"#, H - PAD + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean of pair ({units})</text>"#, W / 2.0, H - 12.0);
    for (v, label, dash) in [
        (stats.mean_difference, "mean", ""),
        (stats.loa_high, "+1.96 SD", r#" stroke-dasharray="6 4""#),
        (stats.loa_low, "-1.96 SD", r#" stroke-dasharray="6 4""#),
    ] {
        let y = ya.map(v, H - PAD, PAD);
        let _ = writeln!(s, r##"<line x1="{PAD}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#de2d26"{dash}/>"##, W - PAD);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{label} {v:.3}</text>"#, W - PAD - 4.0, y - 4.0);
    }
    for (m, d) in &stats.points {
        let _ = writeln!(s, r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#3182bd"/>"##, xa.map(*m, PAD, W - PAD), ya.map(*d, H - PAD, PAD));
    }
    s.push_str("</svg>\n");
    s
}

/// Grayscale PNG of a projection, brightest at `max_value` (or the image
/// maximum when `None`).
pub fn write_projection_png(proj: &Projection, max_value: Option<u32>, path: impl AsRef<Path>) -> Result<()> {
    let peak = max_value.unwrap_or_else(|| proj.data.iter().copied().max().unwrap_or(0)).max(1);
    let img = GrayImage::from_fn(proj.shape[1] as u32, proj.shape[0] as u32, |c, r| {
        let v = proj.get(r as usize, c as usize).min(peak);
        Luma([(v as f64 / peak as f64 * 255.0).round() as u8])
    });
    img.save(path.as_ref())?;
    Ok(())
}
