//! Line charts of metric curves (two-column CSVs) as SVG or PNG.

use std::fmt::Write;
use std::path::Path;

use structpose::imaging::Image;

use crate::error::{CliError, CliResult};
use crate::manifest::write_atomic;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads the first two columns of a CSV with a header row. Returns the
/// axis names and the points.
pub fn read_curve(text: &str) -> CliResult<((String, String), Vec<(f64, f64)>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| CliError::usage("empty curve file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 {
        return Err(CliError::usage("curve CSV needs two columns"));
    }
    let mut pts = Vec::new();
    for (n, l) in lines.enumerate() {
        let f: Vec<&str> = l.split(',').collect();
        let parse = |i: usize| -> CliResult<f64> {
            f.get(i)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| CliError::usage(format!("curve row {}: expected two numbers", n + 2)))
        };
        pts.push((parse(0)?, parse(1)?));
    }
    Ok(((cols[0].to_string(), cols[1].to_string()), pts))
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(series: &[Series]) -> Frame {
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !(x1 > x0) {
            (x0, x1) = (x0.min(0.0), x0.max(0.0) + 1.0);
        }
        if !(y1 > y0) {
            y1 = y0 + 1.0;
        }
        Frame { x: (x0, x1), y: (y0, y1) }
    }

    fn map(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN);
        let py = H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN);
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(series: &[Series], axes: &(String, String), title: &str) -> String {
    let f = Frame::fit(series);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, b) = (MARGIN, H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {m} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        r = W - MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.0 + t * (f.x.1 - f.x.0);
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let (px, _) = f.map((xv, f.y.0));
        let (_, py) = f.map((f.x.0, yv));
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" font-size="11" text-anchor="middle">{xv:.3}</text>"#, b + 16.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{yv:.3}</text>"#, l - 6.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, escape(&axes.0));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(&axes.1)
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="28" font-size="15" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&p| {
                let (x, y) = f.map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="rgb({},{},{})" stroke-width="2"/>"#,
            pts.join(" "),
            c[0],
            c[1],
            c[2]
        );
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="12" fill="rgb({},{},{})">{}</text>"#,
            W - MARGIN - 150.0,
            c[0],
            c[1],
            c[2],
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Raster version: axes and curves only (no text).
pub fn render_png(series: &[Series]) -> Image {
    let f = Frame::fit(series);
    let mut img = Image::new(W as usize, H as usize);
    img.data.iter_mut().for_each(|v| *v = 1.0);
    let black = [0.0; 3];
    img.stroke([MARGIN, MARGIN], [MARGIN, H - MARGIN], 0.7, black);
    img.stroke([MARGIN, H - MARGIN], [W - MARGIN, H - MARGIN], 0.7, black);
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()].map(|v| v as f32 / 255.0);
        for w in ser.points.windows(2) {
            let (a, b) = (f.map(w[0]), f.map(w[1]));
            img.stroke([a.0, a.1], [b.0, b.1], 1.2, c);
        }
    }
    img
}

/// Writes `series` to `out`; the extension picks the format.
pub fn write_plot(series: &[Series], axes: &(String, String), title: &str, out: &Path) -> CliResult<()> {
    match out.extension().and_then(|e| e.to_str()) {
        Some("svg") => write_atomic(out, render_svg(series, axes, title).as_bytes()),
        Some("png") => {
            let tmp = out.with_extension("png.tmp");
            render_png(series).save_png(&tmp)?;
            std::fs::rename(&tmp, out).map_err(|e| CliError::io(out.display().to_string(), e))
        }
        _ => Err(CliError::usage("plot output must end in .svg or .png")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_metric_curves() {
        let ((x, y), pts) = read_curve("threshold,rate\n0,0\n0.5,1\n").unwrap();
        assert_eq!((x.as_str(), y.as_str()), ("threshold", "rate"));
        assert_eq!(pts, vec![(0.0, 0.0), (0.5, 1.0)]);
        assert!(read_curve("threshold,rate\n0,zero\n").is_err());
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = |l: &str| Series {
            label: l.into(),
            points: vec![(0.0, 0.0), (1.0, 1.0)],
        };
        let svg = render_svg(&[s("a"), s("b<")], &("x".into(), "y".into()), "t");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;"));
    }
}
