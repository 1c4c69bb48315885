//! Minimal static SVG line charts for the benchmark and robustness curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn nice_num(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Render series as an SVG line chart. `log_axes` plots log10 of both
/// coordinates (all values must then be positive).
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    log_axes: bool,
) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::arg("nothing to plot"));
    }
    let transform = |v: f64| -> Result<f64> {
        if log_axes {
            if v <= 0.0 {
                return Err(Error::arg(format!(
                    "log axis needs positive values, got {v}"
                )));
            }
            Ok(v.log10())
        } else {
            Ok(v)
        }
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(transform(x)?);
            ys.push(transform(y)?);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min).max(1e-12) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| {
        HEIGHT - MARGIN - (y - y_min) / (y_max - y_min).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    };

    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )?;
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16" font-family="sans-serif">{title}</text>"#,
        WIDTH / 2.0
    )?;
    writeln!(
        out,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    )?;
    let (x_lo, x_hi, y_lo, y_hi) = if log_axes {
        (
            10f64.powf(x_min),
            10f64.powf(x_max),
            10f64.powf(y_min),
            10f64.powf(y_max),
        )
    } else {
        (x_min, x_max, y_min, y_max)
    };
    writeln!(
        out,
        r#"<text x="{m}" y="{b}" font-size="11" font-family="sans-serif">{}</text><text x="{r}" y="{b}" text-anchor="end" font-size="11" font-family="sans-serif">{}</text>"#,
        nice_num(x_lo),
        nice_num(x_hi),
        m = MARGIN,
        b = HEIGHT - MARGIN + 16.0,
        r = WIDTH - MARGIN
    )?;
    writeln!(
        out,
        r#"<text x="{x}" y="{b}" text-anchor="end" font-size="11" font-family="sans-serif">{}</text><text x="{x}" y="{t}" text-anchor="end" font-size="11" font-family="sans-serif">{}</text>"#,
        nice_num(y_lo),
        nice_num(y_hi),
        x = MARGIN - 6.0,
        b = HEIGHT - MARGIN,
        t = MARGIN + 10.0
    )?;
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0
    )?;
    writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="13" font-family="sans-serif" transform="rotate(-90 16 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    )?;

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let (tx, ty) = (transform(x).unwrap(), transform(y).unwrap());
                format!("{:.2},{:.2}", sx(tx), sy(ty))
            })
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )?;
        for p in &pts {
            let mut it = p.split(',');
            let (cx, cy) = (it.next().unwrap(), it.next().unwrap());
            writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#)?;
        }
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(
            out,
            r#"<rect x="{x}" y="{y}" width="12" height="3" fill="{color}"/><text x="{tx}" y="{ty}" font-size="12" font-family="sans-serif">{}</text>"#,
            s.label,
            x = WIDTH - MARGIN - 150.0,
            y = ly - 4.0,
            tx = WIDTH - MARGIN - 132.0,
            ty = ly
        )?;
    }
    writeln!(out, "</svg>")?;
    out.flush()?;
    Ok(())
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn renders_valid_svg() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.svg");
        line_chart(
            &path,
            "times",
            "tokens",
            "ms",
            &[
                Series {
                    label: "full".into(),
                    points: vec![(100.0, 1.0), (400.0, 16.0), (1600.0, 256.0)],
                },
                Series {
                    label: "band".into(),
                    points: vec![(100.0, 1.0), (400.0, 4.0), (1600.0, 16.0)],
                },
            ],
            true,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("polyline"));
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn log_axes_reject_nonpositive() {
        let dir = tempdir().unwrap();
        let err = line_chart(
            &dir.path().join("bad.svg"),
            "t",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: vec![(0.0, 1.0)],
            }],
            true,
        );
        assert!(err.is_err());
    }
}
