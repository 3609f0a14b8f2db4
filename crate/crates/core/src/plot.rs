//! Deterministic SVG line charts. Output depends only on the plotted numbers,
//! so regenerating from the same CSV files is byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::amendment::alpha;
use crate::error::{Error, Result};
use crate::textio;
use crate::theory::phi;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// The exponents shown in the weight-function family plot.
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Linear,
    Log10,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: Scale,
    pub series: Vec<Series>,
}

/// Shortest decimal form with at most 4 significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let s = format!("{:.4}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        s.to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

impl Chart {
    fn x_of(&self, x: f64) -> f64 {
        match self.x_scale {
            Scale::Linear => x,
            Scale::Log10 => x.log10(),
        }
    }

    pub fn to_svg(&self) -> Result<String> {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|&(x, y)| (self.x_of(x), y)))
            .collect();
        if pts.is_empty() {
            return Err(Error::invalid(format!(
                "chart {:?} has no points",
                self.title
            )));
        }
        if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite(format!(
                "chart {:?} has a non-finite point",
                self.title
            )));
        }
        let (mut x0, mut x1) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.0), b.max(p.0))
            });
        let (mut y0, mut y1) = pts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                (a.min(p.1), b.max(p.1))
            });
        if x1 == x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 == y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(
            s,
            r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let xl = match self.x_scale {
                Scale::Linear => tick_label(xv),
                Scale::Log10 => tick_label(10f64.powf(xv)),
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xl}</text>"#,
                sx(xv),
                TOP + ph + 18.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                sy(yv) + 4.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(self.x_of(x)), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
            let ly = TOP + 14.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
                lx + 20.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                lx + 26.0,
                ly + 4.0,
                escape(&series.name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

/// `α(t)` on `t ∈ [0, horizon]` for each exponent in `grid`.
pub fn alpha_chart(grid: &[f64], horizon: usize, samples: usize) -> Result<Chart> {
    let series = grid
        .iter()
        .map(|&a| {
            let points = (0..=samples)
                .map(|i| {
                    let t = i * horizon / samples;
                    Ok((t as f64, alpha(t, a, horizon)?))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Series {
                name: format!("a = {}", tick_label(a)),
                points,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Chart {
        title: "Weight function α(t)".into(),
        x_label: "t".into(),
        y_label: "α(t)".into(),
        x_scale: Scale::Linear,
        series,
    })
}

/// `φ(a)` on a log-spaced grid over `[lo, hi]`.
pub fn phi_chart(lo: f64, hi: f64, samples: usize) -> Result<Chart> {
    if !(lo > 0.0 && hi > lo) || samples < 2 {
        return Err(Error::invalid(
            "phi chart needs 0 < lo < hi and at least 2 samples",
        ));
    }
    let points = (0..samples)
        .map(|i| {
            let a = 10f64
                .powf(lo.log10() + (hi.log10() - lo.log10()) * i as f64 / (samples - 1) as f64);
            Ok((a, phi(a)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Chart {
        title: "Bound factor φ(a)".into(),
        x_label: "a".into(),
        y_label: "φ(a)".into(),
        x_scale: Scale::Log10,
        series: vec![Series {
            name: "φ(a)".into(),
            points,
        }],
    })
}

/// Reads a headered numeric CSV into columns.
pub fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let p = path.display().to_string();
    let text = textio::read(path)?;
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) => h.split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(Error::parse(&p, 1, "empty CSV")),
    };
    let mut cols = vec![Vec::new(); header.len()];
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::parse(
                &p,
                i + 1,
                format!("expected {} columns, got {}", header.len(), cells.len()),
            ));
        }
        for (c, v) in cols.iter_mut().zip(cells) {
            c.push(textio::parse_f64(v, &p, i + 1)?);
        }
    }
    Ok((header, cols))
}

fn csv_chart(path: &Path, title: &str, x_scale: Scale) -> Result<Chart> {
    let (header, cols) = read_csv_columns(path)?;
    if header.len() < 2 {
        return Err(Error::invalid(format!(
            "{}: need at least two columns",
            path.display()
        )));
    }
    let series = (1..header.len())
        .map(|j| Series {
            name: header[j].clone(),
            points: cols[0]
                .iter()
                .copied()
                .zip(cols[j].iter().copied())
                .collect(),
        })
        .collect();
    Ok(Chart {
        title: title.into(),
        x_label: header[0].clone(),
        y_label: "value".into(),
        x_scale,
        series,
    })
}

pub fn confidence_chart(path: &Path) -> Result<Chart> {
    let mut c = csv_chart(
        path,
        "Mean confidence of synthesized samples",
        Scale::Linear,
    )?;
    c.y_label = "max softmax probability".into();
    Ok(c)
}

/// Writes `alpha.svg` and `phi.svg`, plus `confidence.svg` from
/// `confidence.csv` (required) and ablation plots from `ablation_a.csv` /
/// `ablation_t.csv` when present. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let conf = dir.join("confidence.csv");
    if !conf.is_file() {
        return Err(Error::invalid(format!("missing {}", conf.display())));
    }
    let mut charts = vec![
        ("alpha.svg", alpha_chart(&ALPHA_GRID, 1000, 200)?),
        ("phi.svg", phi_chart(0.1, 100.0, 61)?),
        ("confidence.svg", confidence_chart(&conf)?),
    ];
    for (csv, svg, title, scale) in [
        (
            "ablation_a.csv",
            "ablation_a.svg",
            "CA AUROC against a",
            Scale::Linear,
        ),
        (
            "ablation_t.csv",
            "ablation_t.svg",
            "CA AUROC against T",
            Scale::Linear,
        ),
    ] {
        let p = dir.join(csv);
        if p.is_file() {
            let mut c = csv_chart(&p, title, scale)?;
            c.y_label = "AUROC".into();
            charts.push((svg, c));
        }
    }
    let mut written = Vec::new();
    for (name, chart) in charts {
        let path = dir.join(name);
        textio::write(&path, &chart.to_svg()?)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_chart_has_one_polyline_per_exponent() {
        let svg = alpha_chart(&ALPHA_GRID, 1000, 50)
            .unwrap()
            .to_svg()
            .unwrap();
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn tick_labels() {
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(100.0), "100");
        assert_eq!(tick_label(0.0), "0");
    }

    #[test]
    fn empty_chart_rejected() {
        let c = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x_scale: Scale::Linear,
            series: vec![],
        };
        assert!(c.to_svg().is_err());
    }

    #[test]
    fn missing_confidence_csv_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let e = emit_plots(dir.path()).unwrap_err().to_string();
        assert!(e.contains("confidence.csv"), "{e}");
    }
}
