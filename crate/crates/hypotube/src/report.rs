//! Deterministic CSV and SVG output.
//!
//! Numbers are written with 17 significant digits so CSVs are byte-stable
//! across runs and round-trip f64 exactly; plots use a fixed canvas and
//! carry no timestamps.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, TubeError};

/// 17-significant-digit decimal formatting (exact f64 round trip).
pub fn g17(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else if x.is_finite() {
        format!("{:.16e}", x)
    } else if x.is_nan() {
        "nan".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Csv {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.header.len(), "csv row arity mismatch");
        self.rows.push(cells);
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.header.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Write named tables (and optional plots) under `out_dir`; returns the
/// created paths.
pub fn write_report(tables: &[(String, String)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| TubeError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut paths = Vec::new();
    for (name, content) in tables {
        let path = out_dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| TubeError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(content.as_bytes()).map_err(|e| TubeError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

/// Ordinary least squares fit y = slope x + intercept with R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LinFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(TubeError::Domain("regression needs >= 2 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(TubeError::Domain("regression x values are constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LinFit {
        slope,
        intercept,
        r2,
    })
}

/// One plotted series: points plus optional symmetric error bars.
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    pub err: Option<Vec<f64>>,
}

/// Minimal deterministic SVG line/scatter plot (fixed 800x600 canvas).
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 600.0;
    const ML: f64 = 70.0;
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 50.0;
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (i, (x, y)) in s.points.iter().enumerate() {
            let e = s.err.as_ref().map(|e| e[i]).unwrap_or(0.0);
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(y - e);
            y1 = y1.max(y + e);
        }
    }
    if !x0.is_finite() || x1 <= x0 {
        x0 = 0.0;
        x1 = 1.0;
    }
    if !y0.is_finite() || y1 <= y0 {
        y0 = 0.0;
        y1 = 1.0;
    }
    let pad_y = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad_y, y1 + pad_y);
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        title
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{:.3}</text>\n",
            sx(fx),
            H - MB + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{:.3}</text>\n",
            ML - 6.0,
            sy(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        H - 12.0,
        x_label
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        y_label
    ));
    for (si, s) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(*x), sy(*y))
            })
            .collect();
        svg.push_str(&format!(
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        for (i, (x, y)) in s.points.iter().enumerate() {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(*x),
                sy(*y)
            ));
            if let Some(err) = &s.err {
                let e = err[i];
                if e > 0.0 {
                    svg.push_str(&format!(
                        "<line x1=\"{0:.2}\" y1=\"{1:.2}\" x2=\"{0:.2}\" y2=\"{2:.2}\" stroke=\"{color}\"/>\n",
                        sx(*x),
                        sy(y - e),
                        sy(y + e)
                    ));
                }
            }
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            W - MR - 150.0,
            MT + 16.0 * si as f64,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
