//! CSV and SVG output for convergence rows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::study::ConvergenceRow;

pub const CSV_HEADER: &str =
    "level,n,h_max,ndof,err_d_linf,err_J_linf,err_u_l2,err_J_l2,ERR_e,E_d,E_d_dt,E_J,E_up,eta_time,eta_ok,I_eff";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no rows to report")]
    Empty,
    #[error("rows disagree on whether eta_data is present")]
    MixedEtaData,
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(format!("unknown format `{other}` (expected csv or svg)")),
        }
    }
}

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

/// One header line and one line per row. An `eta_data` column is appended
/// when the rows carry it.
pub fn render_csv(rows: &[ConvergenceRow]) -> Result<String, ReportError> {
    let first = rows.first().ok_or(ReportError::Empty)?;
    let with_data = first.eta_data.is_some();
    if rows.iter().any(|r| r.eta_data.is_some() != with_data) {
        return Err(ReportError::MixedEtaData);
    }
    let mut out = String::from(CSV_HEADER);
    if with_data {
        out.push_str(",eta_data");
    }
    out.push('\n');
    for r in rows {
        let mut fields = vec![
            r.level.to_string(),
            r.n.to_string(),
            real(r.h_max),
            r.ndof.to_string(),
        ];
        fields.extend(
            [
                r.err_d_linf,
                r.err_j_linf,
                r.err_u_l2,
                r.err_j_l2,
                r.err_e,
                r.e_d,
                r.e_d_dt,
                r.e_j,
                r.e_up,
                r.eta_time,
                r.eta_ok,
                r.i_eff,
            ]
            .map(real),
        );
        if let Some(v) = r.eta_data {
            fields.push(real(v));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

type Series = (&'static str, &'static str, fn(&ConvergenceRow) -> f64);

pub const SVG_SERIES: [Series; 6] = [
    ("ERR_e", "#000000", |r| r.err_e),
    ("eta_ok", "#d62728", |r| r.eta_ok),
    ("E_d", "#1f77b4", |r| r.e_d),
    ("E_d_dt", "#2ca02c", |r| r.e_d_dt),
    ("E_J", "#9467bd", |r| r.e_j),
    ("E_up", "#ff7f0e", |r| r.e_up),
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const LEGEND: f64 = 110.0;

fn log_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(f64::log10)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Log-log chart of the squared quantities against `h_max`. Non-positive
/// values have no logarithm and are left out of their polyline.
pub fn render_svg(rows: &[ConvergenceRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let (x0, x1) = log_range(rows.iter().map(|r| r.h_max));
    let (y0, y1) = log_range(
        rows.iter()
            .flat_map(|r| SVG_SERIES.iter().map(move |s| (s.2)(r))),
    );
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let px = |h: f64| MARGIN + (h.log10() - x0) / (x1 - x0) * plot_w;
    let py = |v: f64| HEIGHT - MARGIN - (v.log10() - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for e in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="#cccccc"/>
<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{e}</text>"##,
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 18.0
        );
    }
    for e in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(e));
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#cccccc"/>
<text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            MARGIN + plot_w,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">h</text>"#,
        MARGIN + plot_w / 2.0,
        HEIGHT - 15.0
    );
    for (k, (name, color, q)) in SVG_SERIES.iter().enumerate() {
        let points: Vec<String> = rows
            .iter()
            .filter(|r| q(r) > 0.0 && q(r).is_finite())
            .map(|r| format!("{:.2},{:.2}", px(r.h_max), py(q(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * k as f64 + 8.0;
        let lx = WIDTH - MARGIN - LEGEND + 20.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>
<text x="{:.2}" y="{:.2}">{name}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_report(
    rows: &[ConvergenceRow],
    path: &Path,
    format: ReportFormat,
) -> Result<(), ReportError> {
    let text = match format {
        ReportFormat::Csv => render_csv(rows)?,
        ReportFormat::Svg => render_svg(rows)?,
    };
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_rows() -> Vec<ConvergenceRow> {
        (0..3)
            .map(|l| {
                let h = 0.25 / (1 << l) as f64;
                let q = h.powi(4);
                ConvergenceRow {
                    level: l,
                    n: 4 << l,
                    h_max: h,
                    ndof: 100 << (2 * l),
                    err_d_linf: q,
                    err_j_linf: q,
                    err_u_l2: q,
                    err_j_l2: q,
                    err_e: 4.0 * q,
                    e_d: 10.0 * q,
                    e_d_dt: 0.0,
                    e_j: 20.0 * q,
                    e_up: 30.0 * q,
                    eta_time: 1e-18,
                    eta_ok: 60.0 * q,
                    i_eff: 15.0,
                    eta_data: None,
                    div_u_l2: 0.0,
                    max_galerkin_residual: 0.0,
                    max_solver_residual: 0.0,
                    wall_time: 0.1 * l as f64,
                }
            })
            .collect()
    }

    #[test]
    fn csv_has_sixteen_columns() {
        let csv = render_csv(&sample_rows()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 16));
    }

    #[test]
    fn eta_data_adds_a_column() {
        let mut rows = sample_rows();
        rows.iter_mut().for_each(|r| r.eta_data = Some(1e-9));
        let csv = render_csv(&rows).unwrap();
        assert!(csv.lines().next().unwrap().ends_with(",I_eff,eta_data"));
        assert!(csv.lines().all(|l| l.split(',').count() == 17));
        rows[1].eta_data = None;
        assert!(matches!(render_csv(&rows), Err(ReportError::MixedEtaData)));
    }

    #[test]
    fn empty_rows_are_rejected() {
        assert!(matches!(render_csv(&[]), Err(ReportError::Empty)));
        assert!(matches!(render_svg(&[]), Err(ReportError::Empty)));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let svg = render_svg(&sample_rows()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), SVG_SERIES.len());
        // E_d_dt is identically zero here, so its polyline has no points
        assert!(svg.contains(r##"data-series="E_d_dt" fill="none" stroke="#2ca02c" stroke-width="1.5" points="""##));
    }

    #[test]
    fn format_parsing() {
        assert_eq!("CSV".parse::<ReportFormat>().unwrap(), ReportFormat::Csv);
        assert_eq!("svg".parse::<ReportFormat>().unwrap(), ReportFormat::Svg);
        assert!("png".parse::<ReportFormat>().is_err());
    }
}
