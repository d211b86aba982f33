//! Figure data from a run directory: CSV series and native SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers only, no connecting line.
    pub scatter: bool,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

/// A self-contained SVG line chart.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), b + 16.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, sy(yv) + 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if ser.scatter {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sx(x), sy(y));
            }
        } else if !ser.points.is_empty() {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.2"/>"#, pts.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            r - 120.0,
            t + 14.0 * (i as f64 + 1.0),
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Columns of a CSV file by header name; empty cells become `None`.
pub fn read_columns(path: &Path, wanted: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !headers.iter().any(|h| h == *w)).collect();
    if !missing.is_empty() {
        return Err(Error::Invalid(format!("{} lacks columns: {}", path.display(), missing.join(", "))));
    }
    let idx: Vec<usize> = wanted.iter().map(|w| headers.iter().position(|h| h == *w).expect("checked")).collect();
    let mut cols = vec![Vec::new(); wanted.len()];
    for rec in r.records() {
        let rec = rec?;
        for (c, &i) in idx.iter().enumerate() {
            let cell = rec.get(i).unwrap_or("");
            let v = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| Error::Invalid(format!("bad number `{cell}`: {e}")))?)
            };
            cols[c].push(v);
        }
    }
    Ok(cols)
}

fn write_series_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `loss.{csv,svg}`, `reward.{csv,svg}` (when rewards were logged)
/// and `inference.svg` (when `inference.csv` exists). A directory holding
/// only an inference comparison gets just the latter. Returns the files
/// written.
pub fn plot_emit(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let metrics = run_dir.join("metrics.csv");
    if !metrics.exists() && run_dir.join("inference.csv").exists() {
        return Ok(plot_inference(run_dir)?.into_iter().collect());
    }
    let cols = read_columns(&metrics, &["step", "loss", "smoothed_loss", "reward_mean", "reward_std"])?;
    let rows: Vec<usize> = (0..cols[0].len()).filter(|&i| cols[1][i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{} has no training rows", metrics.display())));
    }
    let mut written = Vec::new();
    let get = |c: usize, i: usize| cols[c][i].unwrap_or(f64::NAN);

    let loss_rows: Vec<Vec<f64>> = rows.iter().map(|&i| vec![get(0, i), get(1, i), get(2, i)]).collect();
    let p = run_dir.join("loss.csv");
    write_series_csv(&p, &["step", "loss", "smoothed_loss"], &loss_rows)?;
    written.push(p);
    let series = vec![
        Series {
            name: "loss".into(),
            points: loss_rows.iter().map(|r| (r[0], r[1])).collect(),
            scatter: false,
        },
        Series {
            name: "smoothed".into(),
            points: loss_rows.iter().map(|r| (r[0], r[2])).collect(),
            scatter: false,
        },
    ];
    let p = run_dir.join("loss.svg");
    write(&p, &line_plot("Fine-tuning loss", "step", "loss", &series))?;
    written.push(p);

    let reward_rows: Vec<Vec<f64>> = rows
        .iter()
        .filter(|&&i| cols[3][i].is_some())
        .map(|&i| vec![get(0, i), get(3, i), get(4, i)])
        .collect();
    if !reward_rows.is_empty() {
        let p = run_dir.join("reward.csv");
        write_series_csv(&p, &["step", "reward_mean", "reward_std"], &reward_rows)?;
        written.push(p);
        let band = |sign: f64| reward_rows.iter().map(|r| (r[0], r[1] + sign * r[2])).collect();
        let series = vec![
            Series {
                name: "mean".into(),
                points: reward_rows.iter().map(|r| (r[0], r[1])).collect(),
                scatter: false,
            },
            Series {
                name: "mean + std".into(),
                points: band(1.0),
                scatter: false,
            },
            Series {
                name: "mean - std".into(),
                points: band(-1.0),
                scatter: false,
            },
        ];
        let p = run_dir.join("reward.svg");
        write(&p, &line_plot("Reward curve", "step", "aggregate reward", &series))?;
        written.push(p);
    }

    written.extend(plot_inference(run_dir)?);
    Ok(written)
}

/// `inference.svg`: reward against NFE per sample for best-of-n search and
/// the sharpened model, from `inference.csv`.
pub fn plot_inference(run_dir: &Path) -> Result<Option<PathBuf>> {
    let inference = run_dir.join("inference.csv");
    if !inference.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&inference)?;
    let mut search = Vec::new();
    let mut sharpened = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let point = (parse(2), parse(3));
        if rec.get(0) == Some("sharpened") {
            sharpened.push(point);
        } else {
            search.push(point);
        }
    }
    let series = vec![
        Series {
            name: "best-of-n (base)".into(),
            points: search,
            scatter: false,
        },
        Series {
            name: "sharpened".into(),
            points: sharpened,
            scatter: true,
        },
    ];
    let p = run_dir.join("inference.svg");
    write(&p, &line_plot("Inference performance", "NFE per sample", "mean reward", &series))?;
    Ok(Some(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_contains_every_series() {
        let s = vec![
            Series {
                name: "a<b".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0)],
                scatter: false,
            },
            Series {
                name: "pts".into(),
                points: vec![(0.5, 1.5)],
                scatter: true,
            },
        ];
        let svg = line_plot("t", "x", "y", &s);
        assert!(svg.contains("<polyline") && svg.contains("<circle") && svg.contains("a&lt;b"));
    }

    #[test]
    fn missing_or_empty_metrics() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("metrics.csv"), "step,loss\n").unwrap();
        let err = plot_emit(dir.path()).unwrap_err().to_string();
        assert!(err.contains("smoothed_loss") && err.contains("reward_std"), "{err}");
        std::fs::write(dir.path().join("metrics.csv"), "step,loss,smoothed_loss,reward_mean,reward_std\n").unwrap();
        assert!(plot_emit(dir.path()).is_err());
    }
}
