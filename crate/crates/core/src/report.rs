//! Report emission: evaluation records as CSV (fixed 6-decimal floats),
//! hand-rolled SVG line charts, loss curves and run manifests.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One evaluation row; the CSV schema is
/// `schedule,decoder,channel,snr_db,psnr_db,ms_ssim,seed,snapshot`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub schedule: String,
    pub decoder: String,
    pub channel: String,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
    pub seed: u64,
    pub snapshot: String,
}

pub const EVAL_CSV_HEADER: &str = "schedule,decoder,channel,snr_db,psnr_db,ms_ssim,seed,snapshot";

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.schedule,
            r.decoder,
            r.channel,
            fmt6(r.snr_db),
            fmt6(r.psnr_db),
            fmt6(r.ms_ssim),
            r.seed,
            r.snapshot
        );
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EVAL_CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: "<records csv>".into(),
                offset: 0,
                msg: format!("bad header {other:?}"),
            })
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Parse {
                path: "<records csv>".into(),
                offset: i + 2,
                msg: format!("expected 8 fields, got {}", parts.len()),
            });
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Parse {
                path: "<records csv>".into(),
                offset: i + 2,
                msg: format!("bad {what} `{s}`"),
            })
        };
        records.push(EvalRecord {
            schedule: parts[0].to_string(),
            decoder: parts[1].to_string(),
            channel: parts[2].to_string(),
            snr_db: parse_f(parts[3], "snr_db")?,
            psnr_db: parse_f(parts[4], "psnr_db")?,
            ms_ssim: parse_f(parts[5], "ms_ssim")?,
            seed: parts[6].parse().map_err(|_| Error::Parse {
                path: "<records csv>".into(),
                offset: i + 2,
                msg: format!("bad seed `{}`", parts[6]),
            })?,
            snapshot: parts[7].to_string(),
        });
    }
    Ok(records)
}

/// Per-epoch loss rows: `schedule,stage,epoch,loss`.
pub fn loss_curve_csv(rows: &[(String, String, usize, f64)]) -> String {
    let mut out = String::from("schedule,stage,epoch,loss\n");
    for (schedule, stage, epoch, loss) in rows {
        let _ = writeln!(out, "{schedule},{stage},{epoch},{}", fmt6(*loss));
    }
    out
}

/// Pivot eval records from several runs into one comparison table:
/// rows are (decoder, snr), one value column pair per schedule, plus
/// best-schedule marker columns.
pub fn compare_csv(runs: &[(String, Vec<EvalRecord>)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Incompatible("nothing to compare".into()));
    }
    // collect the (decoder, snr, channel) grid from the first run
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for r in &runs[0].1 {
        let key = (r.decoder.clone(), r.channel.clone(), r.snr_db);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    for (name, records) in runs.iter().skip(1) {
        let mine: Vec<(String, String, f64)> = records
            .iter()
            .map(|r| (r.decoder.clone(), r.channel.clone(), r.snr_db))
            .collect();
        for key in &keys {
            if !mine.contains(key) {
                return Err(Error::Incompatible(format!(
                    "run `{name}` is missing decoder {} at {} dB",
                    key.0, key.2
                )));
            }
        }
    }

    let mut out = String::from("decoder,channel,snr_db");
    for (name, _) in runs {
        let _ = write!(out, ",{name}_psnr_db,{name}_ms_ssim");
    }
    out.push_str(",best_psnr,best_ms_ssim\n");

    for (decoder, channel, snr) in &keys {
        let _ = write!(out, "{decoder},{channel},{}", fmt6(*snr));
        let mut best_psnr = (f64::NEG_INFINITY, "");
        let mut best_ms = (f64::NEG_INFINITY, "");
        let mut cells = String::new();
        for (name, records) in runs {
            let rec = records
                .iter()
                .find(|r| &r.decoder == decoder && &r.channel == channel && r.snr_db == *snr)
                .expect("checked above");
            let _ = write!(cells, ",{},{}", fmt6(rec.psnr_db), fmt6(rec.ms_ssim));
            if rec.psnr_db > best_psnr.0 {
                best_psnr = (rec.psnr_db, name);
            }
            if rec.ms_ssim > best_ms.0 {
                best_ms = (rec.ms_ssim, name);
            }
        }
        out.push_str(&cells);
        let _ = writeln!(out, ",{},{}", best_psnr.1, best_ms.1);
    }
    Ok(out)
}

// ---- SVG ---------------------------------------------------------------------

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Minimal line chart: axes, ticks, one polyline per series, a legend.
/// Deterministic output for fixed input.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (width, height) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (64.0, 150.0, 40.0, 48.0);
    let plot_w = width - ml - mr;
    let plot_h = height - mt - mb;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = (y_max - y_min) * 0.08;
    let (y_min, y_max) = (y_min - pad, y_max + pad);

    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| mt + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        ml + plot_w / 2.0,
        title
    );
    // axes
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>",
        mt + plot_h
    );
    // ticks
    for i in 0..=4 {
        let xv = x_min + (x_max - x_min) * i as f64 / 4.0;
        let yv = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{y1}\" stroke=\"black\"/>\
             <text x=\"{x}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{lbl:.1}</text>",
            x = sx(xv),
            y0 = mt + plot_h,
            y1 = mt + plot_h + 5.0,
            ty = mt + plot_h + 18.0,
            lbl = xv
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{x1}\" y2=\"{y}\" stroke=\"black\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{lbl:.2}</text>",
            x0 = ml - 5.0,
            x1 = ml,
            y = sy(yv),
            tx = ml - 8.0,
            ty = sy(yv) + 4.0,
            lbl = yv
        );
    }
    // axis labels
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        ml + plot_w / 2.0,
        height - 10.0,
        x_label
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0,
        y_label
    );
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = String::new();
        for &(x, y) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} ", sx(x), sy(y));
        }
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.trim_end()
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        // legend
        let ly = mt + 12.0 + i as f64 * 18.0;
        let lx = ml + plot_w + 12.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write a string to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
