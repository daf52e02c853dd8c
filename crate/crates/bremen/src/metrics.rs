//! Run metrics as append-only JSON lines plus a small SVG plotter.
//!
//! Rows carry only seeded, reproducible quantities so two runs with the
//! same configuration produce byte-identical streams; wall-clock timings
//! belong in logs, not here.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{BremenError, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub deployment: usize,
    pub iteration: usize,
    /// Sorted map, so serialization order is stable.
    pub scalars: BTreeMap<String, f64>,
}

impl MetricsRow {
    pub fn new(run_id: &str, deployment: usize, iteration: usize) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            deployment,
            iteration,
            scalars: BTreeMap::new(),
        }
    }

    pub fn scalar(mut self, key: &str, value: f64) -> Self {
        self.scalars.insert(key.to_string(), value);
        self
    }
}

pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        let line = serde_json::to_string(row)
            .map_err(|e| BremenError::Format(format!("metrics row serialization: {e}")))?;
        self.file.write_all(line.as_bytes())?;
        self.file.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetricsRow = serde_json::from_str(&line)
            .map_err(|e| BremenError::Format(format!("metrics line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Plots one scalar against the global iteration index, with a dotted
/// vertical line wherever a new deployment begins.
pub fn plot_svg(rows: &[MetricsRow], key: &str, out: &Path) -> Result<()> {
    let points: Vec<(usize, f64)> = rows
        .iter()
        .filter_map(|r| r.scalars.get(key).map(|&v| (r.deployment, v)))
        .enumerate()
        .map(|(i, (_, v))| (i, v))
        .collect();
    if points.is_empty() {
        return Err(BremenError::Dataset(format!("no rows carry scalar '{key}'")));
    }
    let deployments: Vec<usize> = rows
        .iter()
        .filter(|r| r.scalars.contains_key(key))
        .map(|r| r.deployment)
        .collect();

    let (w, h, ml, mb) = (720.0, 420.0, 60.0, 40.0);
    let (pw, ph) = (w - ml - 20.0, h - mb - 20.0);
    let ymin = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let ymax = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let yspan = (ymax - ymin).max(1e-12);
    let xspan = (points.len().saturating_sub(1)).max(1) as f64;
    let px = |i: usize| ml + i as f64 / xspan * pw;
    let py = |v: f64| 20.0 + (1.0 - (v - ymin) / yspan) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb,
        w - 20.0,
        h - mb
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb
    ));
    // deployment boundaries, dotted
    for i in 1..deployments.len() {
        if deployments[i] != deployments[i - 1] {
            let x = px(i);
            svg.push_str(&format!(
                "<line x1=\"{x}\" y1=\"20\" x2=\"{x}\" y2=\"{}\" stroke=\"gray\" stroke-dasharray=\"3,4\"/>\n",
                h - mb
            ));
        }
    }
    let path: Vec<String> = points
        .iter()
        .map(|&(i, v)| format!("{:.2},{:.2}", px(i), py(v)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
        path.join(" ")
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">iteration</text>\n",
        ml + pw / 2.0,
        h - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{key}</text>\n",
        20.0 + ph / 2.0,
        20.0 + ph / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"16\" font-size=\"11\">min {ymin:.4} max {ymax:.4}</text>\n"
    ));
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    Ok(())
}
