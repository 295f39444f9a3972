//! Tabular and JSON output.
//!
//! CSV is UTF-8, comma-delimited, with a header row. Floats use Rust's
//! shortest round-trip formatting, so values parse back bit-exactly.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::coupling::CouplingMatrix;
use crate::crystal::{IonCrystal, NormalModes};
use crate::dynamics::{outcome_label, ObservableSeries};
use crate::stochastic::{ConfigurationGroup, ScanPoint, ShotRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
    Bool(bool),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl Table {
    pub fn new<S: Into<String>>(headers: impl IntoIterator<Item = S>) -> Self {
        Self { headers: headers.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.headers.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","));
        out.push('\n');
        for row in &self.rows {
            let fields: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Float(v) => format!("{v:?}"),
                    Cell::Int(v) => v.to_string(),
                    Cell::Text(s) => csv_field(s),
                    Cell::Bool(b) => b.to_string(),
                })
                .collect();
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    /// Array of row objects keyed by header. Non-finite floats become strings.
    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                let map = self
                    .headers
                    .iter()
                    .zip(row)
                    .map(|(h, c)| {
                        let v = match c {
                            Cell::Float(v) if v.is_finite() => serde_json::json!(v),
                            Cell::Float(v) => serde_json::json!(format!("{v:?}")),
                            Cell::Int(v) => serde_json::json!(v),
                            Cell::Text(s) => serde_json::json!(s),
                            Cell::Bool(b) => serde_json::json!(b),
                        };
                        (h.clone(), v)
                    })
                    .collect::<serde_json::Map<_, _>>();
                serde_json::Value::Object(map)
            })
            .collect();
        let mut s = serde_json::to_string_pretty(&rows).expect("serializable");
        s.push('\n');
        s
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    /// Parse CSV written by [`Table::to_csv`]; fields are kept as text.
    pub fn parse_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let headers: Vec<String> = lines.next().ok_or("empty CSV")?.split(',').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (k, line) in lines.enumerate() {
            let row: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            if row.len() != headers.len() {
                return Err(format!("line {}: expected {} fields, got {}", k + 2, headers.len(), row.len()));
            }
            rows.push(row);
        }
        Ok((headers, rows))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, contents: &str) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents)
}

pub fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

pub fn crystal_table(crystal: &IonCrystal) -> Table {
    let mut t = Table::new(["ion_index", "x_m", "y_m", "z_m"]);
    for (i, p) in crystal.positions.iter().enumerate() {
        t.push(vec![i.into(), p[0].into(), p[1].into(), p[2].into()]);
    }
    t
}

pub fn modes_table(modes: &NormalModes) -> Table {
    let n = modes.n_ions();
    let mut headers = vec!["mode_index".to_string(), "frequency_Hz".to_string()];
    for i in 0..n {
        for axis in ["x", "y", "z"] {
            headers.push(format!("ion{i}_{axis}_dimless"));
        }
    }
    let mut t = Table::new(headers);
    for k in 0..modes.n_modes() {
        let mut row: Vec<Cell> = vec![k.into(), (modes.frequencies[k] / (2.0 * std::f64::consts::PI)).into()];
        for r in 0..3 * n {
            row.push(modes.eigenvectors[(r, k)].into());
        }
        t.push(row);
    }
    t
}

/// Pairs `(i, j, J/2π)` in Hz over the full matrix.
pub fn couplings_table(j: &CouplingMatrix) -> Table {
    let mut t = Table::new(["i_index", "j_index", "J_Hz"]);
    for a in 0..j.n_ions {
        for b in 0..j.n_ions {
            t.push(vec![a.into(), b.into(), (j.j[(a, b)] / (2.0 * std::f64::consts::PI)).into()]);
        }
    }
    t
}

#[derive(Serialize)]
struct CouplingsJson<'a> {
    n_ions: usize,
    unit: &'a str,
    j: Vec<Vec<f64>>,
}

pub fn couplings_json(j: &CouplingMatrix) -> String {
    let rows = (0..j.n_ions)
        .map(|a| (0..j.n_ions).map(|b| j.j[(a, b)] / (2.0 * std::f64::consts::PI)).collect())
        .collect();
    json_string(&CouplingsJson { n_ions: j.n_ions, unit: "Hz", j: rows })
}

fn outcome_headers(n: usize, prefix: &str, suffix: &str) -> Vec<String> {
    (0..1usize << n).map(|k| format!("{prefix}{}{suffix}", outcome_label(k, n))).collect()
}

fn aggregate_headers() -> [&'static str; 3] {
    ["magnetization_dimless", "P_all_up_prob", "P_all_down_prob"]
}

/// `time_s`, one probability column per outcome, then aggregates.
pub fn series_table(series: &ObservableSeries) -> Table {
    let n = series.n_spins;
    let mut headers = vec!["time_s".to_string()];
    headers.extend(outcome_headers(n, "P_", "_prob"));
    headers.extend(aggregate_headers().map(String::from));
    let mut t = Table::new(headers);
    for (k, (&time, p)) in series.times.iter().zip(&series.probabilities).enumerate() {
        let mut row: Vec<Cell> = vec![time.into()];
        row.extend(p.iter().map(|&v| Cell::Float(v)));
        row.push(series.magnetization(k).into());
        row.push(p[series.all_up_index()].into());
        row.push(p[0].into());
        t.push(row);
    }
    t
}

/// Sampled counts per time point alongside the exact probabilities.
pub fn sampled_table(series: &ObservableSeries, counts: &[Vec<u64>]) -> Table {
    let shots: Vec<u64> = counts.iter().map(|c| c.iter().sum()).collect();
    sampled_table_with_shots(series, counts, &shots)
}

pub fn group_table(group: &ConfigurationGroup) -> Table {
    sampled_table_with_shots(&group.model, &group.counts, &group.shots)
}

fn sampled_table_with_shots(series: &ObservableSeries, counts: &[Vec<u64>], shots: &[u64]) -> Table {
    let n = series.n_spins;
    let mut headers = vec!["time_s".to_string(), "shots_count".to_string()];
    headers.extend(outcome_headers(n, "N_", "_count"));
    headers.extend(outcome_headers(n, "P_", "_prob"));
    headers.extend(outcome_headers(n, "model_P_", "_prob"));
    let mut t = Table::new(headers);
    for (((&time, c), p), &s) in series.times.iter().zip(counts).zip(&series.probabilities).zip(shots) {
        let mut row: Vec<Cell> = vec![time.into(), s.into()];
        row.extend(c.iter().map(|&v| Cell::from(v)));
        row.extend(c.iter().map(|&v| Cell::Float(if s > 0 { v as f64 / s as f64 } else { f64::NAN })));
        row.extend(p.iter().map(|&v| Cell::Float(v)));
        t.push(row);
    }
    t
}

pub fn shots_table(records: &[ShotRecord]) -> Table {
    let mut t = Table::new(["shot_index", "time_index", "time_s", "configuration", "outcome", "intact"]);
    for r in records {
        t.push(vec![
            r.shot.into(),
            r.time_index.into(),
            r.time.into(),
            r.configuration.to_string().into(),
            r.outcome_string().into(),
            r.intact.into(),
        ]);
    }
    t
}

pub fn scan_table(points: &[ScanPoint], label: &str) -> Table {
    let mut t = Table::new(vec![
        "time_s".to_string(),
        "shots_count".to_string(),
        format!("{label}_count"),
        format!("{label}_frac"),
    ]);
    for p in points {
        t.push(vec![p.time.into(), p.shots.into(), p.hits.into(), p.fraction().into()]);
    }
    t
}
