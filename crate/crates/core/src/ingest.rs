//! CSV input, run configuration and report output.
//!
//! Inputs are headered UTF-8 CSV files:
//!
//! ```text
//! member_id,geo,platform,page_key,load_time_ms,timestamp
//! 17,us,ios,feed,431,2023-04-01
//!
//! member_id,experiment_id,segment_id,variant,timestamp
//! 17,exp1,seg1,treatment,2023-04-01
//! ```
//!
//! Timestamps are ISO-8601 dates or date-times and are reduced to days since
//! 1970-01-01 (UTC). Parsing is strict: any bad line aborts the whole file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::Serialize;
use thiserror::Error;

use crate::pipeline::{DayRange, PipelineConfig};
use crate::types::{ExposureRecord, Method, MetricRecord};

pub const METRICS_HEADER: [&str; 6] = [
    "member_id",
    "geo",
    "platform",
    "page_key",
    "load_time_ms",
    "timestamp",
];
pub const EXPOSURES_HEADER: [&str; 5] = [
    "member_id",
    "experiment_id",
    "segment_id",
    "variant",
    "timestamp",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected header '{expected}', found '{found}'")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: {count} record(s) with negative load time, first at line {first_line}")]
    NegativeLoadTime {
        path: String,
        count: u64,
        first_line: u64,
    },
    #[error("member {member_id} is in variants '{first}' and '{second}' of experiment '{experiment_id}'")]
    ConflictingExposure {
        member_id: u64,
        experiment_id: String,
        first: String,
        second: String,
    },
}

impl IngestError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, IngestError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }
}

/// Days since 1970-01-01 of an ISO-8601 date or date-time.
pub fn parse_day(s: &str) -> Result<i32, String> {
    let date = NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| DateTime::parse_from_rfc3339(s).map(|dt| dt.naive_utc().date()))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map(|dt| dt.date()))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").map(|dt| dt.date()))
        .map_err(|_| format!("invalid timestamp '{s}'"))?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
    Ok((date - epoch).num_days() as i32)
}

/// ISO date of a day index.
pub fn format_day(day: i32) -> String {
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
    (epoch + chrono::Duration::days(day as i64)).to_string()
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn reader<R: Read>(input: R, path: &str, expected: &[&str]) -> Result<csv::Reader<R>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| malformed(path, 1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != expected {
        return Err(IngestError::Header {
            path: path.into(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(rdr)
}

fn malformed(path: &str, line: u64, message: impl Into<String>) -> IngestError {
    IngestError::Malformed {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn field<'r>(
    rec: &'r csv::StringRecord,
    i: usize,
    name: &str,
    path: &str,
    line: u64,
) -> Result<&'r str, IngestError> {
    let v = rec.get(i).unwrap_or("");
    if v.is_empty() {
        return Err(malformed(path, line, format!("empty {name}")));
    }
    Ok(v)
}

fn member_id(rec: &csv::StringRecord, path: &str, line: u64) -> Result<u64, IngestError> {
    let raw = field(rec, 0, "member_id", path, line)?;
    raw.parse()
        .map_err(|_| malformed(path, line, format!("invalid member_id '{raw}'")))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

pub fn parse_metrics(path: &Path) -> Result<Vec<MetricRecord>, IngestError> {
    parse_metrics_from(open(path)?, &path.display().to_string())
}

/// Parses metric records; `path` is only used in error messages.
pub fn parse_metrics_from<R: Read>(input: R, path: &str) -> Result<Vec<MetricRecord>, IngestError> {
    let mut rdr = reader(input, path, &METRICS_HEADER)?;
    let mut out = Vec::new();
    let mut negative: Option<(u64, u64)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = line_of(&rec);
        let member_id = member_id(&rec, path, line)?;
        let raw_time = field(&rec, 4, "load_time_ms", path, line)?;
        let time: i64 = raw_time
            .parse()
            .map_err(|_| malformed(path, line, format!("invalid load_time_ms '{raw_time}'")))?;
        let day = parse_day(field(&rec, 5, "timestamp", path, line)?)
            .map_err(|m| malformed(path, line, m))?;
        if time < 0 {
            let entry = negative.get_or_insert((0, line));
            entry.0 += 1;
            continue;
        }
        let load_time_ms = u32::try_from(time)
            .map_err(|_| malformed(path, line, format!("load_time_ms {time} out of range")))?;
        out.push(MetricRecord {
            member_id,
            day,
            geo: field(&rec, 1, "geo", path, line)?.to_owned(),
            platform: field(&rec, 2, "platform", path, line)?.to_owned(),
            page_key: field(&rec, 3, "page_key", path, line)?.to_owned(),
            load_time_ms,
        });
    }
    if let Some((count, first_line)) = negative {
        return Err(IngestError::NegativeLoadTime {
            path: path.into(),
            count,
            first_line,
        });
    }
    Ok(out)
}

pub fn parse_exposures(path: &Path) -> Result<Vec<ExposureRecord>, IngestError> {
    parse_exposures_from(open(path)?, &path.display().to_string())
}

/// Parses exposure records.
///
/// Repeated (member, experiment, segment, variant) events collapse to the
/// earliest day. A member seen in two variants of one experiment is an error.
pub fn parse_exposures_from<R: Read>(
    input: R,
    path: &str,
) -> Result<Vec<ExposureRecord>, IngestError> {
    let mut rdr = reader(input, path, &EXPOSURES_HEADER)?;
    let mut out: Vec<ExposureRecord> = Vec::new();
    let mut seen: HashMap<(u64, String, String, String), usize> = HashMap::new();
    let mut assigned: HashMap<(u64, String), String> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = line_of(&rec);
        let member_id = member_id(&rec, path, line)?;
        let experiment_id = field(&rec, 1, "experiment_id", path, line)?.to_owned();
        let segment_id = field(&rec, 2, "segment_id", path, line)?.to_owned();
        let variant = field(&rec, 3, "variant", path, line)?.to_owned();
        let day = parse_day(field(&rec, 4, "timestamp", path, line)?)
            .map_err(|m| malformed(path, line, m))?;

        match assigned.get(&(member_id, experiment_id.clone())) {
            Some(prev) if *prev != variant => {
                return Err(IngestError::ConflictingExposure {
                    member_id,
                    experiment_id,
                    first: prev.clone(),
                    second: variant,
                });
            }
            Some(_) => {}
            None => {
                assigned.insert((member_id, experiment_id.clone()), variant.clone());
            }
        }
        let key = (
            member_id,
            experiment_id.clone(),
            segment_id.clone(),
            variant.clone(),
        );
        match seen.get(&key) {
            Some(&i) => out[i].day = out[i].day.min(day),
            None => {
                seen.insert(key, out.len());
                out.push(ExposureRecord {
                    member_id,
                    experiment_id,
                    segment_id,
                    variant,
                    day,
                });
            }
        }
    }
    Ok(out)
}

/// Everything a `compute` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub metrics_path: PathBuf,
    pub exposures_path: PathBuf,
    pub quantiles: Vec<f64>,
    pub method: Method,
    pub fixed_halfwidth_ms: f64,
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub partitions: usize,
    pub day_range: Option<DayRange>,
    pub control_variant: Option<String>,
    pub output_path: Option<PathBuf>,
}

impl RunConfig {
    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            quantiles: self.quantiles.clone(),
            method: self.method,
            fixed_halfwidth_ms: self.fixed_halfwidth_ms,
            bootstrap_replicates: self.bootstrap_replicates,
            seed: self.seed,
            partitions: self.partitions,
            day_range: self.day_range,
            control_variant: self.control_variant.clone(),
        }
    }
}

/// One output line: a cell, a quantile and, when a control is designated,
/// the comparison against it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub segment_id: String,
    pub variant: String,
    pub geo: String,
    pub platform: String,
    pub page_key: String,
    pub q: f64,
    pub quantile_ms: u32,
    pub stddev_ms: f64,
    pub n0: u64,
    pub total_views: u64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
}

type SortKey<'a> = (&'a str, &'a str, &'a str, &'a str, &'a str, &'a str, f64);

impl ReportRow {
    /// Report order: experiment, segment, variant, dimension, q.
    pub fn sort_key(&self) -> SortKey<'_> {
        (
            &self.experiment_id,
            &self.segment_id,
            &self.variant,
            &self.geo,
            &self.platform,
            &self.page_key,
            self.q,
        )
    }

    /// Rows sharing this key are compared against each other.
    pub fn comparison_key(&self) -> (String, String, String, String, String, u64) {
        (
            self.experiment_id.clone(),
            self.segment_id.clone(),
            self.geo.clone(),
            self.platform.clone(),
            self.page_key.clone(),
            self.q.to_bits(),
        )
    }
}

/// Writes one JSON object per row.
pub fn write_report<W: Write>(rows: &[ReportRow], out: W) -> io::Result<()> {
    let mut out = BufWriter::new(out);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn write_report_file(rows: &[ReportRow], path: &Path) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    };
    write_report(rows, File::create(path).map_err(io_err)?).map_err(io_err)
}

/// Human-readable table of report rows.
pub fn summary_table(rows: &[ReportRow]) -> String {
    use std::fmt::Write as _;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<10} {:<12} {:<18} {:>5} {:>9} {:>10} {:>8} {:>9} {:>10} {:>9}",
        "experiment",
        "segment",
        "variant",
        "dimension",
        "q",
        "quantile",
        "stddev",
        "members",
        "views",
        "delta",
        "p-value"
    );
    for r in rows {
        let dim = format!("{}/{}/{}", r.geo, r.platform, r.page_key);
        let delta = r
            .delta_ms
            .map_or_else(|| "-".to_owned(), |d| format!("{d:.1}"));
        let p = r
            .p_value
            .map_or_else(|| "-".to_owned(), |p| format!("{p:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:<10} {:<12} {:<18} {:>5} {:>9} {:>10.3} {:>8} {:>9} {:>10} {:>9}",
            r.experiment_id,
            r.segment_id,
            r.variant,
            dim,
            r.q,
            r.quantile_ms,
            r.stddev_ms,
            r.n0,
            r.total_views,
            delta,
            p
        );
    }
    out
}
