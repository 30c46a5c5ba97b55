//! Point-cloud file readers and plot-ready data writers.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::masking::MaskDecision;
use crate::pipeline::FeatureRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    /// One `x y z [label]` triple per line, whitespace-separated.
    Xyz,
    /// Standard OFF header and vertex list; faces are ignored.
    Off,
}

pub fn detect_format(path: &Path) -> Result<CloudFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "xyz" => Ok(CloudFormat::Xyz),
        Some(ext) if ext == "off" => Ok(CloudFormat::Off),
        other => Err(Error::invalid(format!(
            "cannot infer cloud format from extension {other:?} of {}",
            path.display()
        ))),
    }
}

pub fn read_cloud_auto(path: &Path) -> Result<PointCloud> {
    read_cloud(path, detect_format(path)?)
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    match format {
        CloudFormat::Xyz => parse_xyz(path, &text),
        CloudFormat::Off => parse_off(path, &text),
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_coord(path: &Path, line: usize, token: &str) -> Result<f64> {
    let v: f64 = token
        .parse()
        .map_err(|_| parse_err(path, line, format!("not a number: {token:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite coordinate {token:?}")));
    }
    Ok(v)
}

fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut label: Option<u32> = None;
    let mut labeled_lines = 0usize;

    for (ix, raw) in text.lines().enumerate() {
        let lineno = ix + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 && tokens.len() != 4 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 3 coordinates with optional label, got {} fields", tokens.len()),
            ));
        }
        let p = [
            parse_coord(path, lineno, tokens[0])?,
            parse_coord(path, lineno, tokens[1])?,
            parse_coord(path, lineno, tokens[2])?,
        ];
        if tokens.len() == 4 {
            let l: u32 = tokens[3]
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("bad label {:?}", tokens[3])))?;
            match label {
                None => label = Some(l),
                Some(prev) if prev != l => {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("inconsistent label {l} (earlier lines say {prev})"),
                    ))
                }
                _ => {}
            }
            labeled_lines += 1;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::invalid(format!("{}: no points", path.display())));
    }
    if labeled_lines > 0 && labeled_lines != points.len() {
        return Err(Error::invalid(format!(
            "{}: label column present on {labeled_lines} of {} lines",
            path.display(),
            points.len()
        )));
    }
    PointCloud::new(points, label)
}

fn parse_off(path: &Path, text: &str) -> Result<PointCloud> {
    // (line number, content) with blanks and '#' comments dropped
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(ix, l)| (ix + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (first_no, first) = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: empty file", path.display())))?;
    let counts_str = if first == "OFF" {
        let (no, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, first_no, "missing count line after OFF"))?;
        (no, l.to_string())
    } else if let Some(rest) = first.strip_prefix("OFF") {
        // some files glue the counts onto the header line
        (first_no, rest.trim().to_string())
    } else {
        return Err(parse_err(path, first_no, "missing OFF header"));
    };

    let counts: Vec<&str> = counts_str.1.split_whitespace().collect();
    if counts.len() != 3 {
        return Err(parse_err(
            path,
            counts_str.0,
            format!("expected 'vertices faces edges', got {:?}", counts_str.1),
        ));
    }
    let n_vertices: usize = counts[0]
        .parse()
        .map_err(|_| parse_err(path, counts_str.0, format!("bad vertex count {:?}", counts[0])))?;
    if n_vertices == 0 {
        return Err(Error::invalid(format!("{}: zero vertices", path.display())));
    }

    let mut points = Vec::with_capacity(n_vertices);
    for _ in 0..n_vertices {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{}: truncated vertex list", path.display())))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(
                path,
                no,
                format!("expected 3 vertex coordinates, got {}", tokens.len()),
            ));
        }
        points.push([
            parse_coord(path, no, tokens[0])?,
            parse_coord(path, no, tokens[1])?,
            parse_coord(path, no, tokens[2])?,
        ]);
    }
    PointCloud::new(points, None)
}

/// Shortest round-trip decimal representation per coordinate, so
/// write-then-read is exact.
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in cloud.points() {
        match cloud.label() {
            Some(l) => writeln!(f, "{} {} {} {l}", p[0], p[1], p[2])?,
            None => writeln!(f, "{} {} {}", p[0], p[1], p[2])?,
        }
    }
    Ok(())
}

/// One row per sample: feature values tab-separated, label last.
pub fn write_features_tsv(rows: &[FeatureRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        for v in &row.feature {
            write!(f, "{v}\t")?;
        }
        writeln!(f, "{}", row.label)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MaskRow<'a> {
    sample: usize,
    #[serde(flatten)]
    decision: &'a MaskDecision,
}

/// Line-delimited JSON, one mask decision per sample.
pub fn write_mask_decisions(decisions: &[MaskDecision], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (sample, decision) in decisions.iter().enumerate() {
        let row = MaskRow { sample, decision };
        let line = serde_json::to_string(&row)
            .map_err(|e| Error::invalid(format!("mask row serialization: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Line-delimited JSON records.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::invalid(format!("record serialization: {e}")))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
