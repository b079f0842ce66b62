//! Labelled text datasets from JSONL or CSV files.
//!
//! Each record carries `text`, an integer `label`, and an optional `split`
//! (`train`, `validation` or `test`; default `train`).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use decsal_core::Record;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Ok(Format::Jsonl),
            Some("csv") => Ok(Format::Csv),
            _ => Err(HarnessError::Config(format!(
                "{}: cannot infer dataset format, expected .jsonl or .csv",
                path.display()
            ))),
        }
    }
}

/// Validated records with split tags. Labels are dense in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledSet {
    pub records: Vec<Record>,
    pub splits: Vec<Split>,
    pub classes: usize,
}

impl LabelledSet {
    pub fn new(records: Vec<Record>, splits: Vec<Split>) -> Result<Self> {
        if records.is_empty() {
            return Err(HarnessError::Data("dataset is empty".into()));
        }
        assert_eq!(records.len(), splits.len(), "one split tag per record");
        let classes = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
        let mut seen = vec![false; classes];
        for r in &records {
            seen[r.label] = true;
        }
        let missing: Vec<usize> = (0..classes).filter(|&c| !seen[c]).collect();
        if !missing.is_empty() {
            return Err(HarnessError::Data(format!(
                "labels must be dense in 0..{classes}; missing {missing:?}"
            )));
        }
        if let Some(i) = records
            .iter()
            .zip(&splits)
            .position(|(r, s)| *s == Split::Train && r.text.trim().is_empty())
        {
            return Err(HarnessError::Data(format!("record {} in the train split has empty text", i + 1)));
        }
        Ok(Self { records, splits, classes })
    }

    /// All records tagged with `split`.
    pub fn split(&self, split: Split) -> Vec<Record> {
        self.records
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(r, _)| r.clone())
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    text: Option<String>,
    label: Option<i64>,
    #[serde(default)]
    split: Option<Split>,
}

fn to_record(row: Row, line: u64) -> Result<(Record, Split)> {
    let text = row
        .text
        .ok_or_else(|| HarnessError::Data(format!("line {line}: missing field \"text\"")))?;
    let label = row
        .label
        .ok_or_else(|| HarnessError::Data(format!("line {line}: missing field \"label\"")))?;
    let label = usize::try_from(label).map_err(|_| HarnessError::Data(format!("line {line}: negative label {label}")))?;
    Ok((Record { text, label }, row.split.unwrap_or_default()))
}

pub fn parse_jsonl(text: &str) -> Result<LabelledSet> {
    let mut records = Vec::new();
    let mut splits = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(raw).map_err(|e| HarnessError::Data(format!("line {line}: {e}")))?;
        let (r, s) = to_record(row, line)?;
        records.push(r);
        splits.push(s);
    }
    LabelledSet::new(records, splits)
}

/// RFC 4180 CSV with a header row naming at least `text` and `label`.
pub fn parse_csv(text: &str) -> Result<LabelledSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| HarnessError::Data(format!("line 1: {e}")))?
        .clone();
    for required in ["text", "label"] {
        if !headers.iter().any(|h| h == required) {
            return Err(HarnessError::Data(format!("line 1: missing column \"{required}\"")));
        }
    }
    let mut records = Vec::new();
    let mut splits = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            HarnessError::Data(format!("line {line}: {e}"))
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parsed: Row = row
            .deserialize(Some(&headers))
            .map_err(|e| HarnessError::Data(format!("line {line}: {e}")))?;
        let (r, s) = to_record(parsed, line)?;
        records.push(r);
        splits.push(s);
    }
    LabelledSet::new(records, splits)
}

pub fn ingest(path: &Path, format: Format) -> Result<LabelledSet> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    match format {
        Format::Jsonl => parse_jsonl(&text),
        Format::Csv => parse_csv(&text),
    }
    .map_err(|e| match e {
        HarnessError::Data(msg) => HarnessError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Serialize)]
struct OutRow<'a> {
    text: &'a str,
    label: usize,
    split: Split,
}

/// One JSON object per line, in record order.
pub fn to_jsonl(set: &LabelledSet) -> String {
    let mut out = Vec::new();
    for (r, s) in set.records.iter().zip(&set.splits) {
        let row = OutRow {
            text: &r.text,
            label: r.label,
            split: *s,
        };
        serde_json::to_writer(&mut out, &row).expect("plain data serializes");
        out.write_all(b"\n").expect("writing to a Vec");
    }
    String::from_utf8(out).expect("serde_json emits UTF-8")
}
