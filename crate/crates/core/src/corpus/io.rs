use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::text::normalize_aspect;
use super::{Dataset, Provenance, ReviewRecord};
use crate::error::{Error, Result};

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// UTF-8, one flat JSON object per line with exactly the keys
    /// `user_id`, `item_id`, `rating`, `review`, `aspects`.
    JsonLines,
}

const FIELDS: [&str; 5] = ["user_id", "item_id", "rating", "review", "aspects"];

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, format)
}

/// Parses and validates records. Blank lines are skipped; line numbers in
/// errors are 1-based, record indices 0-based.
pub fn parse_dataset(text: &str, format: DatasetFormat) -> Result<Dataset> {
    let DatasetFormat::JsonLines = format;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(line, lineno)?;
        validate(&record, records.len())?;
        records.push(record);
    }
    Ok(Dataset::new(records, Provenance::Ingested))
}

fn malformed(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Malformed {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<ReviewRecord> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| malformed(lineno, "<record>", e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(malformed(lineno, "<record>", "expected a JSON object"));
    };
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(malformed(lineno, extra, "unknown key"));
    }
    let string = |obj: &Map<String, Value>, key: &str| -> Result<String> {
        match obj.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(lineno, key, "expected a string")),
            None => Err(malformed(lineno, key, "missing")),
        }
    };
    let user_id = string(&obj, "user_id")?;
    let item_id = string(&obj, "item_id")?;
    let review = string(&obj, "review")?;
    let rating = match obj.get("rating") {
        Some(Value::Number(n)) => n
            .as_f64()
            .ok_or_else(|| malformed(lineno, "rating", "not representable as f64"))?,
        Some(_) => return Err(malformed(lineno, "rating", "expected a number")),
        None => return Err(malformed(lineno, "rating", "missing")),
    };
    let aspects = match obj.get("aspects") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(normalize_aspect(s)),
                _ => Err(malformed(lineno, "aspects", "expected an array of strings")),
            })
            .collect::<Result<Vec<_>>>()?,
        Some(_) => return Err(malformed(lineno, "aspects", "expected an array")),
        None => return Err(malformed(lineno, "aspects", "missing")),
    };
    Ok(ReviewRecord {
        user_id,
        item_id,
        rating,
        review,
        aspects,
    })
}

fn validate(record: &ReviewRecord, index: usize) -> Result<()> {
    if !(1.0..=5.0).contains(&record.rating) {
        return Err(Error::RatingOutOfRange {
            index,
            rating: record.rating,
        });
    }
    let invalid = |message: &str| Error::InvalidRecord {
        index,
        message: message.to_string(),
    };
    if record.review.trim().is_empty() {
        return Err(invalid("empty review"));
    }
    if record.aspects.is_empty() {
        return Err(invalid("no aspects"));
    }
    if record.aspects.iter().any(String::is_empty) {
        return Err(invalid("aspect term empty after normalization"));
    }
    Ok(())
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for record in dataset.iter() {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
