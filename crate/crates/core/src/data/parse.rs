use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FuxiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `UserID::MovieID::Rating::Timestamp`
    MovielensDat,
    /// Header `user,item,timestamp[,rating]`.
    Csv,
}

/// One logged interaction with the ids as they appear in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionEvent {
    pub user: u64,
    pub item: u64,
    /// Seconds.
    pub timestamp: i64,
    pub rating: Option<f64>,
}

pub fn parse_interactions(path: &Path, format: DataFormat) -> Result<Vec<InteractionEvent>> {
    let bytes = std::fs::read(path).map_err(|e| FuxiError::io(path, e))?;
    let text = String::from_utf8_lossy(&bytes);
    parse_str(&text, format, &path.display().to_string())
}

/// Parses an in-memory log; `origin` names the source in error messages.
pub fn parse_str(text: &str, format: DataFormat, origin: &str) -> Result<Vec<InteractionEvent>> {
    let events = match format {
        DataFormat::MovielensDat => parse_dat(text, origin)?,
        DataFormat::Csv => parse_csv(text, origin)?,
    };
    if events.is_empty() {
        return Err(FuxiError::Data(format!("{origin}: no interactions found")));
    }
    Ok(events)
}

fn err(origin: &str, line: usize, message: impl Into<String>) -> FuxiError {
    FuxiError::Parse {
        path: origin.into(),
        line,
        message: message.into(),
    }
}

fn field<T: std::str::FromStr>(raw: &str, name: &str, origin: &str, line: usize) -> Result<T> {
    raw.trim().parse().map_err(|_| err(origin, line, format!("invalid {name} `{raw}`")))
}

fn event(user: u64, item: u64, timestamp: i64, rating: Option<f64>, origin: &str, line: usize) -> Result<InteractionEvent> {
    if timestamp < 0 {
        return Err(err(origin, line, format!("negative timestamp {timestamp}")));
    }
    Ok(InteractionEvent { user, item, timestamp, rating })
}

fn parse_dat(text: &str, origin: &str) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split("::").collect();
        if parts.len() != 4 {
            return Err(err(origin, line, format!("expected 4 `::`-separated fields, found {}", parts.len())));
        }
        out.push(event(
            field(parts[0], "user id", origin, line)?,
            field(parts[1], "item id", origin, line)?,
            field(parts[3], "timestamp", origin, line)?,
            Some(field(parts[2], "rating", origin, line)?),
            origin,
            line,
        )?);
    }
    Ok(out)
}

fn parse_csv(text: &str, origin: &str) -> Result<Vec<InteractionEvent>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(origin, 1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    let with_rating = match names.as_slice() {
        ["user", "item", "timestamp"] => false,
        ["user", "item", "timestamp", "rating"] => true,
        _ => return Err(err(origin, 1, format!("expected header `user,item,timestamp[,rating]`, found `{}`", names.join(",")))),
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            err(origin, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let rating = if with_rating { Some(field(&record[3], "rating", origin, line)?) } else { None };
        out.push(event(
            field(&record[0], "user id", origin, line)?,
            field(&record[1], "item id", origin, line)?,
            field(&record[2], "timestamp", origin, line)?,
            rating,
            origin,
            line,
        )?);
    }
    Ok(out)
}
