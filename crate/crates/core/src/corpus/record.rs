//! Line-delimited JSON dialog records.
//!
//! One record per line:
//!
//! ```json
//! {"video_id": "v1", "caption": "people in the kitchen",
//!  "turns": [{"question": "what is the man holding", "answer": "the man is holding a cup",
//!             "triplet": {"subject": "man", "relation": "holding", "object": "cup", "source": "answer"}}]}
//! ```
//!
//! `triplet` may be `null` (extraction failed upstream) or a list, in which
//! case only the first entry is kept.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletSource {
    Question,
    Answer,
    Null,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<TripletSource>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRecord {
    pub question: String,
    pub answer: String,
    #[serde(default, deserialize_with = "first_triplet")]
    pub triplet: Option<TripletRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub video_id: String,
    pub caption: String,
    pub turns: Vec<TurnRecord>,
}

fn first_triplet<'de, D>(de: D) -> std::result::Result<Option<TripletRecord>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(TripletRecord),
        Many(Vec<TripletRecord>),
    }
    Ok(match Option::<OneOrMany>::deserialize(de)? {
        None => None,
        Some(OneOrMany::One(t)) => Some(t),
        Some(OneOrMany::Many(v)) => v.into_iter().next(),
    })
}

/// Parses records from line-delimited JSON. Blank lines are skipped.
pub fn parse_records(reader: impl BufRead, origin: &str) -> Result<Vec<DialogRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{origin}:{}", n + 1), e.to_string()))?;
        if rec.turns.is_empty() {
            return Err(Error::parse(
                format!("{origin}:{} ({})", n + 1, rec.video_id),
                "dialog has no turns",
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<DialogRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), &path.display().to_string())
}

pub fn records_to_string(records: &[DialogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_records(path: &Path, records: &[DialogRecord]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(records_to_string(records).as_bytes()))
        .map_err(|e| Error::io(path, e))
}
