//! Corpus ingestion and segmentation into analytical units.

mod ingest;
mod segment;
mod tokens;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest, IngestFormat, IngestReport};
pub use segment::{segment, SentenceSplitter, DEFAULT_ABBREVIATIONS};
pub use tokens::{estimate_tokens, token_guard, TokenEstimator, TokenGuard};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {record} in {path}: {reason}")]
    Malformed {
        path: String,
        record: usize,
        reason: String,
    },
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("table {0} has no `text` column")]
    MissingTextColumn(String),
    #[error("unknown granularity {0:?}")]
    UnknownGranularity(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Sentence,
    Paragraph,
    FullText,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Sentence => "sentence",
            Granularity::Paragraph => "paragraph",
            Granularity::FullText => "full_text",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Granularity::Sentence),
            "paragraph" => Ok(Granularity::Paragraph),
            "full_text" | "full-text" => Ok(Granularity::FullText),
            other => Err(CorpusError::UnknownGranularity(other.to_string())),
        }
    }
}

/// One analytical unit. Field order is the serialized order of the units file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusUnit {
    pub unit_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub granularity: Granularity,
    pub text: String,
    pub title: String,
}

/// `unit_id` is `<doc_id>#<ordinal>`; the numeric suffix makes the mapping injective.
pub fn unit_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}
