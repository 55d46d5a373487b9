use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{CorpusError, Document};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    DelimitedTable,
    JsonLines,
    PlainDir,
}

impl FromStr for IngestFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delimited_table" | "csv" | "tsv" => Ok(IngestFormat::DelimitedTable),
            "json_lines" | "jsonl" => Ok(IngestFormat::JsonLines),
            "plain_dir" | "dir" => Ok(IngestFormat::PlainDir),
            other => Err(format!("unknown input format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub documents: Vec<Document>,
    /// One entry per skipped record.
    pub warnings: Vec<String>,
}

struct RawRecord {
    id: Option<String>,
    title: String,
    body: String,
    metadata: BTreeMap<String, String>,
}

/// Read documents from `path`. Records with an empty body are skipped with a
/// warning; records without an id get `doc<index>` from their position in the input.
pub fn ingest(path: &Path, format: IngestFormat) -> Result<IngestReport, CorpusError> {
    let records = match format {
        IngestFormat::DelimitedTable => read_table(path)?,
        IngestFormat::JsonLines => read_json_lines(path)?,
        IngestFormat::PlainDir => read_dir(path)?,
    };

    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for (index, rec) in records.into_iter().enumerate() {
        let doc_id = match rec.id {
            Some(id) if !id.trim().is_empty() => id.trim().to_string(),
            _ => format!("doc{index:06}"),
        };
        if rec.body.trim().is_empty() {
            let msg = format!("record {index} ({doc_id}) has an empty body; skipped");
            warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc_id));
        }
        report.documents.push(Document {
            doc_id,
            title: rec.title,
            body: rec.body,
            metadata: rec.metadata,
        });
    }
    Ok(report)
}

fn unreadable(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Unreadable {
        path: path.display().to_string(),
        source,
    }
}

fn read_table(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let delimiter = match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    };
    let file = fs::File::open(path).map_err(|e| unreadable(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(file);
    let malformed = |record: usize, reason: String| CorpusError::Malformed {
        path: path.display().to_string(),
        record,
        reason,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| malformed(0, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let text_col = col("text").ok_or_else(|| CorpusError::MissingTextColumn(path.display().to_string()))?;
    let id_col = col("id");
    let title_col = col("title");

    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| malformed(i + 1, e.to_string()))?;
        let get = |c: Option<usize>| c.and_then(|c| row.get(c)).map(str::to_string);
        let mut metadata = BTreeMap::new();
        for (c, name) in headers.iter().enumerate() {
            if Some(c) == id_col || Some(c) == title_col || c == text_col {
                continue;
            }
            if let Some(v) = row.get(c) {
                metadata.insert(name.clone(), v.to_string());
            }
        }
        out.push(RawRecord {
            id: get(id_col),
            title: get(title_col).unwrap_or_default(),
            body: get(Some(text_col)).unwrap_or_default(),
            metadata,
        });
    }
    Ok(out)
}

fn read_json_lines(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|e| unreadable(path, e))?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            record: i + 1,
            reason: e.to_string(),
        })?;
        let serde_json::Value::Object(map) = value else {
            return Err(CorpusError::Malformed {
                path: path.display().to_string(),
                record: i + 1,
                reason: "line is not a JSON object".into(),
            });
        };
        let as_string = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Null => String::new(),
            other => other.to_string(),
        };
        let mut rec = RawRecord {
            id: None,
            title: String::new(),
            body: String::new(),
            metadata: BTreeMap::new(),
        };
        for (k, v) in &map {
            match k.as_str() {
                "id" => rec.id = Some(as_string(v)),
                "title" => rec.title = as_string(v),
                "text" => rec.body = as_string(v),
                _ => {
                    rec.metadata.insert(k.clone(), as_string(v));
                }
            }
        }
        out.push(rec);
    }
    Ok(out)
}

fn read_dir(path: &Path) -> Result<Vec<RawRecord>, CorpusError> {
    let mut entries: Vec<_> = fs::read_dir(path)
        .map_err(|e| unreadable(path, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for file in entries {
        let body = fs::read_to_string(&file).map_err(|e| unreadable(&file, e))?;
        let id = file.file_stem().map(|s| s.to_string_lossy().into_owned());
        let mut metadata = BTreeMap::new();
        if let Some(name) = file.file_name() {
            metadata.insert("source".to_string(), name.to_string_lossy().into_owned());
        }
        out.push(RawRecord {
            id,
            title: String::new(),
            body,
            metadata,
        });
    }
    Ok(out)
}
