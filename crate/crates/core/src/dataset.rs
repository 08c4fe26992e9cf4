//! JSON Lines dataset records.
//!
//! One record per line: `{"index": n, "fields": {"question": "..."}, "label": "yes"}`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PoemError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub index: u64,
    pub fields: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Record {
    pub fn new(index: u64, fields: impl IntoIterator<Item = (String, String)>) -> Self {
        Record {
            index,
            fields: fields.into_iter().collect(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Which field(s) supply the retrieval text. A list is joined with a single space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RetrievalField {
    Single(String),
    Joined(Vec<String>),
}

impl RetrievalField {
    pub fn names(&self) -> Vec<&str> {
        match self {
            RetrievalField::Single(name) => vec![name.as_str()],
            RetrievalField::Joined(names) => names.iter().map(String::as_str).collect(),
        }
    }

    pub fn text(&self, record: &Record) -> Result<String> {
        let mut parts = Vec::new();
        for name in self.names() {
            match record.fields.get(name) {
                Some(v) => parts.push(v.as_str()),
                None => {
                    return Err(PoemError::invalid(format!(
                        "record {} has no retrieval field `{name}`",
                        record.index
                    )))
                }
            }
        }
        let text = parts.join(" ");
        if text.trim().is_empty() {
            return Err(PoemError::invalid(format!(
                "record {} has an empty retrieval text",
                record.index
            )));
        }
        Ok(text)
    }
}

impl Default for RetrievalField {
    fn default() -> Self {
        RetrievalField::Single("text".to_string())
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| PoemError::Load {
        context: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| PoemError::Load {
            context: format!("{}:{}", path.display(), lineno + 1),
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut file = std::io::BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut file, rec).map_err(std::io::Error::from)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_record_with_and_without_label() {
        let a: Record =
            serde_json::from_str(r#"{"index": 3, "fields": {"question": "q?"}, "label": "yes"}"#)
                .unwrap();
        assert_eq!(a.label.as_deref(), Some("yes"));
        let b: Record = serde_json::from_str(r#"{"index": 4, "fields": {"q": "x"}}"#).unwrap();
        assert_eq!(b.label, None);
    }

    #[test]
    fn joined_retrieval_text() {
        let rec = Record::new(
            0,
            [
                ("question".to_string(), "is it?".to_string()),
                ("passage".to_string(), "it is.".to_string()),
            ],
        );
        let joined: RetrievalField = serde_json::from_str(r#"["question", "passage"]"#).unwrap();
        assert_eq!(joined.text(&rec).unwrap(), "is it? it is.");
        let missing = RetrievalField::Single("sentence".into());
        assert!(missing.text(&rec).is_err());
    }

    #[test]
    fn bad_line_reports_position() {
        let dir = std::env::temp_dir().join(format!("poem-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        std::fs::write(&path, "{\"index\":0,\"fields\":{}}\n{oops}\n").unwrap();
        let err = read_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("bad.jsonl:2"), "{err}");
    }
}
