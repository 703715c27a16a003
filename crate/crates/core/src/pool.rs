//! Example pool: records, topic partition and JSONL ingestion.
//!
//! A [`Pool`] is immutable once built. Records are stored in ascending id
//! order and every downstream tie-break uses that order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("cannot read pool file {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?} (first seen on line {first_line})")]
    DuplicateId {
        id: String,
        line: usize,
        first_line: usize,
    },
    #[error("line {line}: record {id:?} has non-positive token length {tokens}")]
    NonPositiveTokens { id: String, line: usize, tokens: i64 },
    #[error("line {line}: record {id:?} has embedding dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: record {id:?} has an empty embedding")]
    EmptyEmbedding { id: String, line: usize },
    #[error("line {line}: record {id:?} has non-finite value for signal {signal:?}")]
    NonFiniteSignal {
        id: String,
        line: usize,
        signal: String,
    },
    #[error("line {line}: record {id:?} has a non-finite embedding component")]
    NonFiniteEmbedding { id: String, line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
}

impl PoolError {
    pub fn is_io_or_parse(&self) -> bool {
        matches!(self, PoolError::Io { .. } | PoolError::Parse { .. } | PoolError::UnknownKey { .. })
    }
}

/// One item of the training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleRecord {
    pub id: String,
    pub topic: String,
    pub token_length: u32,
    pub label: Option<String>,
    pub embedding: Option<Vec<f64>>,
    pub raw_signals: BTreeMap<String, f64>,
}

impl ExampleRecord {
    pub fn new(id: impl Into<String>, topic: impl Into<String>, token_length: u32) -> Self {
        Self {
            id: id.into(),
            topic: topic.into(),
            token_length,
            label: None,
            embedding: None,
            raw_signals: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_embedding(mut self, embedding: Vec<f64>) -> Self {
        self.embedding = Some(embedding);
        self
    }

    pub fn with_signal(mut self, name: impl Into<String>, value: f64) -> Self {
        self.raw_signals.insert(name.into(), value);
        self
    }
}

/// A topic group and the pool indices (ascending) that belong to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topic {
    pub name: String,
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Pool {
    records: Vec<ExampleRecord>,
    topics: Vec<Topic>,
    topic_of: Vec<usize>,
    embedding_dim: Option<usize>,
}

/// Ingestion options for [`load_pool`].
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Treat unknown keys as an error instead of logging a warning.
    pub reject_unknown_keys: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    topic: String,
    tokens: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    signals: BTreeMap<String, f64>,
    #[serde(flatten, skip_serializing)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl Pool {
    /// Validates `records` and builds the pool. Errors report the 1-based
    /// position of the offending record in `records`.
    pub fn from_records(records: Vec<ExampleRecord>) -> Result<Self, PoolError> {
        let numbered = records
            .into_iter()
            .enumerate()
            .map(|(i, r)| (i + 1, r))
            .collect();
        Self::from_numbered(numbered)
    }

    fn from_numbered(numbered: Vec<(usize, ExampleRecord)>) -> Result<Self, PoolError> {
        let mut first_line: HashMap<&str, usize> = HashMap::with_capacity(numbered.len());
        let mut embedding_dim: Option<usize> = None;
        for (line, rec) in &numbered {
            let line = *line;
            if let Some(&first) = first_line.get(rec.id.as_str()) {
                return Err(PoolError::DuplicateId {
                    id: rec.id.clone(),
                    line,
                    first_line: first,
                });
            }
            first_line.insert(rec.id.as_str(), line);
            if rec.token_length == 0 {
                return Err(PoolError::NonPositiveTokens {
                    id: rec.id.clone(),
                    line,
                    tokens: 0,
                });
            }
            if let Some(emb) = &rec.embedding {
                if emb.is_empty() {
                    return Err(PoolError::EmptyEmbedding {
                        id: rec.id.clone(),
                        line,
                    });
                }
                match embedding_dim {
                    None => embedding_dim = Some(emb.len()),
                    Some(d) if d != emb.len() => {
                        return Err(PoolError::DimensionMismatch {
                            id: rec.id.clone(),
                            line,
                            expected: d,
                            found: emb.len(),
                        })
                    }
                    Some(_) => {}
                }
                if emb.iter().any(|x| !x.is_finite()) {
                    return Err(PoolError::NonFiniteEmbedding {
                        id: rec.id.clone(),
                        line,
                    });
                }
            }
            if let Some((name, _)) = rec.raw_signals.iter().find(|(_, v)| !v.is_finite()) {
                return Err(PoolError::NonFiniteSignal {
                    id: rec.id.clone(),
                    line,
                    signal: name.clone(),
                });
            }
        }
        drop(first_line);

        let mut records: Vec<ExampleRecord> = numbered.into_iter().map(|(_, r)| r).collect();
        records.sort_by(|a, b| a.id.cmp(&b.id));

        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            groups.entry(rec.topic.as_str()).or_default().push(i);
        }
        let topics: Vec<Topic> = groups
            .into_iter()
            .map(|(name, members)| Topic {
                name: name.to_string(),
                members,
            })
            .collect();
        let mut topic_of = vec![0; records.len()];
        for (t, topic) in topics.iter().enumerate() {
            for &i in &topic.members {
                topic_of[i] = t;
            }
        }

        Ok(Self {
            records,
            topics,
            topic_of,
            embedding_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending id order.
    pub fn records(&self) -> &[ExampleRecord] {
        &self.records
    }

    pub fn record(&self, index: usize) -> &ExampleRecord {
        &self.records[index]
    }

    /// Topics in ascending name order.
    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    /// Index into [`Pool::topics`] of the topic that record `index` belongs to.
    pub fn topic_index(&self, index: usize) -> usize {
        self.topic_of[index]
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    /// True when every record carries an embedding.
    pub fn all_embedded(&self) -> bool {
        self.records.iter().all(|r| r.embedding.is_some())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
    }

    pub fn total_tokens(&self) -> u64 {
        self.records.iter().map(|r| u64::from(r.token_length)).sum()
    }

    /// Distinct labels in ascending order, or `None` if any record lacks one.
    pub fn labels(&self) -> Option<Vec<String>> {
        let mut labels = Vec::new();
        for r in &self.records {
            labels.push(r.label.clone()?);
        }
        labels.sort();
        labels.dedup();
        Some(labels)
    }
}

/// Number of records per topic.
pub fn topic_sizes(pool: &Pool) -> BTreeMap<String, usize> {
    pool.topics
        .iter()
        .map(|t| (t.name.clone(), t.members.len()))
        .collect()
}

pub fn load_pool(path: &Path, options: &LoadOptions) -> Result<Pool, PoolError> {
    let file = File::open(path).map_err(|source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_pool(BufReader::new(file), options).map_err(|e| match e {
        PoolError::Io { source, .. } => PoolError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses a pool from JSONL. Blank lines are skipped.
pub fn read_pool<R: BufRead>(reader: R, options: &LoadOptions) -> Result<Pool, PoolError> {
    let mut numbered = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| PoolError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| PoolError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        for key in raw.extra.keys() {
            if options.reject_unknown_keys {
                return Err(PoolError::UnknownKey {
                    line: line_no,
                    key: key.clone(),
                });
            }
            log::warn!("line {line_no}: ignoring unknown key {key:?}");
        }
        if raw.tokens < 1 || raw.tokens > i64::from(u32::MAX) {
            return Err(PoolError::NonPositiveTokens {
                id: raw.id,
                line: line_no,
                tokens: raw.tokens,
            });
        }
        numbered.push((
            line_no,
            ExampleRecord {
                id: raw.id,
                topic: raw.topic,
                token_length: raw.tokens as u32,
                label: raw.label,
                embedding: raw.embedding,
                raw_signals: raw.signals,
            },
        ));
    }
    Pool::from_numbered(numbered)
}

/// Writes the pool as JSONL in id order. Reals keep full precision so that
/// [`read_pool`] reproduces the pool exactly.
pub fn write_pool<W: Write>(pool: &Pool, mut writer: W) -> std::io::Result<()> {
    for rec in &pool.records {
        let raw = RawRecord {
            id: rec.id.clone(),
            topic: rec.topic.clone(),
            tokens: i64::from(rec.token_length),
            label: rec.label.clone(),
            embedding: rec.embedding.clone(),
            signals: rec.raw_signals.clone(),
            extra: BTreeMap::new(),
        };
        serde_json::to_writer(&mut writer, &raw)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Pool, PoolError> {
        read_pool(text.as_bytes(), &LoadOptions::default())
    }

    #[test]
    fn three_lines_two_topics() {
        let pool = parse(
            r#"{"id":"c","topic":"a","tokens":3}
{"id":"a","topic":"a","tokens":5}
{"id":"b","topic":"b","tokens":7}
"#,
        )
        .unwrap();
        let sizes = topic_sizes(&pool);
        assert_eq!(sizes["a"], 2);
        assert_eq!(sizes["b"], 1);
        let ids: Vec<_> = pool.records().iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(pool.topics()[0].members, vec![0, 2]);
        assert_eq!(pool.topic_index(1), 1);
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let err = parse(
            r#"{"id":"x","topic":"a","tokens":3}
{"id":"x","topic":"b","tokens":3}"#,
        )
        .unwrap_err();
        match &err {
            PoolError::DuplicateId { id, line, first_line } => {
                assert_eq!(id, "x");
                assert_eq!((*line, *first_line), (2, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("\"x\""));
    }

    #[test]
    fn ragged_embeddings_rejected() {
        let err = parse(
            r#"{"id":"a","topic":"t","tokens":1,"embedding":[1,2,3,4]}
{"id":"b","topic":"t","tokens":1,"embedding":[1,2,3]}"#,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            PoolError::DimensionMismatch { line: 2, expected: 4, found: 3, .. }
        ));
    }

    #[test]
    fn non_positive_tokens_rejected() {
        let err = parse(r#"{"id":"a","topic":"t","tokens":0}"#).unwrap_err();
        assert!(matches!(err, PoolError::NonPositiveTokens { line: 1, tokens: 0, .. }));
        let err = parse("\n{\"id\":\"a\",\"topic\":\"t\",\"tokens\":-4}").unwrap_err();
        assert!(matches!(err, PoolError::NonPositiveTokens { line: 2, tokens: -4, .. }));
    }

    #[test]
    fn non_finite_signal_rejected() {
        let recs = vec![
            ExampleRecord::new("a", "t", 1).with_signal("nll", 1.0),
            ExampleRecord::new("b", "t", 1).with_signal("nll", f64::NAN),
        ];
        let err = Pool::from_records(recs).unwrap_err();
        assert!(matches!(err, PoolError::NonFiniteSignal { line: 2, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("{\"id\":\"a\",\"topic\":\"t\",\"tokens\":1}\nnot json").unwrap_err();
        assert!(matches!(err, PoolError::Parse { line: 2, .. }));
    }

    #[test]
    fn unknown_keys_warn_or_reject() {
        let text = r#"{"id":"a","topic":"t","tokens":1,"text":"hello"}"#;
        assert_eq!(parse(text).unwrap().len(), 1);
        let strict = LoadOptions {
            reject_unknown_keys: true,
        };
        let err = read_pool(text.as_bytes(), &strict).unwrap_err();
        assert!(matches!(err, PoolError::UnknownKey { ref key, .. } if key == "text"));
    }

    #[test]
    fn topic_sizes_edge_cases() {
        assert!(topic_sizes(&Pool::from_records(vec![]).unwrap()).is_empty());
        let recs = (0..5).map(|i| ExampleRecord::new(format!("{i}"), "t", 1)).collect();
        let sizes = topic_sizes(&Pool::from_records(recs).unwrap());
        assert_eq!(sizes.len(), 1);
        assert_eq!(sizes["t"], 5);
    }

    #[test]
    fn missing_embeddings_allowed_at_load() {
        let pool = parse(
            r#"{"id":"a","topic":"t","tokens":1,"embedding":[0.5]}
{"id":"b","topic":"t","tokens":1}"#,
        )
        .unwrap();
        assert_eq!(pool.embedding_dim(), Some(1));
        assert!(!pool.all_embedded());
    }

    #[test]
    fn labels_require_every_record() {
        let pool = Pool::from_records(vec![
            ExampleRecord::new("a", "t", 1).with_label("y"),
            ExampleRecord::new("b", "t", 1).with_label("x"),
            ExampleRecord::new("c", "t", 1).with_label("y"),
        ])
        .unwrap();
        assert_eq!(pool.labels().unwrap(), vec!["x", "y"]);
        let pool = Pool::from_records(vec![
            ExampleRecord::new("a", "t", 1).with_label("y"),
            ExampleRecord::new("b", "t", 1),
        ])
        .unwrap();
        assert!(pool.labels().is_none());
    }
}
