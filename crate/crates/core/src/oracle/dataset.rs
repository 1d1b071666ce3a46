//! Query datasets and their JSONL form.
//!
//! One record per line:
//! `{"structure":"pin","anchors":["a","b"],"relations":["p","q","r"],"easy":[...],"hard":[...]}`.
//! Dataset metadata lives next to it in `<file>.meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EntitySet;
use crate::kg::Vocab;
use crate::query::{QueryInstance, QueryStructure};

use super::sampling::SampleMode;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("dataset was generated from graph {found} but the provided graph hashes to {expected}")]
    GraphMismatch { expected: String, found: String },
    #[error("bad metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub instance: QueryInstance,
    pub easy: EntitySet,
    pub hard: EntitySet,
}

impl QueryRecord {
    pub fn answers(&self) -> EntitySet {
        self.easy.union(&self.hard)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub graph_hash: String,
    pub mode: SampleMode,
    pub seed: u64,
    /// Splits whose triples define the full answers.
    pub graph_splits: Vec<String>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryDataset {
    pub records: Vec<QueryRecord>,
    pub meta: DatasetMeta,
}

impl QueryDataset {
    pub fn by_structure(&self, s: QueryStructure) -> impl Iterator<Item = &QueryRecord> {
        self.records.iter().filter(move |r| r.instance.structure == s)
    }

    pub fn structures(&self) -> Vec<QueryStructure> {
        let mut out: Vec<QueryStructure> = self.records.iter().map(|r| r.instance.structure).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks easy ∩ hard = ∅ for every record.
    pub fn check_partition(&self) -> Result<(), String> {
        for (i, r) in self.records.iter().enumerate() {
            if !r.easy.intersection(&r.hard).is_empty() {
                return Err(format!("record {i} has overlapping easy and hard answers"));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    structure: QueryStructure,
    anchors: Vec<String>,
    relations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    easy: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hard: Option<Vec<String>>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes records and the sidecar metadata file.
pub fn write_jsonl(
    path: &Path,
    dataset: &QueryDataset,
    entities: &Vocab,
    relations: &Vocab,
) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let file = fs::File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    let names = |set: &EntitySet| set.iter().map(|e| entities.name(e).to_owned()).collect();
    for r in &dataset.records {
        let json = RecordJson {
            structure: r.instance.structure,
            anchors: r.instance.anchors.iter().map(|&e| entities.name(e).to_owned()).collect(),
            relations: r.instance.relations.iter().map(|&x| relations.name(x).to_owned()).collect(),
            easy: Some(names(&r.easy)),
            hard: Some(names(&r.hard)),
        };
        let line = serde_json::to_string(&json).expect("records serialise");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)?;
    let meta = serde_json::to_string_pretty(&dataset.meta).expect("metadata serialises");
    let mp = meta_path(path);
    fs::write(&mp, meta + "\n").map_err(|source| DatasetError::Io { path: mp.display().to_string(), source })
}

/// Reads a dataset, resolving names through the given vocabularies. When
/// `expected_hash` is set and the sidecar metadata exists, the hashes must
/// agree. Missing `easy`/`hard` fields read as empty sets.
pub fn read_jsonl(
    path: &Path,
    entities: &Vocab,
    relations: &Vocab,
    expected_hash: Option<&str>,
) -> Result<QueryDataset, DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mp = meta_path(path);
    let meta = if mp.exists() {
        let text =
            fs::read_to_string(&mp).map_err(|source| DatasetError::Io { path: mp.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Meta(e.to_string()))?
    } else {
        DatasetMeta {
            graph_hash: String::new(),
            mode: SampleMode::Generalization,
            seed: 0,
            graph_splits: Vec::new(),
            counts: BTreeMap::new(),
        }
    };
    if let Some(expected) = expected_hash {
        if !meta.graph_hash.is_empty() && meta.graph_hash != expected {
            return Err(DatasetError::GraphMismatch { expected: expected.to_owned(), found: meta.graph_hash });
        }
    }
    let reader = BufReader::new(fs::File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| DatasetError::Record { path: path.display().to_string(), line: i + 1, message };
        let json: RecordJson = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let entity = |n: &String| entities.id(n).ok_or_else(|| bad(format!("unknown entity `{n}`")));
        let anchors = json.anchors.iter().map(entity).collect::<Result<Vec<_>, _>>()?;
        let rels = json
            .relations
            .iter()
            .map(|n| relations.id(n).ok_or_else(|| bad(format!("unknown relation `{n}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        let instance = QueryInstance::new(json.structure, anchors, rels).map_err(|e| bad(e.to_string()))?;
        let set = |v: Option<Vec<String>>| -> Result<EntitySet, DatasetError> {
            Ok(EntitySet::from_unsorted(v.unwrap_or_default().iter().map(entity).collect::<Result<_, _>>()?))
        };
        let easy = set(json.easy)?;
        let hard = set(json.hard)?;
        records.push(QueryRecord { instance, easy, hard });
    }
    Ok(QueryDataset { records, meta })
}
