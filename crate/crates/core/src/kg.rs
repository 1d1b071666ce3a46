//! Knowledge graph storage: vocabularies, split-labelled triples, TSV I/O,
//! a synthetic generator, and adjacency indexes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: expected 3 tab-separated fields, found {found}")]
    MalformedLine { path: String, line: usize, found: usize },
    #[error("triple ({head}, {relation}, {tail}) appears in multiple splits")]
    TripleInMultipleSplits { head: String, relation: String, tail: String },
    #[error("no triples found in the provided files")]
    Empty,
    #[error("invalid generator parameters: {0}")]
    InvalidParameters(String),
    #[error("io error on {path}")]
    Io { path: String, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> KgError + '_ {
    move |source| KgError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Bidirectional mapping between names and dense ids, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for name in names {
            vocab.intern(&name.into());
        }
        vocab
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self { head, relation, tail }
    }
}

/// Entity and relation vocabularies plus a duplicate-free triple set whose
/// split labels partition it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<(Triple, Split)>,
}

impl KnowledgeGraph {
    /// Builds a graph from labelled triples. Ids must be in range and no
    /// triple may appear twice.
    pub fn from_parts(entities: Vocab, relations: Vocab, triples: Vec<(Triple, Split)>) -> Result<Self, KgError> {
        let mut seen = HashSet::with_capacity(triples.len());
        for (t, _) in &triples {
            if t.head >= entities.len() || t.tail >= entities.len() || t.relation >= relations.len() {
                return Err(KgError::InvalidParameters(format!("triple {t:?} outside vocabulary")));
            }
            if !seen.insert(*t) {
                return Err(KgError::TripleInMultipleSplits {
                    head: entities.name(t.head).to_owned(),
                    relation: relations.name(t.relation).to_owned(),
                    tail: entities.name(t.tail).to_owned(),
                });
            }
        }
        Ok(Self { entities, relations, triples })
    }

    /// Loads the three split files. Vocabulary ids are assigned in first
    /// appearance order across train, valid, test. Repeated lines within one
    /// file collapse; a triple shared by two files is an error.
    pub fn load_tsv(train: &Path, valid: &Path, test: &Path) -> Result<Self, KgError> {
        Self::load_with_vocab(Vocab::new(), Vocab::new(), [train, valid, test])
    }

    /// Loads `train.tsv`, `valid.tsv`, `test.tsv` from a directory. When the
    /// directory also holds `entities.txt` / `relations.txt`, those fix the id
    /// order and keep entities that have no triples.
    pub fn load_dir(dir: &Path) -> Result<Self, KgError> {
        let read_vocab = |name: &str| -> Result<Vocab, KgError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vocab::new());
            }
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(Vocab::from_names(text.lines().map(str::trim_end).filter(|l| !l.is_empty() && !l.starts_with('#'))))
        };
        let entities = read_vocab("entities.txt")?;
        let relations = read_vocab("relations.txt")?;
        let paths: Vec<PathBuf> = Split::ALL.iter().map(|s| dir.join(s.file_name())).collect();
        Self::load_with_vocab(entities, relations, [&paths[0], &paths[1], &paths[2]])
    }

    fn load_with_vocab(mut entities: Vocab, mut relations: Vocab, paths: [&Path; 3]) -> Result<Self, KgError> {
        let mut triples = Vec::new();
        let mut labels: HashMap<Triple, Split> = HashMap::new();
        for (split, path) in Split::ALL.into_iter().zip(paths) {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 3 {
                    return Err(KgError::MalformedLine {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        found: fields.len(),
                    });
                }
                let head = entities.intern(fields[0]);
                let relation = relations.intern(fields[1]);
                let tail = entities.intern(fields[2]);
                let triple = Triple::new(head, relation, tail);
                match labels.get(&triple) {
                    Some(&prev) if prev == split => {}
                    Some(_) => {
                        return Err(KgError::TripleInMultipleSplits {
                            head: fields[0].to_owned(),
                            relation: fields[1].to_owned(),
                            tail: fields[2].to_owned(),
                        })
                    }
                    None => {
                        labels.insert(triple, split);
                        triples.push((triple, split));
                    }
                }
            }
        }
        if triples.is_empty() {
            return Err(KgError::Empty);
        }
        Ok(Self { entities, relations, triples })
    }

    /// Writes split files sorted by id plus the two vocabulary files.
    pub fn write_dir(&self, dir: &Path) -> Result<(), KgError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for split in Split::ALL {
            let path = dir.join(split.file_name());
            fs::write(&path, self.split_tsv(split)).map_err(io_err(&path))?;
        }
        for (name, vocab) in [("entities.txt", &self.entities), ("relations.txt", &self.relations)] {
            let path = dir.join(name);
            let mut text = String::new();
            for n in vocab.names() {
                text.push_str(n);
                text.push('\n');
            }
            fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// TSV text of one split, sorted by (head, relation, tail) id.
    pub fn split_tsv(&self, split: Split) -> String {
        let mut rows: Vec<Triple> = self.triples.iter().filter(|(_, s)| *s == split).map(|(t, _)| *t).collect();
        rows.sort_unstable();
        let mut out = String::new();
        for t in rows {
            out.push_str(self.entities.name(t.head));
            out.push('\t');
            out.push_str(self.relations.name(t.relation));
            out.push('\t');
            out.push_str(self.entities.name(t.tail));
            out.push('\n');
        }
        out
    }

    /// SHA-256 over the vocabularies and the sorted split files.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for vocab in [&self.entities, &self.relations] {
            for n in vocab.names() {
                hasher.update(n.as_bytes());
                hasher.update(b"\n");
            }
            hasher.update(b"\x00");
        }
        for split in Split::ALL {
            hasher.update(self.split_tsv(split).as_bytes());
            hasher.update(b"\x00");
        }
        hex::encode(hasher.finalize())
    }

    /// Same vocabularies, only the triples whose label is in `splits`.
    pub fn restrict(&self, splits: &[Split]) -> Self {
        Self {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triples: self.triples.iter().filter(|(_, s)| splits.contains(s)).copied().collect(),
        }
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[(Triple, Split)] {
        &self.triples
    }

    pub fn count(&self, split: Split) -> usize {
        self.triples.iter().filter(|(_, s)| *s == split).count()
    }

    pub fn build_index(&self, splits: &[Split]) -> AdjacencyIndex {
        AdjacencyIndex::build(self, splits)
    }
}

/// Parameters of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub avg_out_degree: f64,
    pub valid_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

/// Entities per latent type in the synthetic generator.
const TYPE_SIZE: usize = 8;

/// Generates a typed random multi-relational graph.
///
/// Entities are spread over latent types of about eight members. Each
/// relation maps every type to a fixed target type, heads are drawn with a
/// heavy-tailed activity and tails with a heavy-tailed popularity inside the
/// target type. The result has `round(num_entities * avg_out_degree)`
/// distinct triples, shuffled and split by the given fractions. Held-out
/// edges are therefore predictable from the training edges.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<KnowledgeGraph, KgError> {
    let frac_ok = |f: f64| f > 0.0 && f < 1.0;
    if !frac_ok(cfg.valid_frac) || !frac_ok(cfg.test_frac) || cfg.valid_frac + cfg.test_frac >= 1.0 {
        return Err(KgError::InvalidParameters(format!(
            "valid-frac {} and test-frac {} must lie in (0,1) and sum below 1",
            cfg.valid_frac, cfg.test_frac
        )));
    }
    if cfg.num_entities < 2
        || cfg.num_relations == 0
        || cfg.avg_out_degree.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
    {
        return Err(KgError::InvalidParameters("need at least 2 entities, 1 relation and a positive degree".into()));
    }
    let n = cfg.num_entities;
    let total = (n as f64 * cfg.avg_out_degree).round() as usize;
    let n_valid = (total as f64 * cfg.valid_frac).round() as usize;
    let n_test = (total as f64 * cfg.test_frac).round() as usize;
    if total <= n_valid + n_test {
        return Err(KgError::InvalidParameters(format!(
            "{total} edges leave no training edges after {n_valid} valid and {n_test} test"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let num_types = n.div_ceil(TYPE_SIZE).max(1);
    let mut order: Vec<EntityId> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut type_of = vec![0usize; n];
    let mut members: Vec<Vec<EntityId>> = vec![Vec::new(); num_types];
    for (i, &e) in order.iter().enumerate() {
        type_of[e] = i % num_types;
        members[i % num_types].push(e);
    }
    let target_type: Vec<Vec<usize>> =
        (0..cfg.num_relations).map(|_| (0..num_types).map(|_| rng.gen_range(0..num_types)).collect()).collect();

    // Zipf-like weights: activity over heads, popularity within each type.
    let activity = cumulative(&zipf_weights(&mut rng, n, 0.8));
    let popularity: Vec<Vec<f64>> = members.iter().map(|m| cumulative(&zipf_weights(&mut rng, m.len(), 1.0))).collect();

    let capacity: usize =
        (0..n).map(|h| (0..cfg.num_relations).map(|r| members[target_type[r][type_of[h]]].len()).sum::<usize>()).sum();
    if total > capacity {
        return Err(KgError::InvalidParameters(format!(
            "{total} edges requested but the typed schema admits only {capacity}"
        )));
    }

    let mut seen = HashSet::with_capacity(total);
    let mut edges = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while edges.len() < total {
        attempts += 1;
        if attempts > 1000 * total.max(1) {
            return Err(KgError::InvalidParameters(format!(
                "could only place {} of {total} distinct edges",
                edges.len()
            )));
        }
        let head = sample_cumulative(&mut rng, &activity);
        let relation = rng.gen_range(0..cfg.num_relations);
        let ty = target_type[relation][type_of[head]];
        let tail = members[ty][sample_cumulative(&mut rng, &popularity[ty])];
        let triple = Triple::new(head, relation, tail);
        if seen.insert(triple) {
            edges.push(triple);
        }
    }
    edges.shuffle(&mut rng);
    let triples = edges
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let split = if i < n_valid {
                Split::Valid
            } else if i < n_valid + n_test {
                Split::Test
            } else {
                Split::Train
            };
            (t, split)
        })
        .collect();

    let entities = Vocab::from_names((0..n).map(|i| format!("e{i}")));
    let relations = Vocab::from_names((0..cfg.num_relations).map(|i| format!("r{i}")));
    KnowledgeGraph::from_parts(entities, relations, triples)
}

fn zipf_weights(rng: &mut ChaCha8Rng, n: usize, exponent: f64) -> Vec<f64> {
    let mut ranks: Vec<usize> = (1..=n).collect();
    ranks.shuffle(rng);
    ranks.into_iter().map(|r| (r as f64).powf(-exponent)).collect()
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn sample_cumulative(rng: &mut ChaCha8Rng, cumulative: &[f64]) -> usize {
    let x = rng.gen::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

/// Forward and reverse adjacency over a subset of splits.
#[derive(Debug, Clone)]
pub struct AdjacencyIndex {
    num_entities: usize,
    num_relations: usize,
    forward: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    reverse: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    len: usize,
}

impl AdjacencyIndex {
    pub fn build(graph: &KnowledgeGraph, splits: &[Split]) -> Self {
        let mut forward: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut reverse: HashMap<(EntityId, RelationId), Vec<EntityId>> = HashMap::new();
        let mut len = 0;
        for (t, s) in graph.triples() {
            if splits.contains(s) {
                forward.entry((t.head, t.relation)).or_default().push(t.tail);
                reverse.entry((t.tail, t.relation)).or_default().push(t.head);
                len += 1;
            }
        }
        for list in forward.values_mut().chain(reverse.values_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        Self { num_entities: graph.num_entities(), num_relations: graph.num_relations(), forward, reverse, len }
    }

    /// Tails of `(head, relation)`; empty for unknown pairs.
    pub fn tails(&self, head: EntityId, relation: RelationId) -> &[EntityId] {
        self.forward.get(&(head, relation)).map_or(&[], Vec::as_slice)
    }

    /// Heads of `(?, relation, tail)`.
    pub fn heads(&self, tail: EntityId, relation: RelationId) -> &[EntityId] {
        self.reverse.get(&(tail, relation)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.tails(head, relation).binary_search(&tail).is_ok()
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Number of indexed triples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// All indexed triples in (head, relation, tail) order.
    pub fn triples(&self) -> Vec<Triple> {
        let mut out: Vec<Triple> =
            self.forward.iter().flat_map(|(&(h, r), tails)| tails.iter().map(move |&t| Triple::new(h, r, t))).collect();
        out.sort_unstable();
        out
    }
}

/// Writes one split-free TSV file, used by tests and tooling.
pub fn write_triples<W: Write>(mut out: W, graph: &KnowledgeGraph, triples: &[Triple]) -> io::Result<()> {
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}",
            graph.entities().name(t.head),
            graph.relations().name(t.relation),
            graph.entities().name(t.tail)
        )?;
    }
    Ok(())
}
