//! Query sampling by inverse random walks.
//!
//! A walk starts at an answer entity and picks incoming edges backwards
//! through the template, so positive parts always have an answer. Negated
//! branches are walked back from a member of the set they are subtracted
//! from, so the negation removes something.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetMeta, QueryDataset, QueryRecord};
use super::{eval_plan, follow, EntitySet};
use crate::kg::{AdjacencyIndex, EntityId, KnowledgeGraph, RelationId, Split};
use crate::query::{compile, QueryInstance, QueryStructure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// Every query needs at least one answer that relies on a held-out edge.
    Generalization,
    /// All answers are easy; hard is empty.
    Entailment,
}

impl std::str::FromStr for SampleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generalization" => Ok(Self::Generalization),
            "entailment" => Ok(Self::Entailment),
            _ => Err(format!("unknown mode `{s}` (generalization|entailment)")),
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Generalization => "generalization",
            Self::Entailment => "entailment",
        })
    }
}

/// Per-structure counts with negation structures at a tenth of the rest.
pub fn negation_ratio_counts(structures: &[QueryStructure], per_structure: usize) -> Vec<(QueryStructure, usize)> {
    structures
        .iter()
        .map(|&s| (s, if s.has_negation() { (per_structure / 10).max(1) } else { per_structure }))
        .collect()
}

struct Walker<'a> {
    full: &'a AdjacencyIndex,
    incoming: Vec<Vec<(EntityId, RelationId)>>,
    targets: Vec<EntityId>,
    edges: Vec<(EntityId, RelationId, EntityId)>,
}

impl<'a> Walker<'a> {
    fn new(full: &'a AdjacencyIndex) -> Self {
        let mut incoming = vec![Vec::new(); full.num_entities()];
        let edges: Vec<_> = full.triples().into_iter().map(|t| (t.head, t.relation, t.tail)).collect();
        for &(h, r, t) in &edges {
            incoming[t].push((h, r));
        }
        let targets = (0..full.num_entities()).filter(|&e| !incoming[e].is_empty()).collect();
        Self { full, incoming, targets, edges }
    }

    fn back(&self, x: EntityId, rng: &mut ChaCha8Rng) -> Option<(EntityId, RelationId)> {
        self.incoming[x].choose(rng).copied()
    }

    fn back_from(&self, set: &EntitySet, rng: &mut ChaCha8Rng) -> Option<(EntityId, RelationId)> {
        let u = *set.as_slice().choose(rng)?;
        self.back(u, rng)
    }

    fn path_set(&self, anchor: EntityId, rels: &[RelationId]) -> EntitySet {
        rels.iter().fold(EntitySet::singleton(anchor), |s, &r| follow(r, &s, self.full))
    }

    fn walk(&self, s: QueryStructure, rng: &mut ChaCha8Rng) -> Option<QueryInstance> {
        use QueryStructure as S;
        let t = *self.targets.choose(rng)?;
        let (anchors, relations) = match s {
            S::P1 => {
                let (a, p) = self.back(t, rng)?;
                (vec![a], vec![p])
            }
            S::P2 => {
                let (v, q) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                (vec![a], vec![p, q])
            }
            S::P3 => {
                let (w, r) = self.back(t, rng)?;
                let (v, q) = self.back(w, rng)?;
                let (a, p) = self.back(v, rng)?;
                (vec![a], vec![p, q, r])
            }
            S::I2 => {
                let (a, p) = self.back(t, rng)?;
                let (b, q) = self.back(t, rng)?;
                if (a, p) == (b, q) {
                    return None;
                }
                (vec![a, b], vec![p, q])
            }
            S::I3 => {
                let (a, p) = self.back(t, rng)?;
                let (b, q) = self.back(t, rng)?;
                let (c, r) = self.back(t, rng)?;
                if (a, p) == (b, q) || (a, p) == (c, r) || (b, q) == (c, r) {
                    return None;
                }
                (vec![a, b, c], vec![p, q, r])
            }
            S::Pi => {
                let (v, q) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                let (b, r) = self.back(t, rng)?;
                (vec![a, b], vec![p, q, r])
            }
            S::Ip => {
                let (v, r) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                let (b, q) = self.back(v, rng)?;
                if (a, p) == (b, q) {
                    return None;
                }
                (vec![a, b], vec![p, q, r])
            }
            S::In2 => {
                let (a, p) = self.back(t, rng)?;
                let (b, q) = self.back_from(&self.path_set(a, &[p]), rng)?;
                (vec![a, b], vec![p, q])
            }
            S::In3 => {
                let (a, p) = self.back(t, rng)?;
                let (b, q) = self.back(t, rng)?;
                if (a, p) == (b, q) {
                    return None;
                }
                let pos = self.path_set(a, &[p]).intersection(&self.path_set(b, &[q]));
                let (c, r) = self.back_from(&pos, rng)?;
                (vec![a, b, c], vec![p, q, r])
            }
            S::Pin => {
                let (v, q) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                let (b, r) = self.back_from(&self.path_set(a, &[p, q]), rng)?;
                (vec![a, b], vec![p, q, r])
            }
            S::Pni => {
                let (b, r) = self.back(t, rng)?;
                let u = *self.path_set(b, &[r]).as_slice().choose(rng)?;
                let (v, q) = self.back(u, rng)?;
                let (a, p) = self.back(v, rng)?;
                (vec![a, b], vec![p, q, r])
            }
            S::Inp => {
                let (v, r) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                let (b, q) = self.back_from(&self.path_set(a, &[p]), rng)?;
                (vec![a, b], vec![p, q, r])
            }
            S::U2 => {
                let (a, p) = self.back(t, rng)?;
                let &(b, q, _) = self.edges.choose(rng)?;
                if (a, p) == (b, q) {
                    return None;
                }
                (vec![a, b], vec![p, q])
            }
            S::Up => {
                let (v, r) = self.back(t, rng)?;
                let (a, p) = self.back(v, rng)?;
                let &(b, q, _) = self.edges.choose(rng)?;
                if (a, p) == (b, q) {
                    return None;
                }
                (vec![a, b], vec![p, q, r])
            }
        };
        QueryInstance::new(s, anchors, relations).ok()
    }
}

/// Easy/hard answers of an instance. In generalization mode easy answers
/// are those also derivable from training edges alone and hard answers the
/// rest; in entailment mode every answer is easy.
pub fn annotate(
    instance: QueryInstance,
    full: &AdjacencyIndex,
    train: &AdjacencyIndex,
    mode: SampleMode,
) -> QueryRecord {
    let plan = compile(&instance).expect("sampled instances are well formed");
    let answers = eval_plan(&plan, full);
    match mode {
        SampleMode::Entailment => QueryRecord { instance, easy: answers, hard: EntitySet::empty() },
        SampleMode::Generalization => {
            let train_answers = eval_plan(&plan, train);
            QueryRecord {
                instance,
                easy: answers.intersection(&train_answers),
                hard: answers.difference(&train_answers),
            }
        }
    }
}

fn structure_seed(seed: u64, s: QueryStructure) -> u64 {
    let idx = QueryStructure::ALL.iter().position(|&x| x == s).unwrap() as u64;
    seed ^ (idx + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Samples `count` distinct instances per listed structure. Answers are
/// computed over the triples of `splits`; easy answers over the train split.
/// Each structure uses its own random stream, so results do not depend on
/// the order or presence of other structures.
pub fn sample_dataset(
    graph: &KnowledgeGraph,
    counts: &[(QueryStructure, usize)],
    seed: u64,
    mode: SampleMode,
    splits: &[Split],
) -> QueryDataset {
    let full = graph.build_index(splits);
    let train = graph.build_index(&[Split::Train]);
    let walker = Walker::new(&full);
    let mut records = Vec::new();
    let mut per_structure = BTreeMap::new();
    for &(s, count) in counts {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed(seed, s));
        let mut seen = HashSet::new();
        let mut got = 0;
        let mut attempts = 0;
        while got < count && attempts < 100 * count {
            attempts += 1;
            let Some(inst) = walker.walk(s, &mut rng) else { continue };
            if seen.contains(&inst) {
                continue;
            }
            let rec = annotate(inst.clone(), &full, &train, mode);
            let ok = match mode {
                SampleMode::Entailment => !rec.easy.is_empty(),
                SampleMode::Generalization => !rec.hard.is_empty(),
            };
            if ok {
                seen.insert(inst);
                records.push(rec);
                got += 1;
            }
        }
        if got < count {
            warn!("{s}: sampled only {got} of {count} queries within {attempts} attempts");
        }
        per_structure.insert(s.name().to_owned(), got);
    }
    QueryDataset {
        records,
        meta: DatasetMeta {
            graph_hash: graph.content_hash(),
            mode,
            seed,
            graph_splits: splits.iter().map(ToString::to_string).collect(),
            counts: per_structure,
        },
    }
}

/// Samples one structure over the whole graph.
pub fn sample_queries(
    graph: &KnowledgeGraph,
    structure: QueryStructure,
    count: usize,
    seed: u64,
    mode: SampleMode,
) -> QueryDataset {
    sample_dataset(graph, &[(structure, count)], seed, mode, &Split::ALL)
}
