//! Exact set semantics for query plans.
//!
//! Relation nodes follow every edge out of their input set (the maximal
//! Skolem assignment), conjunction intersects, disjunction unions and
//! negation complements against the whole entity universe.

mod dataset;
mod exhaustive;
mod sampling;

use crate::kg::{AdjacencyIndex, EntityId, RelationId};
use crate::query::{PlanNode, QueryPlan};

pub use dataset::{read_jsonl, write_jsonl, DatasetError, DatasetMeta, QueryDataset, QueryRecord};
pub use exhaustive::{exhaustive_eval, ExhaustiveError, ENUMERATION_LIMIT};
pub use sampling::{annotate, negation_ratio_counts, sample_dataset, sample_queries, SampleMode};

/// Sorted, duplicate-free entity ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct EntitySet(Vec<EntityId>);

impl EntitySet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn singleton(e: EntityId) -> Self {
        Self(vec![e])
    }

    pub fn from_unsorted(mut ids: Vec<EntityId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self(ids)
    }

    /// All ids `0..n`.
    pub fn universe(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[EntityId] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<EntityId> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, e: EntityId) -> bool {
        self.0.binary_search(&e).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Self(out)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        Self(self.0.iter().copied().filter(|e| other.contains(*e)).collect())
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self(self.0.iter().copied().filter(|e| !other.contains(*e)).collect())
    }

    /// Complement within `0..n`.
    pub fn complement(&self, n: usize) -> Self {
        Self((0..n).filter(|e| !self.contains(*e)).collect())
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.0.iter().all(|e| other.contains(*e))
    }
}

impl FromIterator<EntityId> for EntitySet {
    fn from_iter<I: IntoIterator<Item = EntityId>>(iter: I) -> Self {
        Self::from_unsorted(iter.into_iter().collect())
    }
}

/// Union of the `relation`-tails of every entity in `input`.
pub fn follow(relation: RelationId, input: &EntitySet, index: &AdjacencyIndex) -> EntitySet {
    let mut out = Vec::new();
    for e in input.iter() {
        out.extend_from_slice(index.tails(e, relation));
    }
    EntitySet::from_unsorted(out)
}

/// A set or the complement of a set; complements stay symbolic until a
/// node needs them materialised.
enum Value {
    Pos(EntitySet),
    Neg(EntitySet),
}

impl Value {
    fn materialise(self, n: usize) -> EntitySet {
        match self {
            Value::Pos(s) => s,
            Value::Neg(s) => s.complement(n),
        }
    }
}

/// Evaluates a valid plan bottom-up.
pub fn eval_plan(plan: &QueryPlan, index: &AdjacencyIndex) -> EntitySet {
    let n = index.num_entities();
    let mut values: Vec<Option<Value>> = (0..plan.nodes.len()).map(|_| None).collect();
    let order = plan.topo_order();
    // Inputs can be shared between consumers, so take by clone.
    let take = |values: &Vec<Option<Value>>, i: usize| -> Value {
        match values[i].as_ref().expect("inputs are evaluated first") {
            Value::Pos(s) => Value::Pos(s.clone()),
            Value::Neg(s) => Value::Neg(s.clone()),
        }
    };
    for id in order {
        let v = match &plan.nodes[id] {
            PlanNode::Anchor(e) => Value::Pos(EntitySet::singleton(*e)),
            PlanNode::Relate { relation, input } => {
                Value::Pos(follow(*relation, &take(&values, *input).materialise(n), index))
            }
            PlanNode::Negate(i) => match take(&values, *i) {
                Value::Pos(s) => Value::Neg(s),
                Value::Neg(s) => Value::Pos(s),
            },
            PlanNode::Conjoin(xs) => {
                let mut pos: Option<EntitySet> = None;
                let mut neg = EntitySet::empty();
                for &x in xs {
                    match take(&values, x) {
                        Value::Pos(s) => pos = Some(pos.map_or(s.clone(), |p| p.intersection(&s))),
                        Value::Neg(s) => neg = neg.union(&s),
                    }
                }
                match pos {
                    Some(p) => Value::Pos(p.difference(&neg)),
                    None => Value::Neg(neg),
                }
            }
            PlanNode::Disjoin(xs) => {
                let mut acc = EntitySet::empty();
                for &x in xs {
                    acc = acc.union(&take(&values, x).materialise(n));
                }
                Value::Pos(acc)
            }
        };
        values[id] = Some(v);
    }
    values[plan.sink].take().expect("sink evaluated").materialise(n)
}
