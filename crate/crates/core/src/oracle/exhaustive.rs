//! Brute-force answers by enumerating variable assignments.
//!
//! Each template is written out as a first-order formula over single
//! entities and checked literally against the triple set, without going
//! through plans or relation following. The negated chain of `pni` keeps its
//! bound variable inside the negation: under maximal Skolemisation the
//! negated term is the complement of everything reachable through the chain.

use std::collections::HashSet;

use thiserror::Error;

use super::EntitySet;
use crate::kg::{EntityId, KnowledgeGraph, Split};
use crate::query::{QueryInstance, QueryStructure};

/// Largest `|V|^(bound variables + 1)` the enumeration will attempt.
pub const ENUMERATION_LIMIT: f64 = 1e8;

#[derive(Debug, Error, PartialEq)]
pub enum ExhaustiveError {
    #[error("enumeration of {assignments:.3e} assignments exceeds the limit of {ENUMERATION_LIMIT:e}")]
    TooLarge { assignments: f64 },
    #[error(transparent)]
    Query(#[from] crate::query::QueryError),
}

#[derive(Clone, Copy)]
enum Term {
    Anchor(usize),
    Var(usize),
}

enum Fol {
    /// relation slot, head, tail
    Atom(usize, Term, Term),
    Not(Box<Fol>),
    And(Vec<Fol>),
    Or(Vec<Fol>),
    Exists(usize, Box<Fol>),
}

const T: Term = Term::Var(0);
const V: Term = Term::Var(1);
const W: Term = Term::Var(2);
const A: Term = Term::Anchor(0);
const B: Term = Term::Anchor(1);
const C: Term = Term::Anchor(2);

fn atom(r: usize, h: Term, t: Term) -> Fol {
    Fol::Atom(r, h, t)
}
fn not(f: Fol) -> Fol {
    Fol::Not(Box::new(f))
}
fn exists(var: Term, f: Fol) -> Fol {
    match var {
        Term::Var(v) => Fol::Exists(v, Box::new(f)),
        Term::Anchor(_) => unreachable!(),
    }
}

/// Body of the query with `T` free; returns the formula and the number of
/// bound variables.
fn formula(s: QueryStructure) -> (Fol, u32) {
    use Fol::{And, Or};
    use QueryStructure as S;
    match s {
        S::P1 => (atom(0, A, T), 0),
        S::P2 => (exists(V, And(vec![atom(0, A, V), atom(1, V, T)])), 1),
        S::P3 => (exists(V, exists(W, And(vec![atom(0, A, V), atom(1, V, W), atom(2, W, T)]))), 2),
        S::I2 => (And(vec![atom(0, A, T), atom(1, B, T)]), 0),
        S::I3 => (And(vec![atom(0, A, T), atom(1, B, T), atom(2, C, T)]), 0),
        S::Pi => (exists(V, And(vec![atom(0, A, V), atom(1, V, T), atom(2, B, T)])), 1),
        S::Ip => (exists(V, And(vec![atom(0, A, V), atom(1, B, V), atom(2, V, T)])), 1),
        S::In2 => (And(vec![atom(0, A, T), not(atom(1, B, T))]), 0),
        S::In3 => (And(vec![atom(0, A, T), atom(1, B, T), not(atom(2, C, T))]), 0),
        S::Pin => (exists(V, And(vec![atom(0, A, V), atom(1, V, T), not(atom(2, B, T))])), 1),
        S::Pni => (And(vec![atom(2, B, T), not(exists(V, And(vec![atom(0, A, V), atom(1, V, T)])))]), 1),
        S::Inp => (exists(V, And(vec![atom(0, A, V), not(atom(1, B, V)), atom(2, V, T)])), 1),
        S::U2 => (Or(vec![atom(0, A, T), atom(1, B, T)]), 0),
        S::Up => (exists(V, And(vec![Or(vec![atom(0, A, V), atom(1, B, V)]), atom(2, V, T)])), 1),
    }
}

struct Ctx<'a> {
    inst: &'a QueryInstance,
    edges: &'a HashSet<(EntityId, usize, EntityId)>,
    n: usize,
}

impl Ctx<'_> {
    fn term(&self, t: Term, env: &[EntityId; 3]) -> EntityId {
        match t {
            Term::Anchor(i) => self.inst.anchors[i],
            Term::Var(v) => env[v],
        }
    }

    fn holds(&self, f: &Fol, env: &mut [EntityId; 3]) -> bool {
        match f {
            Fol::Atom(r, h, t) => {
                let key = (self.term(*h, env), self.inst.relations[*r], self.term(*t, env));
                self.edges.contains(&key)
            }
            Fol::Not(x) => !self.holds(x, env),
            Fol::And(xs) => xs.iter().all(|x| self.holds(x, env)),
            Fol::Or(xs) => xs.iter().any(|x| self.holds(x, env)),
            Fol::Exists(v, x) => {
                let saved = env[*v];
                let found = (0..self.n).any(|e| {
                    env[*v] = e;
                    self.holds(x, env)
                });
                env[*v] = saved;
                found
            }
        }
    }
}

/// Entities `t` for which some assignment of the bound variables satisfies
/// the query body over the triples of `splits`.
pub fn exhaustive_eval(
    inst: &QueryInstance,
    graph: &KnowledgeGraph,
    splits: &[Split],
) -> Result<EntitySet, ExhaustiveError> {
    inst.check_arity()?;
    let n = graph.num_entities();
    let (body, bound) = formula(inst.structure);
    let assignments = (n as f64).powi(bound as i32 + 1);
    if assignments > ENUMERATION_LIMIT {
        return Err(ExhaustiveError::TooLarge { assignments });
    }
    let edges: HashSet<(EntityId, usize, EntityId)> =
        graph.triples().iter().filter(|(_, s)| splits.contains(s)).map(|(t, _)| (t.head, t.relation, t.tail)).collect();
    let ctx = Ctx { inst, edges: &edges, n };
    let mut env = [0; 3];
    let mut out = Vec::new();
    for t in 0..n {
        env[0] = t;
        if ctx.holds(&body, &mut env) {
            out.push(t);
        }
    }
    Ok(EntitySet::from_unsorted(out))
}
