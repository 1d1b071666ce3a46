//! Query structures, Skolem set-logic plans and their rewrites.
//!
//! A [`QueryInstance`] names one of the fourteen structures together with its
//! positional anchors and relations. [`compile`] turns it into a
//! [`QueryPlan`]: a single-sink DAG where relation nodes stand for maximal
//! Skolem functions and conjunction / disjunction / negation stand for set
//! intersection / union / complement.

mod parse;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, RelationId};

pub use parse::{parse_fol, ParseError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("unknown query structure `{0}`")]
    UnknownStructure(String),
    #[error("{structure} expects {expected_anchors} anchors and {expected_relations} relations, got {anchors} and {relations}")]
    Arity {
        structure: QueryStructure,
        expected_anchors: usize,
        expected_relations: usize,
        anchors: usize,
        relations: usize,
    },
    #[error("disjunction under negation is not supported")]
    DisjunctionUnderNegation,
    #[error("invalid plan: {0:?}")]
    Invalid(Vec<Violation>),
}

/// The closed set of query shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QueryStructure {
    #[serde(rename = "1p")]
    P1,
    #[serde(rename = "2p")]
    P2,
    #[serde(rename = "3p")]
    P3,
    #[serde(rename = "2i")]
    I2,
    #[serde(rename = "3i")]
    I3,
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "ip")]
    Ip,
    #[serde(rename = "2in")]
    In2,
    #[serde(rename = "3in")]
    In3,
    #[serde(rename = "pin")]
    Pin,
    #[serde(rename = "pni")]
    Pni,
    #[serde(rename = "inp")]
    Inp,
    #[serde(rename = "2u")]
    U2,
    #[serde(rename = "up")]
    Up,
}

impl QueryStructure {
    pub const ALL: [QueryStructure; 14] = [
        Self::P1,
        Self::P2,
        Self::P3,
        Self::I2,
        Self::I3,
        Self::Pi,
        Self::Ip,
        Self::In2,
        Self::In3,
        Self::Pin,
        Self::Pni,
        Self::Inp,
        Self::U2,
        Self::Up,
    ];

    /// Structures used for training in the generalization protocol; the
    /// remaining four are held out as unseen forms.
    pub const TRAINING: [QueryStructure; 10] =
        [Self::P1, Self::P2, Self::P3, Self::I2, Self::I3, Self::In2, Self::In3, Self::Inp, Self::Pin, Self::Pni];

    /// Existential positive structures (no negation).
    pub const EPFO: [QueryStructure; 9] =
        [Self::P1, Self::P2, Self::P3, Self::I2, Self::I3, Self::Pi, Self::Ip, Self::U2, Self::Up];

    pub const NEGATION: [QueryStructure; 5] = [Self::In2, Self::In3, Self::Inp, Self::Pin, Self::Pni];

    pub fn name(self) -> &'static str {
        match self {
            Self::P1 => "1p",
            Self::P2 => "2p",
            Self::P3 => "3p",
            Self::I2 => "2i",
            Self::I3 => "3i",
            Self::Pi => "pi",
            Self::Ip => "ip",
            Self::In2 => "2in",
            Self::In3 => "3in",
            Self::Pin => "pin",
            Self::Pni => "pni",
            Self::Inp => "inp",
            Self::U2 => "2u",
            Self::Up => "up",
        }
    }

    pub fn num_anchors(self) -> usize {
        match self {
            Self::P1 | Self::P2 | Self::P3 => 1,
            Self::I3 | Self::In3 => 3,
            _ => 2,
        }
    }

    pub fn num_relations(self) -> usize {
        match self {
            Self::P1 => 1,
            Self::P2 | Self::I2 | Self::In2 | Self::U2 => 2,
            _ => 3,
        }
    }

    pub fn has_negation(self) -> bool {
        Self::NEGATION.contains(&self)
    }

    pub fn has_union(self) -> bool {
        matches!(self, Self::U2 | Self::Up)
    }

    pub fn is_training(self) -> bool {
        Self::TRAINING.contains(&self)
    }

    /// Plan with anchor `i` bound to entity id `i` and relation `j` to id `j`.
    pub fn template(self) -> QueryPlan {
        let inst = QueryInstance {
            structure: self,
            anchors: (0..self.num_anchors()).collect(),
            relations: (0..self.num_relations()).collect(),
        };
        compile(&inst).expect("template arity is consistent")
    }
}

impl fmt::Display for QueryStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QueryStructure {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|q| q.name() == s).ok_or_else(|| QueryError::UnknownStructure(s.to_owned()))
    }
}

/// A structure with its anchors (a, b, c) and relations (p, q, r) in
/// template reading order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryInstance {
    pub structure: QueryStructure,
    pub anchors: Vec<EntityId>,
    pub relations: Vec<RelationId>,
}

impl QueryInstance {
    pub fn new(
        structure: QueryStructure,
        anchors: Vec<EntityId>,
        relations: Vec<RelationId>,
    ) -> Result<Self, QueryError> {
        let inst = Self { structure, anchors, relations };
        inst.check_arity()?;
        Ok(inst)
    }

    pub fn check_arity(&self) -> Result<(), QueryError> {
        let s = self.structure;
        if self.anchors.len() != s.num_anchors() || self.relations.len() != s.num_relations() {
            return Err(QueryError::Arity {
                structure: s,
                expected_anchors: s.num_anchors(),
                expected_relations: s.num_relations(),
                anchors: self.anchors.len(),
                relations: self.relations.len(),
            });
        }
        Ok(())
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PlanNode {
    Anchor(EntityId),
    Relate { relation: RelationId, input: NodeId },
    Negate(NodeId),
    Conjoin(Vec<NodeId>),
    Disjoin(Vec<NodeId>),
}

impl PlanNode {
    pub fn inputs(&self) -> &[NodeId] {
        match self {
            PlanNode::Anchor(_) => &[],
            PlanNode::Relate { input, .. } | PlanNode::Negate(input) => std::slice::from_ref(input),
            PlanNode::Conjoin(xs) | PlanNode::Disjoin(xs) => xs,
        }
    }
}

/// A DAG of plan nodes with a designated sink.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct QueryPlan {
    pub nodes: Vec<PlanNode>,
    pub sink: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Violation {
    Empty,
    DanglingInput { node: NodeId, input: NodeId },
    Cycle,
    MultipleSinks(Vec<NodeId>),
    SinkMismatch { declared: NodeId, actual: NodeId },
    NonAnchorSource(NodeId),
    BadArity { node: NodeId, arity: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => f.write_str("empty plan"),
            Violation::DanglingInput { node, input } => {
                write!(f, "node {node} reads missing node {input}")
            }
            Violation::Cycle => f.write_str("cycle"),
            Violation::MultipleSinks(s) => write!(f, "multiple sinks {s:?}"),
            Violation::SinkMismatch { declared, actual } => {
                write!(f, "declared sink {declared} but the sink is {actual}")
            }
            Violation::NonAnchorSource(n) => write!(f, "non-anchor source {n}"),
            Violation::BadArity { node, arity } => write!(f, "node {node} has arity {arity}"),
        }
    }
}

impl QueryPlan {
    /// Anchor entity ids in node order.
    pub fn anchors(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            PlanNode::Anchor(e) => Some(*e),
            _ => None,
        })
    }

    pub fn has_disjunction(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n, PlanNode::Disjoin(_)))
    }

    /// Nodes reachable from the sink, inputs before consumers. Assumes an
    /// acyclic plan with in-range inputs.
    pub fn topo_order(&self) -> Vec<NodeId> {
        fn visit(plan: &QueryPlan, n: NodeId, seen: &mut [bool], out: &mut Vec<NodeId>) {
            if seen[n] {
                return;
            }
            seen[n] = true;
            for &i in plan.nodes[n].inputs() {
                visit(plan, i, seen, out);
            }
            out.push(n);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut out = Vec::with_capacity(self.nodes.len());
        visit(self, self.sink, &mut seen, &mut out);
        out
    }

    /// Renders the plan as a Skolem set-logic term, e.g. `f1(f0(e0)) ∧ ¬f2(e1)`.
    pub fn render(&self) -> String {
        fn go(plan: &QueryPlan, n: NodeId, out: &mut String, nested: bool) {
            match &plan.nodes[n] {
                PlanNode::Anchor(e) => out.push_str(&format!("e{e}")),
                PlanNode::Relate { relation, input } => {
                    out.push_str(&format!("f{relation}("));
                    go(plan, *input, out, false);
                    out.push(')');
                }
                PlanNode::Negate(i) => {
                    out.push('¬');
                    go(plan, *i, out, true);
                }
                PlanNode::Conjoin(xs) | PlanNode::Disjoin(xs) => {
                    let op = if matches!(plan.nodes[n], PlanNode::Conjoin(_)) { " ∧ " } else { " ∨ " };
                    if nested {
                        out.push('(');
                    }
                    for (k, x) in xs.iter().enumerate() {
                        if k > 0 {
                            out.push_str(op);
                        }
                        go(plan, *x, out, true);
                    }
                    if nested {
                        out.push(')');
                    }
                }
            }
        }
        let mut s = String::new();
        go(self, self.sink, &mut s, false);
        s
    }
}

struct PlanBuilder {
    nodes: Vec<PlanNode>,
}

impl PlanBuilder {
    fn push(&mut self, node: PlanNode) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
    fn anchor(&mut self, e: EntityId) -> NodeId {
        self.push(PlanNode::Anchor(e))
    }
    fn relate(&mut self, relation: RelationId, input: NodeId) -> NodeId {
        self.push(PlanNode::Relate { relation, input })
    }
    fn path(&mut self, anchor: EntityId, relations: &[RelationId]) -> NodeId {
        let mut n = self.anchor(anchor);
        for &r in relations {
            n = self.relate(r, n);
        }
        n
    }
    fn negate(&mut self, n: NodeId) -> NodeId {
        self.push(PlanNode::Negate(n))
    }
    fn and(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(PlanNode::Conjoin(xs))
    }
    fn or(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(PlanNode::Disjoin(xs))
    }
    fn finish(self, sink: NodeId) -> QueryPlan {
        QueryPlan { nodes: self.nodes, sink }
    }
}

/// Builds the Skolem set-logic plan of an instance. Nodes are emitted in
/// topological order.
pub fn compile(inst: &QueryInstance) -> Result<QueryPlan, QueryError> {
    inst.check_arity()?;
    use QueryStructure as S;
    let a = &inst.anchors;
    let r = &inst.relations;
    let mut b = PlanBuilder { nodes: Vec::with_capacity(8) };
    let sink = match inst.structure {
        S::P1 => b.path(a[0], &r[..1]),
        S::P2 => b.path(a[0], &r[..2]),
        S::P3 => b.path(a[0], &r[..3]),
        S::I2 => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            b.and(vec![x, y])
        }
        S::I3 => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let z = b.path(a[2], &r[2..3]);
            b.and(vec![x, y, z])
        }
        S::Pi => {
            let x = b.path(a[0], &r[..2]);
            let y = b.path(a[1], &r[2..3]);
            b.and(vec![x, y])
        }
        S::Ip => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let i = b.and(vec![x, y]);
            b.relate(r[2], i)
        }
        S::In2 => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let ny = b.negate(y);
            b.and(vec![x, ny])
        }
        S::In3 => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let z = b.path(a[2], &r[2..3]);
            let nz = b.negate(z);
            b.and(vec![x, y, nz])
        }
        S::Pin => {
            let x = b.path(a[0], &r[..2]);
            let y = b.path(a[1], &r[2..3]);
            let ny = b.negate(y);
            b.and(vec![x, ny])
        }
        S::Pni => {
            let x = b.path(a[0], &r[..2]);
            let nx = b.negate(x);
            let y = b.path(a[1], &r[2..3]);
            b.and(vec![nx, y])
        }
        S::Inp => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let ny = b.negate(y);
            let i = b.and(vec![x, ny]);
            b.relate(r[2], i)
        }
        S::U2 => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            b.or(vec![x, y])
        }
        S::Up => {
            let x = b.path(a[0], &r[..1]);
            let y = b.path(a[1], &r[1..2]);
            let u = b.or(vec![x, y]);
            b.relate(r[2], u)
        }
    };
    Ok(b.finish(sink))
}

/// Checks the structural rules of a plan; returns every violation found.
pub fn validate(plan: &QueryPlan) -> Result<(), Vec<Violation>> {
    let n = plan.nodes.len();
    if n == 0 {
        return Err(vec![Violation::Empty]);
    }
    let mut violations = Vec::new();
    let mut consumed = vec![false; n];
    for (id, node) in plan.nodes.iter().enumerate() {
        for &i in node.inputs() {
            if i >= n {
                violations.push(Violation::DanglingInput { node: id, input: i });
            } else {
                consumed[i] = true;
            }
        }
        match node {
            PlanNode::Conjoin(xs) | PlanNode::Disjoin(xs) if xs.len() < 2 => {
                violations.push(Violation::BadArity { node: id, arity: xs.len() });
            }
            _ => {}
        }
        if node.inputs().is_empty() && !matches!(node, PlanNode::Anchor(_)) {
            violations.push(Violation::NonAnchorSource(id));
        }
    }
    if has_cycle(plan) {
        violations.push(Violation::Cycle);
    }
    let sinks: Vec<NodeId> = (0..n).filter(|&i| !consumed[i]).collect();
    match sinks.as_slice() {
        [] => {
            if !violations.contains(&Violation::Cycle) {
                violations.push(Violation::Cycle);
            }
        }
        [only] => {
            if *only != plan.sink {
                violations.push(Violation::SinkMismatch { declared: plan.sink, actual: *only });
            }
        }
        _ => violations.push(Violation::MultipleSinks(sinks)),
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

fn has_cycle(plan: &QueryPlan) -> bool {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    fn dfs(plan: &QueryPlan, n: NodeId, marks: &mut [Mark]) -> bool {
        match marks[n] {
            Mark::Active => return true,
            Mark::Done => return false,
            Mark::New => {}
        }
        marks[n] = Mark::Active;
        for &i in plan.nodes[n].inputs() {
            if i < marks.len() && dfs(plan, i, marks) {
                return true;
            }
        }
        marks[n] = Mark::Done;
        false
    }
    let mut marks = vec![Mark::New; plan.nodes.len()];
    (0..plan.nodes.len()).any(|n| dfs(plan, n, &mut marks))
}

/// Rewrites a plan into union-free branches whose answer union equals the
/// plan's answers. Relation following distributes over union, conjunction
/// distributes by cartesian product.
pub fn to_dnf(plan: &QueryPlan) -> Result<Vec<QueryPlan>, QueryError> {
    validate(plan).map_err(QueryError::Invalid)?;
    if !plan.has_disjunction() {
        return Ok(vec![plan.clone()]);
    }
    // Each alternative is a tree over the original nodes, re-emitted fresh.
    #[derive(Clone)]
    enum Tree {
        Anchor(EntityId),
        Relate(RelationId, Box<Tree>),
        Negate(Box<Tree>),
        Conjoin(Vec<Tree>),
    }
    fn alts(plan: &QueryPlan, n: NodeId) -> Result<Vec<Tree>, QueryError> {
        Ok(match &plan.nodes[n] {
            PlanNode::Anchor(e) => vec![Tree::Anchor(*e)],
            PlanNode::Relate { relation, input } => {
                alts(plan, *input)?.into_iter().map(|t| Tree::Relate(*relation, Box::new(t))).collect()
            }
            PlanNode::Negate(i) => {
                let inner = alts(plan, *i)?;
                if inner.len() != 1 {
                    return Err(QueryError::DisjunctionUnderNegation);
                }
                vec![Tree::Negate(Box::new(inner.into_iter().next().unwrap()))]
            }
            PlanNode::Disjoin(xs) => {
                let mut out = Vec::new();
                for &x in xs {
                    out.extend(alts(plan, x)?);
                }
                out
            }
            PlanNode::Conjoin(xs) => {
                let mut acc: Vec<Vec<Tree>> = vec![Vec::new()];
                for &x in xs {
                    let choices = alts(plan, x)?;
                    acc = acc
                        .into_iter()
                        .flat_map(|prefix| {
                            choices.iter().map(move |c| {
                                let mut p = prefix.clone();
                                p.push(c.clone());
                                p
                            })
                        })
                        .collect();
                }
                acc.into_iter().map(Tree::Conjoin).collect()
            }
        })
    }
    fn emit(t: &Tree, b: &mut PlanBuilder) -> NodeId {
        match t {
            Tree::Anchor(e) => b.anchor(*e),
            Tree::Relate(r, i) => {
                let x = emit(i, b);
                b.relate(*r, x)
            }
            Tree::Negate(i) => {
                let x = emit(i, b);
                b.negate(x)
            }
            Tree::Conjoin(xs) => {
                let ids = xs.iter().map(|x| emit(x, b)).collect();
                b.and(ids)
            }
        }
    }
    Ok(alts(plan, plan.sink)?
        .iter()
        .map(|t| {
            let mut b = PlanBuilder { nodes: Vec::new() };
            let sink = emit(t, &mut b);
            b.finish(sink)
        })
        .collect())
}
