//! A linear surface syntax for the query templates.
//!
//! ```text
//! query := EXISTS var (',' var)* '.' disj
//! disj  := conj (OR conj)*
//! conj  := lit (AND lit)*
//! lit   := NOT lit | atom | '(' disj ')' | '[' disj ']'
//! atom  := name '(' name ',' name ')'
//! ```
//!
//! `∃ ∧ ∨ ¬` are accepted for the keywords. Names listed after `EXISTS` are
//! variables, all other argument names are anchor entities. The variable that
//! never occurs as a first argument is the target.
//!
//! The formula is turned into a plan by defining each variable from the atoms
//! that end in it, then matched against the fourteen template plans up to
//! reordering of conjuncts and disjuncts.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::{compile, validate, NodeId, PlanNode, QueryInstance, QueryPlan, QueryStructure};
use crate::kg::{EntityId, RelationId, Vocab};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("syntax error at position {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("unsupported structure: {0}")]
    Unsupported(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Exists,
    And,
    Or,
    Not,
    Dot,
    Comma,
    Open(char),
    Close(char),
    Name(String),
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | ':' | '/')
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let single = match c {
            '∃' => Some(Tok::Exists),
            '∧' => Some(Tok::And),
            '∨' => Some(Tok::Or),
            '¬' => Some(Tok::Not),
            '.' => Some(Tok::Dot),
            ',' => Some(Tok::Comma),
            '(' | '[' => Some(Tok::Open(c)),
            ')' | ']' => Some(Tok::Close(c)),
            _ => None,
        };
        if let Some(t) = single {
            out.push((pos, t));
            i += 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_name_char(c) {
            while i < chars.len() && is_name_char(chars[i].1) {
                i += 1;
            }
            let end = chars.get(i).map_or(text.len(), |&(p, _)| p);
            out.push((
                pos,
                match &text[pos..end] {
                    "EXISTS" => Tok::Exists,
                    "AND" => Tok::And,
                    "OR" => Tok::Or,
                    "NOT" => Tok::Not,
                    word => Tok::Name(word.to_owned()),
                },
            ));
            continue;
        }
        return Err(ParseError::Syntax { pos, message: format!("unexpected character `{c}`") });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
enum Formula {
    Atom { relation: String, head: String, tail: String },
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        Err(ParseError::Syntax { pos: self.pos(), message: message.into() })
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(want) {
            self.at += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn name(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek() {
            Some(Tok::Name(n)) => {
                let n = n.clone();
                self.at += 1;
                Ok(n)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn query(&mut self) -> Result<(Vec<String>, Formula), ParseError> {
        self.expect(&Tok::Exists, "EXISTS")?;
        let mut vars = vec![self.name("variable")?];
        while self.peek() == Some(&Tok::Comma) {
            self.at += 1;
            vars.push(self.name("variable")?);
        }
        self.expect(&Tok::Dot, "`.` after the variable list")?;
        let body = self.disj()?;
        if self.at != self.toks.len() {
            return self.err("unexpected trailing input");
        }
        Ok((vars, body))
    }

    fn disj(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.conj()?];
        while self.peek() == Some(&Tok::Or) {
            self.at += 1;
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::Or(parts) })
    }

    fn conj(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.lit()?];
        while self.peek() == Some(&Tok::And) {
            self.at += 1;
            parts.push(self.lit()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::And(parts) })
    }

    fn lit(&mut self) -> Result<Formula, ParseError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.at += 1;
                Ok(Formula::Not(Box::new(self.lit()?)))
            }
            Some(Tok::Open(c)) => {
                let close = if *c == '(' { ')' } else { ']' };
                self.at += 1;
                let inner = self.disj()?;
                self.expect(&Tok::Close(close), &format!("`{close}`"))?;
                Ok(inner)
            }
            Some(Tok::Name(_)) => {
                let relation = self.name("relation")?;
                self.expect(&Tok::Open('('), "`(` after relation name")?;
                let head = self.name("term")?;
                self.expect(&Tok::Comma, "`,` between terms")?;
                let tail = self.name("term")?;
                self.expect(&Tok::Close(')'), "`)` closing the atom")?;
                Ok(Formula::Atom { relation, head, tail })
            }
            _ => self.err("expected an atom, NOT, or a parenthesised formula"),
        }
    }
}

/// Parses a query and recognises which template it instantiates.
pub fn parse_fol(text: &str, entities: &Vocab, relations: &Vocab) -> Result<QueryInstance, ParseError> {
    let mut parser = Parser { toks: lex(text)?, at: 0, end: text.len() };
    let (vars, body) = parser.query()?;
    let plan = to_plan(&vars, &body, entities, relations)?;
    recognise(&plan).ok_or_else(|| ParseError::Unsupported(format!("`{}` matches no query template", plan.render())))
}

fn unsupported<T>(msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::Unsupported(msg.into()))
}

/// Tail variables of every atom below `f`.
fn tails<'a>(f: &'a Formula, out: &mut Vec<&'a str>) {
    match f {
        Formula::Atom { tail, .. } => out.push(tail),
        Formula::Not(x) => tails(x, out),
        Formula::And(xs) | Formula::Or(xs) => xs.iter().for_each(|x| tails(x, out)),
    }
}

/// The part of `f` made of atoms ending in `var`.
fn project(f: &Formula, var: &str) -> Option<Formula> {
    match f {
        Formula::Atom { tail, .. } => (tail == var).then(|| f.clone()),
        Formula::Not(x) => project(x, var).map(|p| Formula::Not(Box::new(p))),
        Formula::And(xs) | Formula::Or(xs) => {
            let mut kept: Vec<Formula> = xs.iter().filter_map(|x| project(x, var)).collect();
            match kept.len() {
                0 => None,
                1 => kept.pop(),
                _ => Some(if matches!(f, Formula::And(_)) { Formula::And(kept) } else { Formula::Or(kept) }),
            }
        }
    }
}

fn check_scoping(f: &Formula) -> Result<(), ParseError> {
    match f {
        Formula::Atom { .. } => Ok(()),
        Formula::Not(_) | Formula::Or(_) => {
            let mut ts = Vec::new();
            tails(f, &mut ts);
            ts.sort_unstable();
            ts.dedup();
            if ts.len() > 1 {
                return unsupported("negation or disjunction spanning several variables");
            }
            match f {
                Formula::Not(x) => check_scoping(x),
                Formula::Or(xs) => xs.iter().try_for_each(check_scoping),
                _ => unreachable!(),
            }
        }
        Formula::And(xs) => xs.iter().try_for_each(check_scoping),
    }
}

struct PlanMaker<'a> {
    vars: &'a [String],
    body: &'a Formula,
    entities: &'a Vocab,
    relations: &'a Vocab,
    nodes: Vec<PlanNode>,
    memo: HashMap<String, NodeId>,
    active: Vec<String>,
}

impl PlanMaker<'_> {
    fn term(&mut self, name: &str) -> Result<NodeId, ParseError> {
        if self.vars.iter().any(|v| v == name) {
            return self.var(name);
        }
        let id = self.entities.id(name).ok_or_else(|| ParseError::UnknownEntity(name.to_owned()))?;
        self.nodes.push(PlanNode::Anchor(id));
        Ok(self.nodes.len() - 1)
    }

    fn var(&mut self, name: &str) -> Result<NodeId, ParseError> {
        if let Some(&n) = self.memo.get(name) {
            return Ok(n);
        }
        if self.active.iter().any(|v| v == name) {
            return unsupported(format!("cyclic dependency through `{name}`"));
        }
        let def = project(self.body, name)
            .ok_or_else(|| ParseError::Unsupported(format!("variable `{name}` is never constrained")))?;
        self.active.push(name.to_owned());
        let n = self.formula(&def)?;
        self.active.pop();
        self.memo.insert(name.to_owned(), n);
        Ok(n)
    }

    fn formula(&mut self, f: &Formula) -> Result<NodeId, ParseError> {
        let node = match f {
            Formula::Atom { relation, head, .. } => {
                let r = self.relations.id(relation).ok_or_else(|| ParseError::UnknownRelation(relation.clone()))?;
                let input = self.term(head)?;
                PlanNode::Relate { relation: r, input }
            }
            Formula::Not(x) => PlanNode::Negate(self.formula(x)?),
            Formula::And(xs) => PlanNode::Conjoin(xs.iter().map(|x| self.formula(x)).collect::<Result<_, _>>()?),
            Formula::Or(xs) => PlanNode::Disjoin(xs.iter().map(|x| self.formula(x)).collect::<Result<_, _>>()?),
        };
        self.nodes.push(node);
        Ok(self.nodes.len() - 1)
    }
}

fn to_plan(vars: &[String], body: &Formula, entities: &Vocab, relations: &Vocab) -> Result<QueryPlan, ParseError> {
    let body = &flatten(body);
    check_scoping(body)?;
    let mut heads = Vec::new();
    let mut all_tails = Vec::new();
    collect_terms(body, &mut heads, &mut all_tails);
    for t in &all_tails {
        if !vars.iter().any(|v| v == t) {
            return unsupported(format!("`{t}` appears as a second argument but is not a variable"));
        }
    }
    let targets: Vec<&String> = vars.iter().filter(|v| !heads.contains(v)).collect();
    let target = match targets.as_slice() {
        [t] => (*t).clone(),
        [] => return unsupported("no target variable (every variable is used as a source)"),
        _ => return unsupported(format!("several sink variables {targets:?}")),
    };
    let mut maker =
        PlanMaker { vars, body, entities, relations, nodes: Vec::new(), memo: HashMap::new(), active: Vec::new() };
    let sink = maker.var(&target)?;
    for v in vars {
        if !maker.memo.contains_key(v) {
            return unsupported(format!("variable `{v}` is not connected to the target"));
        }
    }
    let plan = QueryPlan { nodes: maker.nodes, sink };
    validate(&plan).map_err(|v| ParseError::Unsupported(format!("invalid dependency graph: {v:?}")))?;
    Ok(plan)
}

/// Merges directly nested conjunctions (and disjunctions) into one list.
fn flatten(f: &Formula) -> Formula {
    match f {
        Formula::Atom { .. } => f.clone(),
        Formula::Not(x) => Formula::Not(Box::new(flatten(x))),
        Formula::And(xs) | Formula::Or(xs) => {
            let is_and = matches!(f, Formula::And(_));
            let mut out = Vec::new();
            for x in xs.iter().map(flatten) {
                match x {
                    Formula::And(inner) if is_and => out.extend(inner),
                    Formula::Or(inner) if !is_and => out.extend(inner),
                    other => out.push(other),
                }
            }
            if is_and {
                Formula::And(out)
            } else {
                Formula::Or(out)
            }
        }
    }
}

fn collect_terms(f: &Formula, heads: &mut Vec<String>, tails: &mut Vec<String>) {
    match f {
        Formula::Atom { head, tail, .. } => {
            heads.push(head.clone());
            tails.push(tail.clone());
        }
        Formula::Not(x) => collect_terms(x, heads, tails),
        Formula::And(xs) | Formula::Or(xs) => xs.iter().for_each(|x| collect_terms(x, heads, tails)),
    }
}

#[derive(Default, Clone)]
struct Bindings {
    anchors: BTreeMap<usize, EntityId>,
    relations: BTreeMap<usize, RelationId>,
}

fn bind<K: Ord + Copy, V: PartialEq + Copy>(map: &mut BTreeMap<K, V>, k: K, v: V) -> bool {
    match map.get(&k) {
        Some(&old) => old == v,
        None => {
            map.insert(k, v);
            true
        }
    }
}

fn matches(tpl: &QueryPlan, t: NodeId, plan: &QueryPlan, p: NodeId, b: &mut Bindings) -> bool {
    match (&tpl.nodes[t], &plan.nodes[p]) {
        (PlanNode::Anchor(slot), PlanNode::Anchor(e)) => bind(&mut b.anchors, *slot, *e),
        (PlanNode::Relate { relation: rs, input: ti }, PlanNode::Relate { relation: r, input: pi }) => {
            bind(&mut b.relations, *rs, *r) && matches(tpl, *ti, plan, *pi, b)
        }
        (PlanNode::Negate(ti), PlanNode::Negate(pi)) => matches(tpl, *ti, plan, *pi, b),
        (PlanNode::Conjoin(ts), PlanNode::Conjoin(ps)) | (PlanNode::Disjoin(ts), PlanNode::Disjoin(ps))
            if ts.len() == ps.len() =>
        {
            permutations(ps.len()).into_iter().any(|perm| {
                let mut trial = b.clone();
                let ok = ts.iter().zip(&perm).all(|(&ti, &k)| matches(tpl, ti, plan, ps[k], &mut trial));
                if ok {
                    *b = trial;
                }
                ok
            })
        }
        _ => false,
    }
}

/// Permutations in lexicographic order, identity first.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(rest: &mut Vec<usize>, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(cur.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            cur.push(x);
            go(rest, cur, out);
            cur.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut (0..n).collect(), &mut Vec::new(), &mut out);
    out
}

fn recognise(plan: &QueryPlan) -> Option<QueryInstance> {
    QueryStructure::ALL.into_iter().find_map(|s| {
        let tpl = s.template();
        let mut b = Bindings::default();
        if !matches(&tpl, tpl.sink, plan, plan.sink, &mut b) {
            return None;
        }
        let inst = QueryInstance {
            structure: s,
            anchors: (0..s.num_anchors()).map(|i| b.anchors[&i]).collect(),
            relations: (0..s.num_relations()).map(|i| b.relations[&i]).collect(),
        };
        // Re-compiling the bindings must give back the parsed term.
        let compiled = compile(&inst).ok()?;
        (canonical(&compiled, compiled.sink) == canonical(plan, plan.sink)).then_some(inst)
    })
}

/// Rendering with the operands of `∧` and `∨` sorted.
fn canonical(plan: &QueryPlan, id: NodeId) -> String {
    let join = |xs: &[NodeId], op: &str| {
        let mut parts: Vec<String> = xs.iter().map(|&x| canonical(plan, x)).collect();
        parts.sort();
        format!("({})", parts.join(op))
    };
    match &plan.nodes[id] {
        PlanNode::Anchor(e) => format!("e{e}"),
        PlanNode::Relate { relation, input } => format!("f{relation}({})", canonical(plan, *input)),
        PlanNode::Negate(x) => format!("¬{}", canonical(plan, *x)),
        PlanNode::Conjoin(xs) => join(xs, " ∧ "),
        PlanNode::Disjoin(xs) => join(xs, " ∨ "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> (Vocab, Vocab) {
        (Vocab::from_names(["a", "b", "c"]), Vocab::from_names(["p", "q", "r"]))
    }

    fn parse(text: &str) -> Result<QueryInstance, ParseError> {
        let (e, r) = vocab();
        parse_fol(text, &e, &r)
    }

    #[test]
    fn two_in() {
        let q = parse("EXISTS T . p(a,T) AND NOT q(b,T)").unwrap();
        assert_eq!(q.structure, QueryStructure::In2);
        assert_eq!(q.anchors, vec![0, 1]);
        assert_eq!(q.relations, vec![0, 1]);
    }

    #[test]
    fn one_p() {
        assert_eq!(parse("EXISTS T . p(a,T)").unwrap().structure, QueryStructure::P1);
    }

    #[test]
    fn negation_only_is_unsupported() {
        let err = parse("EXISTS T . NOT p(a,T)").unwrap_err();
        assert!(matches!(err, ParseError::Unsupported(_)));
        assert!(err.to_string().starts_with("unsupported structure"));
    }

    #[test]
    fn reordered_conjuncts_still_match() {
        let q = parse("EXISTS T . NOT q(b,T) AND p(a,T)").unwrap();
        assert_eq!(q.structure, QueryStructure::In2);
        assert_eq!(q.anchors, vec![0, 1]);
        let q = parse("EXISTS V,T . q(V,T) AND p(a,V)").unwrap();
        assert_eq!(q.structure, QueryStructure::P2);
        assert_eq!(q.relations, vec![0, 1]);
    }

    #[test]
    fn syntax_errors_carry_positions() {
        match parse("EXISTS T . p(a T)").unwrap_err() {
            ParseError::Syntax { pos, .. } => assert_eq!(pos, 15),
            e => panic!("{e}"),
        }
        assert!(matches!(parse("p(a,T)"), Err(ParseError::Syntax { pos: 0, .. })));
    }

    #[test]
    fn unknown_names() {
        assert_eq!(parse("EXISTS T . z(a,T)"), Err(ParseError::UnknownRelation("z".into())));
        assert_eq!(parse("EXISTS T . p(zz,T)"), Err(ParseError::UnknownEntity("zz".into())));
    }

    #[test]
    fn unicode_connectives() {
        let q = parse("∃V,T. p(a,V) ∧ ¬q(V,T) ∧ r(b,T)").unwrap();
        assert_eq!(q.structure, QueryStructure::Pni);
    }

    #[test]
    fn mixed_tail_disjunction_is_rejected() {
        assert!(matches!(parse("EXISTS V,T . p(a,V) OR q(V,T)"), Err(ParseError::Unsupported(_))));
    }

    #[test]
    fn four_way_intersection_is_unsupported() {
        let e = Vocab::from_names(["a", "b", "c", "d"]);
        let r = Vocab::from_names(["p", "q", "r", "s"]);
        assert!(matches!(
            parse_fol("EXISTS T . p(a,T) AND q(b,T) AND r(c,T) AND s(d,T)", &e, &r),
            Err(ParseError::Unsupported(_))
        ));
    }
}
