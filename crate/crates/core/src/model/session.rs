//! One forward pass of the model on a tape.

use std::collections::HashMap;

use super::{EmbeddingMode, ModelError, ModelParams, Param, UnionMode};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::kg::{EntityId, RelationId};
use crate::logic::{TNormKind, ENTROPY_EPS};
use crate::query::{to_dnf, PlanNode, QueryInstance, QueryPlan, QueryStructure};

/// Rows of an embedding table that a session pulled onto its tape.
struct Rows {
    ids: Vec<usize>,
    local: HashMap<usize, usize>,
    raw: Option<Var>,
}

impl Rows {
    fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut ids: Vec<usize> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let local = ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        Self { ids, local, raw: None }
    }
}

/// Tape plus parameter bookkeeping for a batch of queries. Only the entity
/// and relation rows named at construction are available, and only those
/// rows receive gradients.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ModelParams,
    trainable: bool,
    dense: Vec<Option<Var>>,
    entities: Rows,
    entity_real: Option<Var>,
    relations: Rows,
    /// Dimensions whose conjunction bounds crossed and were repaired.
    pub repairs: usize,
}

/// Gradients of one session, with table gradients restricted to the rows
/// the session touched.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    /// Indexed by [`Param::index`]; `None` for tables and untouched groups.
    pub dense: Vec<Option<Tensor>>,
    pub entity_rows: Vec<EntityId>,
    pub entity: Option<Tensor>,
    pub relation_rows: Vec<RelationId>,
    pub relation: Option<Tensor>,
}

impl ParamGrads {
    /// Adds `other`, which must cover the same table rows.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        assert_eq!(self.entity_rows, other.entity_rows, "sessions must share entity rows");
        assert_eq!(self.relation_rows, other.relation_rows, "sessions must share relation rows");
        fn add(a: &mut Option<Tensor>, b: &Option<Tensor>) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y.data()),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            add(a, b);
        }
        add(&mut self.entity, &other.entity);
        add(&mut self.relation, &other.relation);
    }

    pub fn scale(&mut self, s: f64) {
        let all = self.dense.iter_mut().chain([&mut self.entity, &mut self.relation]);
        for t in all.flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Whether every gradient entry is finite.
    pub fn all_finite(&self) -> bool {
        self.dense.iter().chain([&self.entity, &self.relation]).flatten().all(Tensor::all_finite)
    }
}

type R = Result<Var, ModelError>;

impl<'p> Session<'p> {
    pub fn new(
        params: &'p ModelParams,
        entities: impl IntoIterator<Item = EntityId>,
        relations: impl IntoIterator<Item = RelationId>,
        trainable: bool,
    ) -> Result<Self, ModelError> {
        let entities = Rows::new(entities);
        let relations = Rows::new(relations);
        if let Some(&e) = entities.ids.iter().find(|&&e| e >= params.num_entities()) {
            return Err(ModelError::UnknownEntity(e));
        }
        if let Some(&r) = relations.ids.iter().find(|&&r| r >= params.num_relations()) {
            return Err(ModelError::UnknownRelation(r));
        }
        Ok(Self {
            tape: Tape::new(),
            params,
            trainable,
            dense: vec![None; Param::ALL.len()],
            entities,
            entity_real: None,
            relations,
            repairs: 0,
        })
    }

    /// Session covering the anchors and relations of `batch` plus `extra`
    /// entities (answers and negatives).
    pub fn for_queries(
        params: &'p ModelParams,
        batch: &[&QueryInstance],
        extra: &[EntityId],
        trainable: bool,
    ) -> Result<Self, ModelError> {
        let anchors = batch.iter().flat_map(|q| q.anchors.iter().copied()).chain(extra.iter().copied());
        let relations = batch.iter().flat_map(|q| q.relations.iter().copied());
        Self::new(params, anchors, relations, trainable)
    }

    fn input(&mut self, t: Tensor) -> Var {
        if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        }
    }

    /// Tape handle of a dense parameter group.
    pub fn param(&mut self, p: Param) -> Var {
        if let Some(v) = self.dense[p.index()] {
            return v;
        }
        let v = self.input(self.params.get(p).clone());
        self.dense[p.index()] = Some(v);
        v
    }

    fn dim(&self) -> usize {
        self.params.config.dim
    }

    fn bounds(&self) -> bool {
        self.params.config.mode == EmbeddingMode::Bounds
    }

    fn table_rows(&self, p: Param, rows: &[usize]) -> Tensor {
        let table = self.params.get(p);
        let cols = table.cols();
        let data = rows.iter().flat_map(|&r| table.row(r).iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data).expect("row gather")
    }

    fn entity_real(&mut self) -> R {
        if let Some(v) = self.entity_real {
            return Ok(v);
        }
        let raw = self.table_rows(Param::Entity, &self.entities.ids);
        let raw = self.input(raw);
        self.entities.raw = Some(raw);
        let d = self.dim();
        let real = if self.bounds() {
            let a = self.tape.slice_last(raw, 0, d)?;
            let b = self.tape.slice_last(raw, d, d)?;
            let l = self.tape.sigmoid(a);
            let sb = self.tape.sigmoid(b);
            let rest = self.tape.one_minus(l);
            let gap = self.tape.mul(sb, rest)?;
            let u = self.tape.add(l, gap)?;
            self.tape.concat_last(&[l, u])?
        } else {
            self.tape.sigmoid(raw)
        };
        self.entity_real = Some(real);
        Ok(real)
    }

    /// Realised embeddings `[n, 2d]` of the given entities.
    pub fn entities(&mut self, ids: &[EntityId]) -> R {
        let real = self.entity_real()?;
        let local = ids
            .iter()
            .map(|e| self.entities.local.get(e).copied().ok_or(ModelError::UnknownEntity(*e)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.tape.gather_rows(real, &local)?)
    }

    /// Relation vectors `[n, d]`.
    pub fn relations(&mut self, ids: &[RelationId]) -> R {
        let raw = match self.relations.raw {
            Some(v) => v,
            None => {
                let t = self.table_rows(Param::Relation, &self.relations.ids);
                let v = self.input(t);
                self.relations.raw = Some(v);
                v
            }
        };
        let local = ids
            .iter()
            .map(|r| self.relations.local.get(r).copied().ok_or(ModelError::UnknownRelation(*r)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.tape.gather_rows(raw, &local)?)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Param, b: Param) -> R {
        let (w, b) = (self.param(w), self.param(b));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    /// Skolem map of relation vectors `r [n, d]` applied to `x [n, 2d]`.
    pub fn skolem(&mut self, r: Var, x: Var) -> R {
        let rx = self.tape.concat_last(&[r, x])?;
        let h1 = self.linear(rx, Param::F1, Param::F1Bias)?;
        let h1 = self.tape.relu(h1);
        let h2 = self.linear(h1, Param::F2, Param::F2Bias)?;
        let h2 = self.tape.relu(h2);
        let y = self.linear(h2, Param::F3, Param::F3Bias)?;
        let y = self.tape.sigmoid(y);
        if !self.bounds() {
            return Ok(y);
        }
        let d = self.dim();
        let yl = self.tape.slice_last(y, 0, d)?;
        let yu = self.tape.slice_last(y, d, d)?;
        let rest = self.tape.one_minus(yl);
        let gap = self.tape.mul(yu, rest)?;
        let u = self.tape.add(yl, gap)?;
        Ok(self.tape.concat_last(&[yl, u])?)
    }

    /// `[1 - u, 1 - l]`, or `1 - t` for point truths.
    pub fn negate(&mut self, x: Var) -> R {
        if !self.bounds() {
            return Ok(self.tape.one_minus(x));
        }
        let d = self.dim();
        let l = self.tape.slice_last(x, 0, d)?;
        let u = self.tape.slice_last(x, d, d)?;
        let nl = self.tape.one_minus(u);
        let nu = self.tape.one_minus(l);
        Ok(self.tape.concat_last(&[nl, nu])?)
    }

    /// Attention weights `[k, n, d]` of `k` inputs of shape `[n, 2d]`:
    /// softmax over inputs of `relu(x G1 + b) G2 + b`, divided by its
    /// maximum over inputs. All ones when attention is off.
    pub fn attention_weights(&mut self, xs: &[Var]) -> R {
        let n = self.tape.shape(xs[0])[0];
        let d = self.dim();
        if !self.params.config.attention {
            return Ok(self.tape.constant(Tensor::filled(&[xs.len(), n, d], 1.0)));
        }
        let mut scores = Vec::with_capacity(xs.len());
        for &x in xs {
            let h = self.linear(x, Param::G1, Param::G1Bias)?;
            let h = self.tape.relu(h);
            scores.push(self.linear(h, Param::G2, Param::G2Bias)?);
        }
        let g = self.tape.stack(&scores)?;
        let s = self.tape.softmax_axis(g, 0)?;
        let m = self.tape.max_axis(s, 0)?;
        Ok(self.tape.div(s, m)?)
    }

    /// Weighted t-norm over inputs `[n, 2d]` with attention weights, applied
    /// to lowers and uppers alike, then midpoint repair of crossed bounds.
    pub fn conjoin(&mut self, xs: &[Var]) -> R {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let w = self.attention_weights(xs)?;
        let w2 = self.tape.concat_last(&[w, w])?;
        let x = self.tape.stack(xs)?;
        let shape = self.tape.shape(xs[0]).to_vec();
        let y = match self.params.config.tnorm {
            TNormKind::Min => {
                let m = self.tape.smoothmin_weighted(x, w2, 0, self.params.config.alpha)?;
                self.tape.reshape(m, &shape)?
            }
            TNormKind::Prod => {
                let p = self.tape.pow(x, w2)?;
                let mut acc = self.tape.select(p, 0)?;
                for j in 1..xs.len() {
                    let pj = self.tape.select(p, j)?;
                    acc = self.tape.mul(acc, pj)?;
                }
                acc
            }
            TNormKind::Luk => {
                let miss = self.tape.one_minus(x);
                let miss = self.tape.mul(miss, w2)?;
                let total = self.tape.sum_axis(miss, 0)?;
                let y = self.tape.one_minus(total);
                let y = self.tape.max_zero(y);
                self.tape.reshape(y, &shape)?
            }
        };
        if !self.bounds() {
            return Ok(y);
        }
        self.repair(y)
    }

    /// Collapses every crossed `[l, u]` to its midpoint.
    fn repair(&mut self, y: Var) -> R {
        let d = self.dim();
        let v = self.tape.value(y);
        self.repairs += (0..v.rows()).map(|r| (0..d).filter(|&i| v.row(r)[i] > v.row(r)[d + i]).count()).sum::<usize>();
        let l = self.tape.slice_last(y, 0, d)?;
        let u = self.tape.slice_last(y, d, d)?;
        let gap = self.tape.sub(l, u)?;
        let excess = self.tape.max_zero(gap);
        let half = self.tape.scale(excess, 0.5);
        let l = self.tape.sub(l, half)?;
        let u = self.tape.add(u, half)?;
        Ok(self.tape.concat_last(&[l, u])?)
    }

    /// `¬(¬x_1 ∧ … ∧ ¬x_k)`.
    pub fn disjoin(&mut self, xs: &[Var]) -> R {
        let negated = xs.iter().map(|&x| self.negate(x)).collect::<Result<Vec<_>, _>>()?;
        let c = self.conjoin(&negated)?;
        self.negate(c)
    }

    /// Evaluates every node of a plan whose anchor and relation ids are slot
    /// numbers into `anchors` and `relations`; each slot holds one id per
    /// batch row.
    pub fn exec(
        &mut self,
        plan: &QueryPlan,
        anchors: &[Vec<EntityId>],
        relations: &[Vec<RelationId>],
    ) -> Result<Vec<Var>, ModelError> {
        let mut vals: Vec<Option<Var>> = vec![None; plan.nodes.len()];
        for id in plan.topo_order() {
            let get = |i: usize| vals[i].expect("inputs precede consumers");
            let v = match &plan.nodes[id] {
                PlanNode::Anchor(slot) => self.entities(&anchors[*slot])?,
                PlanNode::Relate { relation, input } => {
                    let r = self.relations(&relations[*relation])?;
                    self.skolem(r, get(*input))?
                }
                PlanNode::Negate(x) => self.negate(get(*x))?,
                PlanNode::Conjoin(xs) => {
                    let xs: Vec<Var> = xs.iter().map(|&x| get(x)).collect();
                    self.conjoin(&xs)?
                }
                PlanNode::Disjoin(xs) => {
                    let xs: Vec<Var> = xs.iter().map(|&x| get(x)).collect();
                    self.disjoin(&xs)?
                }
            };
            vals[id] = Some(v);
        }
        vals.into_iter().map(|v| v.ok_or_else(|| ModelError::Config("plan has unreachable nodes".into()))).collect()
    }

    /// Embeddings `[n, 2d]` of a batch of same-structure queries; one per
    /// DNF branch in DNF mode, a single one otherwise.
    pub fn embed(
        &mut self,
        structure: QueryStructure,
        batch: &[&QueryInstance],
        union: UnionMode,
    ) -> Result<Vec<Var>, ModelError> {
        let template = structure.template();
        let plans = match union {
            UnionMode::Dnf => to_dnf(&template)?,
            UnionMode::Dm => vec![template],
        };
        let anchors: Vec<Vec<EntityId>> =
            (0..structure.num_anchors()).map(|i| batch.iter().map(|q| q.anchors[i]).collect()).collect();
        let relations: Vec<Vec<RelationId>> =
            (0..structure.num_relations()).map(|i| batch.iter().map(|q| q.relations[i]).collect()).collect();
        plans.iter().map(|p| Ok(self.exec(p, &anchors, &relations)?[p.sink])).collect()
    }

    /// Mean L1 distance `[n, 1]` between rows of `a` and `b`.
    pub fn distance(&mut self, a: Var, b: Var) -> R {
        let w = self.tape.shape(a)[1] as f64;
        let diff = self.tape.sub(a, b)?;
        let diff = self.tape.abs(diff);
        let s = self.tape.sum_axis(diff, 1)?;
        Ok(self.tape.scale(s, 1.0 / w))
    }

    /// Distance `[n * repeat, 1]` from each entity row of `e` to its query,
    /// the minimum over branches. Query row `i` serves entity rows
    /// `i * repeat .. (i + 1) * repeat`.
    pub fn branch_distance(&mut self, branches: &[Var], e: Var, repeat: usize) -> R {
        let n = self.tape.shape(branches[0])[0];
        let rows: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, repeat)).collect();
        let mut ds = Vec::with_capacity(branches.len());
        for &b in branches {
            let q = if repeat == 1 { b } else { self.tape.gather_rows(b, &rows)? };
            ds.push(self.distance(q, e)?);
        }
        if ds.len() == 1 {
            return Ok(ds[0]);
        }
        let stacked = self.tape.stack(&ds)?;
        let m = self.tape.min_axis(stacked, 0)?;
        Ok(self.tape.reshape(m, &[n * repeat, 1])?)
    }

    /// Entropy features `[n, d]` of bound embeddings `[n, 2d]`.
    pub fn entropy(&mut self, x: Var) -> R {
        if !self.bounds() {
            return Err(ModelError::NeedsBounds("entropy"));
        }
        let d = self.dim();
        let l = self.tape.slice_last(x, 0, d)?;
        let u = self.tape.slice_last(x, d, d)?;
        let w = self.tape.sub(u, l)?;
        let w = self.tape.affine(w, 1.0, -ENTROPY_EPS);
        let w = self.tape.max_zero(w);
        let w = self.tape.affine(w, 1.0, ENTROPY_EPS);
        Ok(self.tape.log(w))
    }

    /// Cardinality estimates `[n, 1]` from entropy features `[n, d]`.
    pub fn cardinality_from_entropy(&mut self, h: Var) -> R {
        let z = self.linear(h, Param::H1, Param::H1Bias)?;
        let z = self.tape.relu(z);
        let z = self.linear(z, Param::H2, Param::H2Bias)?;
        let z = self.tape.relu(z);
        let z = self.linear(z, Param::H3, Param::H3Bias)?;
        let z = self.tape.sigmoid(z);
        Ok(self.tape.scale(z, self.params.config.rho))
    }

    pub fn cardinality(&mut self, x: Var) -> R {
        let h = self.entropy(x)?;
        self.cardinality_from_entropy(h)
    }

    /// Backpropagates the scalar `out` into parameter gradients.
    pub fn gradients(&self, out: Var) -> Result<ParamGrads, ModelError> {
        let mut g: Gradients = self.tape.backward(out)?;
        let mut dense: Vec<Option<Tensor>> = vec![None; Param::ALL.len()];
        for p in Param::ALL {
            if let Some(v) = self.dense[p.index()] {
                dense[p.index()] = g.take(v);
            }
        }
        Ok(ParamGrads {
            dense,
            entity_rows: self.entities.ids.clone(),
            entity: self.entities.raw.and_then(|v| g.take(v)),
            relation_rows: self.relations.ids.clone(),
            relation: self.relations.raw.and_then(|v| g.take(v)),
        })
    }
}

/// Rewrites a concrete plan so that every anchor and relation node refers
/// to its own slot; returns the slot contents.
pub(crate) fn slotify(plan: &QueryPlan) -> (QueryPlan, Vec<EntityId>, Vec<RelationId>) {
    let mut anchors = Vec::new();
    let mut relations = Vec::new();
    let nodes = plan
        .nodes
        .iter()
        .map(|n| match n {
            PlanNode::Anchor(e) => {
                anchors.push(*e);
                PlanNode::Anchor(anchors.len() - 1)
            }
            PlanNode::Relate { relation, input } => {
                relations.push(*relation);
                PlanNode::Relate { relation: relations.len() - 1, input: *input }
            }
            other => other.clone(),
        })
        .collect();
    (QueryPlan { nodes, sink: plan.sink }, anchors, relations)
}
