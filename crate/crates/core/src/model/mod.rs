//! Truth-bound embeddings of entities and queries.
//!
//! Entities are free `2d` pre-activations squashed into ordered bounds.
//! Relation following is a learned Skolem map `σ(relu(relu([r,x]F1)F2)F3)`,
//! conjunction a weighted t-norm whose per-dimension weights come from an
//! attention network, negation `[1-u, 1-l]`, and disjunction either De Morgan
//! or a best-branch score over the disjunctive normal form. Candidates are
//! scored by `1 - D`, with `D` the mean L1 distance between bound vectors.

mod checkpoint;
mod session;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use session::{ParamGrads, Session};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, GradCheck, Tensor};
use crate::kg::{EntityId, RelationId};
use crate::logic::{TNormKind, TruthBounds, ENTROPY_EPS};
use crate::query::{QueryError, QueryInstance, QueryPlan, QueryStructure};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("{0} requires bounds mode")]
    NeedsBounds(&'static str),
    #[error("entity {0} is out of range")]
    UnknownEntity(EntityId),
    #[error("relation {0} is out of range")]
    UnknownRelation(RelationId),
    #[error("bad model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EmbeddingMode {
    /// Ordered `[l, u]` intervals per dimension.
    #[default]
    Bounds,
    /// `2d` independent truths with `l = u`.
    PointTruth,
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bounds => "bounds",
            Self::PointTruth => "point",
        })
    }
}

impl FromStr for EmbeddingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bounds" => Ok(Self::Bounds),
            "point" | "point-truth" => Ok(Self::PointTruth),
            _ => Err(format!("unknown embedding mode `{s}` (bounds|point)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum UnionMode {
    /// Score each branch of the disjunctive normal form, keep the best.
    #[default]
    Dnf,
    /// Embed the disjunction through De Morgan.
    Dm,
}

impl fmt::Display for UnionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dnf => "dnf",
            Self::Dm => "dm",
        })
    }
}

impl FromStr for UnionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dnf" => Ok(Self::Dnf),
            "dm" => Ok(Self::Dm),
            _ => Err(format!("unknown union mode `{s}` (dnf|dm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub mode: EmbeddingMode,
    pub tnorm: TNormKind,
    pub attention: bool,
    /// Upper limit of the cardinality head.
    pub rho: f64,
    /// Smoothing constant of the weighted minimum.
    pub alpha: f64,
    /// Entity and relation tables start uniform in `[-table_init, table_init]`.
    pub table_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Setting names read by [`ModelConfig::from_map`].
    pub const KEYS: [&'static str; 8] = ["dim", "hidden", "mode", "tnorm", "attention", "rho", "alpha", "table_init"];

    pub fn desk() -> Self {
        Self {
            dim: 32,
            hidden: 128,
            mode: EmbeddingMode::Bounds,
            tnorm: TNormKind::Min,
            attention: true,
            rho: 1000.0,
            alpha: crate::logic::SMOOTHMIN_ALPHA,
            table_init: 6.0,
        }
    }

    pub fn full() -> Self {
        Self { dim: 400, hidden: 1600, ..Self::desk() }
    }

    pub fn card_hidden(&self) -> (usize, usize) {
        ((self.dim / 4).max(1), (self.dim / 16).max(1))
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("dim".into(), self.dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("mode".into(), self.mode.to_string()),
            ("tnorm".into(), self.tnorm.to_string()),
            ("attention".into(), self.attention.to_string()),
            ("rho".into(), format!("{:?}", self.rho)),
            ("alpha".into(), format!("{:?}", self.alpha)),
            ("table_init".into(), format!("{:?}", self.table_init)),
        ]
    }

    /// Reads the keys of [`ModelConfig::to_pairs`]; missing keys keep their
    /// desk-scale defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let mut c = Self::desk();
        let bad = |k: &str, v: &str| ModelError::Config(format!("{k} = {v}"));
        for (k, v) in map {
            match k.as_str() {
                "dim" => c.dim = v.parse().map_err(|_| bad(k, v))?,
                "hidden" => c.hidden = v.parse().map_err(|_| bad(k, v))?,
                "mode" => c.mode = v.parse().map_err(ModelError::Config)?,
                "tnorm" => c.tnorm = v.parse().map_err(ModelError::Config)?,
                "attention" => c.attention = v.parse().map_err(|_| bad(k, v))?,
                "rho" => c.rho = v.parse().map_err(|_| bad(k, v))?,
                "alpha" => c.alpha = v.parse().map_err(|_| bad(k, v))?,
                "table_init" => c.table_init = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.hidden == 0 {
            return Err(ModelError::Config("dim and hidden must be positive".into()));
        }
        if self.alpha >= 0.0 {
            return Err(ModelError::Config("alpha must be negative".into()));
        }
        if self.rho <= 0.0 {
            return Err(ModelError::Config("rho must be positive".into()));
        }
        if !(self.table_init > 0.0 && self.table_init.is_finite()) {
            return Err(ModelError::Config("table_init must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter groups in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Param {
    Entity,
    Relation,
    F1,
    F1Bias,
    F2,
    F2Bias,
    F3,
    F3Bias,
    G1,
    G1Bias,
    G2,
    G2Bias,
    H1,
    H1Bias,
    H2,
    H2Bias,
    H3,
    H3Bias,
}

impl Param {
    pub const ALL: [Param; 18] = [
        Self::Entity,
        Self::Relation,
        Self::F1,
        Self::F1Bias,
        Self::F2,
        Self::F2Bias,
        Self::F3,
        Self::F3Bias,
        Self::G1,
        Self::G1Bias,
        Self::G2,
        Self::G2Bias,
        Self::H1,
        Self::H1Bias,
        Self::H2,
        Self::H2Bias,
        Self::H3,
        Self::H3Bias,
    ];

    /// The cardinality head.
    pub const HEAD: [Param; 6] = [Self::H1, Self::H1Bias, Self::H2, Self::H2Bias, Self::H3, Self::H3Bias];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Entity => "entity",
            Self::Relation => "relation",
            Self::F1 => "F1",
            Self::F1Bias => "F1.bias",
            Self::F2 => "F2",
            Self::F2Bias => "F2.bias",
            Self::F3 => "F3",
            Self::F3Bias => "F3.bias",
            Self::G1 => "G1",
            Self::G1Bias => "G1.bias",
            Self::G2 => "G2",
            Self::G2Bias => "G2.bias",
            Self::H1 => "H1",
            Self::H1Bias => "H1.bias",
            Self::H2 => "H2",
            Self::H2Bias => "H2.bias",
            Self::H3 => "H3",
            Self::H3Bias => "H3.bias",
        }
    }

    pub fn is_bias(self) -> bool {
        self.name().ends_with(".bias")
    }

    pub fn is_table(self) -> bool {
        matches!(self, Self::Entity | Self::Relation)
    }

    pub fn shape(self, c: &ModelConfig, num_entities: usize, num_relations: usize) -> Vec<usize> {
        let (d, h) = (c.dim, c.hidden);
        let (c1, c2) = c.card_hidden();
        match self {
            Self::Entity => vec![num_entities, 2 * d],
            Self::Relation => vec![num_relations, d],
            Self::F1 => vec![3 * d, h],
            Self::F1Bias | Self::F2Bias => vec![1, h],
            Self::F2 => vec![h, h],
            Self::F3 => vec![h, 2 * d],
            Self::F3Bias => vec![1, 2 * d],
            Self::G1 => vec![2 * d, 2 * d],
            Self::G1Bias => vec![1, 2 * d],
            Self::G2 => vec![2 * d, d],
            Self::G2Bias => vec![1, d],
            Self::H1 => vec![d, c1],
            Self::H1Bias => vec![1, c1],
            Self::H2 => vec![c1, c2],
            Self::H2Bias => vec![1, c2],
            Self::H3 => vec![c2, 1],
            Self::H3Bias => vec![1, 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weight matrices get Xavier-uniform values, biases zero, and the
    /// entity and relation tables uniform values in
    /// `[-table_init, table_init]`.
    pub fn init(config: ModelConfig, num_entities: usize, num_relations: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = Param::ALL
            .iter()
            .map(|&p| {
                let shape = p.shape(&config, num_entities, num_relations);
                let n = shape.iter().product();
                let data: Vec<f64> = if p.is_bias() {
                    vec![0.0; n]
                } else if p.is_table() {
                    let limit = config.table_init;
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                } else {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
                };
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Self { config, tensors }
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        if tensors.len() != Param::ALL.len() {
            return Err(ModelError::Config(format!("expected {} tensors, found {}", Param::ALL.len(), tensors.len())));
        }
        let (ne, nr) = (tensors[0].shape()[0], tensors[1].shape()[0]);
        for (p, t) in Param::ALL.iter().zip(&tensors) {
            if t.shape() != p.shape(&config, ne, nr) {
                return Err(ModelError::Config(format!("{} has shape {:?}", p.name(), t.shape())));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn get(&self, p: Param) -> &Tensor {
        &self.tensors[p.index()]
    }

    pub fn get_mut(&mut self, p: Param) -> &mut Tensor {
        &mut self.tensors[p.index()]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_entities(&self) -> usize {
        self.get(Param::Entity).shape()[0]
    }

    pub fn num_relations(&self) -> usize {
        self.get(Param::Relation).shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Realised embedding of one entity (`2d` values).
    pub fn entity_embedding(&self, e: EntityId) -> Result<Vec<f64>, ModelError> {
        if e >= self.num_entities() {
            return Err(ModelError::UnknownEntity(e));
        }
        Ok(realise_entity(self.get(Param::Entity).row(e), self.config.mode))
    }

    /// Realised embedding of one entity as truth bounds.
    pub fn entity_bounds(&self, e: EntityId) -> Result<TruthBounds, ModelError> {
        if self.config.mode != EmbeddingMode::Bounds {
            return Err(ModelError::NeedsBounds("entity_bounds"));
        }
        Ok(TruthBounds::from_flat(self.entity_embedding(e)?).expect("realised bounds are ordered"))
    }

    /// All realised entity embeddings, row-major `|V| × 2d`.
    pub fn entity_table(&self) -> Vec<f64> {
        let raw = self.get(Param::Entity);
        (0..self.num_entities()).flat_map(|e| realise_entity(raw.row(e), self.config.mode)).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `l = σ(a)`, `u = l + σ(b)(1 - l)`; point truths are `σ` of every slot.
pub fn realise_entity(raw: &[f64], mode: EmbeddingMode) -> Vec<f64> {
    match mode {
        EmbeddingMode::PointTruth => raw.iter().map(|&x| sigmoid(x)).collect(),
        EmbeddingMode::Bounds => {
            let d = raw.len() / 2;
            let lower: Vec<f64> = raw[..d].iter().map(|&a| sigmoid(a)).collect();
            let upper: Vec<f64> = raw[d..].iter().zip(&lower).map(|(&b, &l)| l + sigmoid(b) * (1.0 - l)).collect();
            lower.into_iter().chain(upper).collect()
        }
    }
}

/// Embedding of a query: one `2d` vector, or one per DNF branch.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding {
    pub branches: Vec<Vec<f64>>,
}

impl QueryEmbedding {
    /// The single embedding of a union-free or De Morgan query.
    pub fn single(&self) -> &[f64] {
        &self.branches[0]
    }
}

/// Mean L1 distance.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `1 - min_branch D(entity, branch)` for every row of a realised entity
/// table.
pub fn score_table(table: &[f64], qe: &QueryEmbedding) -> Vec<f64> {
    let w = qe.branches[0].len();
    table
        .chunks_exact(w)
        .map(|e| 1.0 - qe.branches.iter().map(|b| distance(e, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Entropy features `log(max(u - l, ε))` of a bound vector.
pub fn entropy_features(x: &[f64]) -> Vec<f64> {
    let d = x.len() / 2;
    (0..d).map(|i| (x[d + i] - x[i]).max(ENTROPY_EPS).ln()).collect()
}

/// Width features `u - l`.
pub fn width_features(x: &[f64]) -> Vec<f64> {
    let d = x.len() / 2;
    (0..d).map(|i| x[d + i] - x[i]).collect()
}

impl ModelParams {
    /// Embeds queries, batching instances of equal structure. Output order
    /// follows the input.
    pub fn embed_queries(
        &self,
        queries: &[QueryInstance],
        union: UnionMode,
    ) -> Result<Vec<QueryEmbedding>, ModelError> {
        let mut out: Vec<Option<QueryEmbedding>> = vec![None; queries.len()];
        for s in QueryStructure::ALL {
            let idx: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].structure == s).collect();
            if idx.is_empty() {
                continue;
            }
            let batch: Vec<&QueryInstance> = idx.iter().map(|&i| &queries[i]).collect();
            let mut session = Session::for_queries(self, &batch, &[], false)?;
            let branches = session.embed(s, &batch, union)?;
            for (row, &i) in idx.iter().enumerate() {
                let b = branches.iter().map(|&v| session.tape.value(v).row(row).to_vec()).collect();
                out[i] = Some(QueryEmbedding { branches: b });
            }
        }
        Ok(out.into_iter().map(|q| q.expect("every structure visited")).collect())
    }

    pub fn embed_query(&self, query: &QueryInstance, union: UnionMode) -> Result<QueryEmbedding, ModelError> {
        Ok(self.embed_queries(std::slice::from_ref(query), union)?.remove(0))
    }

    /// Embedding of every node of a concrete plan, disjunctions via De Morgan.
    pub fn embed_plan_nodes(&self, plan: &QueryPlan) -> Result<Vec<Vec<f64>>, ModelError> {
        let (slotted, anchors, relations) = session::slotify(plan);
        let mut s = Session::new(self, anchors.iter().copied(), relations.iter().copied(), false)?;
        let cols_a: Vec<Vec<EntityId>> = anchors.iter().map(|&a| vec![a]).collect();
        let cols_r: Vec<Vec<RelationId>> = relations.iter().map(|&r| vec![r]).collect();
        let vals = s.exec(&slotted, &cols_a, &cols_r)?;
        Ok(vals.iter().map(|&v| s.tape.value(v).data().to_vec()).collect())
    }

    /// Scores of every entity against a query embedding.
    pub fn score_entities(&self, qe: &QueryEmbedding) -> Vec<f64> {
        score_table(&self.entity_table(), qe)
    }

    /// Applies the Skolem map of `relation` to one embedding.
    pub fn skolem_apply(&self, relation: RelationId, input: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut s = Session::new(self, [], [relation], false)?;
        let x = s.tape.constant(Tensor::matrix(1, input.len(), input.to_vec())?);
        let r = s.relations(&[relation])?;
        let y = s.skolem(r, x)?;
        Ok(s.tape.value(y).data().to_vec())
    }

    /// Attention weights of `k >= 2` inputs, one `d`-vector per input.
    pub fn attention_weights(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut s = Session::new(self, [], [], false)?;
        let xs: Vec<_> = inputs
            .iter()
            .map(|x| Tensor::matrix(1, x.len(), x.clone()).map(|t| s.tape.constant(t)))
            .collect::<Result<_, _>>()?;
        let w = s.attention_weights(&xs)?;
        let d = self.dim();
        Ok(s.tape.value(w).data().chunks(d).map(<[f64]>::to_vec).collect())
    }

    /// Conjunction of single embeddings with learned attention.
    pub fn conjoin(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        let mut s = Session::new(self, [], [], false)?;
        let xs: Vec<_> = inputs
            .iter()
            .map(|x| Tensor::matrix(1, x.len(), x.clone()).map(|t| s.tape.constant(t)))
            .collect::<Result<_, _>>()?;
        let y = s.conjoin(&xs)?;
        Ok(s.tape.value(y).data().to_vec())
    }

    /// Cardinality estimate `ρ σ(relu(relu(h H1) H2) H3)` of one bound vector.
    pub fn predict_cardinality(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(self.predict_cardinality_batch(&[x.to_vec()])?[0])
    }

    pub fn predict_cardinality_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
        if self.config.mode != EmbeddingMode::Bounds {
            return Err(ModelError::NeedsBounds("cardinality prediction"));
        }
        let d = self.dim();
        let feats: Vec<f64> = xs.iter().flat_map(|x| entropy_features(x)).collect();
        let mut s = Session::new(self, [], [], false)?;
        let h = s.tape.constant(Tensor::matrix(xs.len(), d, feats)?);
        let y = s.cardinality_from_entropy(h)?;
        Ok(s.tape.value(y).data().to_vec())
    }
}

/// Compares the parameter gradients reported by `f` with central differences
/// of its value, perturbing every entry of every parameter group.
pub fn param_gradient_check<F>(params: &ModelParams, step: f64, abs_tol: f64, f: F) -> Result<GradCheck, ModelError>
where
    F: Fn(&ModelParams) -> Result<(f64, ParamGrads), ModelError>,
{
    let (_, grads) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheck { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for p in Param::ALL {
        let cols = params.get(p).cols();
        for i in 0..params.get(p).len() {
            let analytic = match p {
                Param::Entity | Param::Relation => {
                    let (rows, table) = if p == Param::Entity {
                        (&grads.entity_rows, &grads.entity)
                    } else {
                        (&grads.relation_rows, &grads.relation)
                    };
                    match (rows.iter().position(|&r| r == i / cols), table) {
                        (Some(k), Some(t)) => t.data()[k * cols + i % cols],
                        _ => 0.0,
                    }
                }
                _ => grads.dense[p.index()].as_ref().map_or(0.0, |t| t.data()[i]),
            };
            let x0 = params.get(p).data()[i];
            probe.get_mut(p).data_mut()[i] = x0 + step;
            let plus = f(&probe)?.0;
            probe.get_mut(p).data_mut()[i] = x0 - step;
            let minus = f(&probe)?.0;
            probe.get_mut(p).data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic - numeric).abs();
            report.max_abs_err = report.max_abs_err.max(err);
            if err > abs_tol {
                report.max_rel_err = report.max_rel_err.max(err / analytic.abs().max(numeric.abs()));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
