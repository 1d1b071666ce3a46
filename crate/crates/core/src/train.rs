//! Fitting model parameters to a query dataset.
//!
//! Each step draws a batch of queries in a seeded epoch order, one positive
//! answer and `k` negatives per query, and minimises
//! `-log σ(γ - D(y, q)) - (1/k) Σ log σ(D(z_j, q) - γ)` with Adam. Queries of
//! one structure form a unit of work with its own tape; units may run on
//! several threads but their gradients are always summed in structure order,
//! so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::kg::EntityId;
use crate::model::{entropy_features, ModelConfig, ModelError, ModelParams, Param, ParamGrads, Session, UnionMode};
use crate::oracle::{EntitySet, QueryDataset, QueryRecord};
use crate::query::{QueryInstance, QueryStructure};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite loss or gradient at step {step}\n{dump}")]
    NonFinite { step: usize, dump: String },
}

/// What the training queries are for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    /// Queries sampled on the training graph only; restricted to the
    /// training structures.
    #[default]
    Generalization,
    /// Queries answered over the full graph; every structure is used.
    Entailment,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generalization" => Ok(Self::Generalization),
            "entailment" => Ok(Self::Entailment),
            _ => Err(format!("unknown task `{s}` (generalization|entailment)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Generalization => "generalization",
            Self::Entailment => "entailment",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: Task,
    pub margin: f64,
    pub negatives: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub union: UnionMode,
    /// Reject true answers when sampling negatives.
    pub filter_negatives: bool,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            task: Task::Generalization,
            margin: 0.375,
            negatives: 128,
            batch_size: 512,
            steps: 20_000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            union: UnionMode::Dnf,
            filter_negatives: true,
            checkpoint_every: 0,
            log_every: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Parses flat `key = value` lines; `#` starts a comment. Unknown keys
    /// are errors, missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, TrainError> {
        let mut c = Self::default();
        let model_keys = ModelConfig::KEYS;
        let model_map: BTreeMap<String, String> =
            map.iter().filter(|(k, _)| model_keys.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect();
        c.model = ModelConfig::from_map(&model_map)?;
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, TrainError> {
            v.parse().map_err(|_| TrainError::Config(format!("{k} = {v}")))
        }
        for (k, v) in map {
            match k.as_str() {
                k if model_keys.contains(&k) => {}
                "task" => c.task = v.parse().map_err(TrainError::Config)?,
                "margin" => c.margin = num(k, v)?,
                "negatives" => c.negatives = num(k, v)?,
                "batch_size" => c.batch_size = num(k, v)?,
                "steps" => c.steps = num(k, v)?,
                "lr" => c.lr = num(k, v)?,
                "beta1" => c.beta1 = num(k, v)?,
                "beta2" => c.beta2 = num(k, v)?,
                "eps" => c.eps = num(k, v)?,
                "seed" => c.seed = num(k, v)?,
                "union" => c.union = v.parse().map_err(TrainError::Config)?,
                "filter_negatives" => c.filter_negatives = num(k, v)?,
                "checkpoint_every" => c.checkpoint_every = num(k, v)?,
                "log_every" => c.log_every = num(k, v)?,
                "workers" => c.workers = num(k, v)?,
                _ => return Err(TrainError::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.margin <= 0.0 {
            return Err(TrainError::Config("margin must be positive".into()));
        }
        if self.negatives == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("negatives and batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Every setting as `key = value` pairs, model keys included.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        let f = |x: f64| format!("{x:?}");
        out.extend([
            ("task".into(), self.task.to_string()),
            ("margin".into(), f(self.margin)),
            ("negatives".into(), self.negatives.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("lr".into(), f(self.lr)),
            ("beta1".into(), f(self.beta1)),
            ("beta2".into(), f(self.beta2)),
            ("eps".into(), f(self.eps)),
            ("seed".into(), self.seed.to_string()),
            ("union".into(), self.union.to_string()),
            ("filter_negatives".into(), self.filter_negatives.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("log_every".into(), self.log_every.to_string()),
            ("workers".into(), self.workers.to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Margin loss of one query from its distances.
pub fn loss(d_pos: f64, d_neg: &[f64], margin: f64) -> f64 {
    let log_sigmoid = |x: f64| x.min(0.0) - (-x.abs()).exp().ln_1p();
    -log_sigmoid(margin - d_pos) - d_neg.iter().map(|&d| log_sigmoid(d - margin)).sum::<f64>() / d_neg.len() as f64
}

/// `k` negatives for a query. With `filter`, true answers are rejected and
/// the ids are distinct; when fewer than `k` non-answers exist they are drawn
/// with replacement and the second value is `true`. Callers decide how loudly
/// to report that.
pub fn sample_negatives(
    answers: &EntitySet,
    k: usize,
    num_entities: usize,
    filter: bool,
    rng: &mut impl Rng,
) -> (Vec<EntityId>, bool) {
    if !filter {
        return ((0..k).map(|_| rng.gen_range(0..num_entities)).collect(), false);
    }
    let available = num_entities - answers.len();
    if available < k {
        let pool: Vec<EntityId> = if available == 0 {
            (0..num_entities).collect()
        } else {
            (0..num_entities).filter(|&e| !answers.contains(e)).collect()
        };
        debug!("only {available} non-answers for {k} negatives; sampling with replacement");
        return ((0..k).map(|_| pool[rng.gen_range(0..pool.len())]).collect(), true);
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let e = rng.gen_range(0..num_entities);
        if !answers.contains(e) && !out.contains(&e) {
            out.push(e);
        }
    }
    (out, false)
}

/// Adam with lazy updates for table rows: a row's moments and values only
/// change on steps whose gradient touches it.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    fn update(&self, p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]) {
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// One optimiser step. Dense groups without a gradient are left alone.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        for p in Param::ALL {
            let i = p.index();
            if p.is_table() {
                let rows = if p == Param::Entity { &grads.entity } else { &grads.relation };
                for (&r, g) in rows {
                    let (mut m, mut v) = (std::mem::take(&mut self.m[i]), std::mem::take(&mut self.v[i]));
                    self.update(params.get_mut(p).row_mut(r), m.row_mut(r), v.row_mut(r), g);
                    self.m[i] = m;
                    self.v[i] = v;
                }
            } else if let Some(g) = &grads.dense[i] {
                let (mut m, mut v) = (std::mem::take(&mut self.m[i]), std::mem::take(&mut self.v[i]));
                self.update(params.get_mut(p).data_mut(), m.data_mut(), v.data_mut(), g.data());
                self.m[i] = m;
                self.v[i] = v;
            }
        }
    }
}

/// Summed gradients of a step, table gradients keyed by row.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub dense: Vec<Option<Tensor>>,
    pub entity: BTreeMap<usize, Vec<f64>>,
    pub relation: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self { dense: vec![None; Param::ALL.len()], ..Default::default() }
    }

    pub fn add(&mut self, g: &ParamGrads) {
        for (a, b) in self.dense.iter_mut().zip(&g.dense) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.add_assign(y.data()),
                (None, Some(y)) => *a = Some(y.clone()),
                _ => {}
            }
        }
        for (rows, table, out) in
            [(&g.entity_rows, &g.entity, &mut self.entity), (&g.relation_rows, &g.relation, &mut self.relation)]
        {
            if let Some(t) = table {
                for (i, &r) in rows.iter().enumerate() {
                    let row = t.row(i);
                    if row.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let acc = out.entry(r).or_insert_with(|| vec![0.0; row.len()]);
                    for (a, b) in acc.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.dense.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
        for row in self.entity.values_mut().chain(self.relation.values_mut()) {
            row.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.dense.iter().flatten().all(Tensor::all_finite)
            && self.entity.values().chain(self.relation.values()).flatten().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub pos_score: f64,
    pub neg_score: f64,
    pub repairs: usize,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "step,loss,pos_score,neg_score,repairs,seconds";

impl TrainLogRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.step, self.loss, self.pos_score, self.neg_score, self.repairs, self.seconds
        )
    }
}

pub fn log_csv(records: &[TrainLogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// One query of a batch with its sampled targets.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub query: &'a QueryInstance,
    pub positive: EntityId,
    pub negatives: Vec<EntityId>,
}

/// Loss and gradient of a group of same-structure examples.
pub struct GroupResult {
    pub loss_sum: f64,
    pub pos_score_sum: f64,
    pub neg_score_sum: f64,
    pub repairs: usize,
    pub grads: ParamGrads,
}

/// Summed loss of a same-structure group and its gradients.
pub fn group_loss(
    params: &ModelParams,
    structure: QueryStructure,
    examples: &[Example],
    margin: f64,
    union: UnionMode,
) -> Result<GroupResult, ModelError> {
    let k = examples[0].negatives.len();
    let queries: Vec<&QueryInstance> = examples.iter().map(|e| e.query).collect();
    let positives: Vec<EntityId> = examples.iter().map(|e| e.positive).collect();
    let negatives: Vec<EntityId> = examples.iter().flat_map(|e| e.negatives.iter().copied()).collect();
    let extra: Vec<EntityId> = positives.iter().chain(&negatives).copied().collect();
    let mut s = Session::for_queries(params, &queries, &extra, true)?;
    let branches = s.embed(structure, &queries, union)?;
    let pos = s.entities(&positives)?;
    let d_pos = s.branch_distance(&branches, pos, 1)?;
    let neg = s.entities(&negatives)?;
    let d_neg = s.branch_distance(&branches, neg, k)?;
    let lp = s.tape.affine(d_pos, -1.0, margin);
    let lp = s.tape.log_sigmoid(lp);
    let lp = s.tape.sum(lp);
    let ln = s.tape.affine(d_neg, 1.0, -margin);
    let ln = s.tape.log_sigmoid(ln);
    let ln = s.tape.sum(ln);
    let ln = s.tape.scale(ln, 1.0 / k as f64);
    let total = s.tape.add(lp, ln)?;
    let total = s.tape.scale(total, -1.0);
    let grads = s.gradients(total)?;
    let n = examples.len() as f64;
    Ok(GroupResult {
        loss_sum: s.tape.value(total).item(),
        pos_score_sum: n - s.tape.value(d_pos).data().iter().sum::<f64>(),
        neg_score_sum: (n * k as f64 - s.tape.value(d_neg).data().iter().sum::<f64>()) / k as f64,
        repairs: s.repairs,
        grads,
    })
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRecord>,
}

/// Records usable for training under `config.task`.
pub fn training_records(dataset: &QueryDataset, task: Task) -> Result<Vec<&QueryRecord>, TrainError> {
    if task == Task::Generalization {
        if dataset.records.iter().any(|r| !r.hard.is_empty()) {
            return Err(TrainError::Dataset(
                "training queries carry answers that need held-out edges; sample them on the train split".into(),
            ));
        }
        if dataset.meta.graph_splits.iter().any(|s| s != "train") {
            return Err(TrainError::Dataset(format!(
                "training queries were answered over {:?}; only the train split is allowed",
                dataset.meta.graph_splits
            )));
        }
    }
    let records: Vec<&QueryRecord> = dataset
        .records
        .iter()
        .filter(|r| task == Task::Entailment || r.instance.structure.is_training())
        .filter(|r| !r.easy.is_empty() || !r.hard.is_empty())
        .collect();
    let dropped = dataset.records.len() - records.len();
    if dropped > 0 {
        info!("skipping {dropped} records outside the training structures or without answers");
    }
    if records.is_empty() {
        return Err(TrainError::Dataset("no usable training queries".into()));
    }
    Ok(records)
}

fn dump_batch(examples: &[Example]) -> String {
    let mut s = String::new();
    for e in examples {
        let _ = writeln!(
            s,
            "{} anchors={:?} relations={:?} positive={} negatives={:?}",
            e.query.structure, e.query.anchors, e.query.relations, e.positive, e.negatives
        );
    }
    s
}

/// Trains from `init` (or a fresh seeded initialisation). `on_checkpoint`
/// runs every `checkpoint_every` steps with the current parameters.
pub fn train(
    dataset: &QueryDataset,
    num_entities: usize,
    num_relations: usize,
    config: &TrainConfig,
    init: Option<ModelParams>,
    mut on_checkpoint: impl FnMut(usize, &ModelParams),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let records = training_records(dataset, config.task)?;
    let mut params =
        init.unwrap_or_else(|| ModelParams::init(config.model.clone(), num_entities, num_relations, config.seed));
    let mut adam = Adam::new(&params, config.lr, config.beta1, config.beta2, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut log = Vec::new();
    let (mut loss_acc, mut pos_acc, mut neg_acc, mut rep_acc, mut n_acc) = (0.0, 0.0, 0.0, 0, 0usize);
    let mut replaced = 0usize;
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(records.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(records[order[cursor]]);
            cursor += 1;
        }
        let examples: Vec<Example> = batch
            .iter()
            .map(|r| {
                let pool = if r.easy.is_empty() { &r.hard } else { &r.easy };
                let positive = pool.as_slice()[rng.gen_range(0..pool.len())];
                let answers = r.easy.union(&r.hard);
                let (negatives, with_replacement) =
                    sample_negatives(&answers, config.negatives, num_entities, config.filter_negatives, &mut rng);
                if with_replacement && replaced == 0 {
                    warn!(
                        "a {} query has fewer than {} non-answers; its negatives repeat",
                        r.instance.structure, config.negatives
                    );
                }
                replaced += with_replacement as usize;
                Example { query: &r.instance, positive, negatives }
            })
            .collect();
        let groups: Vec<(QueryStructure, Vec<Example>)> = QueryStructure::ALL
            .iter()
            .filter_map(|&s| {
                let g: Vec<Example> = examples.iter().filter(|e| e.query.structure == s).cloned().collect();
                (!g.is_empty()).then_some((s, g))
            })
            .collect();
        let results: Vec<Result<GroupResult, ModelError>> = if config.workers > 1 {
            pool.install(|| {
                groups.par_iter().map(|(s, g)| group_loss(&params, *s, g, config.margin, config.union)).collect()
            })
        } else {
            groups.iter().map(|(s, g)| group_loss(&params, *s, g, config.margin, config.union)).collect()
        };
        let mut grads = Gradients::new();
        let (mut loss_sum, mut pos_sum, mut neg_sum, mut repairs) = (0.0, 0.0, 0.0, 0);
        for r in results {
            let r = r?;
            loss_sum += r.loss_sum;
            pos_sum += r.pos_score_sum;
            neg_sum += r.neg_score_sum;
            repairs += r.repairs;
            grads.add(&r.grads);
        }
        let n = examples.len() as f64;
        grads.scale(1.0 / n);
        if !loss_sum.is_finite() || !grads.all_finite() {
            return Err(TrainError::NonFinite { step, dump: dump_batch(&examples) });
        }
        adam.apply(&mut params, &grads);
        loss_acc += loss_sum;
        pos_acc += pos_sum;
        neg_acc += neg_sum;
        rep_acc += repairs;
        n_acc += examples.len();
        if step % config.log_every.max(1) == 0 || step == config.steps {
            let rec = TrainLogRecord {
                step,
                loss: loss_acc / n_acc as f64,
                pos_score: pos_acc / n_acc as f64,
                neg_score: neg_acc / n_acc as f64,
                repairs: rep_acc,
                seconds: start.elapsed().as_secs_f64(),
            };
            info!(
                "step {} loss {:.4} pos {:.4} neg {:.4} repairs {} ({:.1}s)",
                rec.step, rec.loss, rec.pos_score, rec.neg_score, rec.repairs, rec.seconds
            );
            log.push(rec);
            (loss_acc, pos_acc, neg_acc, rep_acc, n_acc) = (0.0, 0.0, 0.0, 0, 0);
        }
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, &params);
        }
    }
    if replaced > 0 {
        warn!("{replaced} sampled queries drew negatives with replacement");
    }
    Ok(TrainOutcome { params, log })
}

/// Deterministic 1:1 split of record indices by a hash of each query:
/// records sorted by hash alternate between the halves.
pub fn cardinality_split(dataset: &QueryDataset) -> (Vec<usize>, Vec<usize>) {
    let mut keyed: Vec<([u8; 32], usize)> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let q = &r.instance;
            let text = format!("{}|{:?}|{:?}", q.structure, q.anchors, q.relations);
            (Sha256::digest(text.as_bytes()).into(), i)
        })
        .collect();
    keyed.sort();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (pos, (_, i)) in keyed.into_iter().enumerate() {
        if pos % 2 == 0 {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CardinalityConfig {
    fn default() -> Self {
        Self { epochs: 250, lr: 1e-4, batch_size: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityFit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Mean relative error on the train half after each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Answer-set sizes and De Morgan entropy features of every record.
pub fn cardinality_features(
    params: &ModelParams,
    dataset: &QueryDataset,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), TrainError> {
    let queries: Vec<QueryInstance> = dataset.records.iter().map(|r| r.instance.clone()).collect();
    let emb = params.embed_queries(&queries, UnionMode::Dm)?;
    let feats = emb.iter().map(|e| entropy_features(e.single())).collect();
    let sizes = dataset.records.iter().map(|r| (r.easy.len() + r.hard.len()) as f64).collect();
    Ok((feats, sizes))
}

/// Fits the cardinality head on the train half by minimising the mean
/// relative error `|s - |X|| / |X|`; the rest of the model stays fixed.
/// The output bias starts at the logit of the train-half median size.
pub fn train_cardinality_head(
    params: &mut ModelParams,
    dataset: &QueryDataset,
    config: &CardinalityConfig,
) -> Result<CardinalityFit, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Dataset("empty cardinality dataset".into()));
    }
    let (feats, sizes) = cardinality_features(params, dataset)?;
    let (train, test) = cardinality_split(dataset);
    let train: Vec<usize> = train.into_iter().filter(|&i| sizes[i] > 0.0).collect();
    if train.is_empty() {
        return Err(TrainError::Dataset("no non-empty answer sets in the train half".into()));
    }
    let rho = params.config.rho;
    let mut sorted: Vec<f64> = train.iter().map(|&i| sizes[i]).collect();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let p = (median / rho).clamp(1e-6, 1.0 - 1e-6);
    params.get_mut(Param::H3Bias).data_mut()[0] = (p / (1.0 - p)).ln();
    let d = params.dim();
    let mut adam = Adam::new(params, config.lr, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order = train.clone();
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| sizes[i]).collect();
            let inv: Vec<f64> = y.iter().map(|s| 1.0 / s).collect();
            let mut s = Session::new(params, [], [], true)?;
            let h = s.tape.constant(Tensor::matrix(chunk.len(), d, x).map_err(ModelError::from)?);
            let pred = s.cardinality_from_entropy(h)?;
            let target = s.tape.constant(Tensor::matrix(chunk.len(), 1, y).map_err(ModelError::from)?);
            let inv = s.tape.constant(Tensor::matrix(chunk.len(), 1, inv).map_err(ModelError::from)?);
            let err = s.tape.sub(pred, target).map_err(ModelError::from)?;
            let err = s.tape.abs(err);
            let rel = s.tape.mul(err, inv).map_err(ModelError::from)?;
            let l = s.tape.mean(rel);
            total += s.tape.value(l).item() * chunk.len() as f64;
            let pg = s.gradients(l)?;
            let mut g = Gradients::new();
            for p in Param::HEAD {
                g.dense[p.index()] = pg.dense[p.index()].clone();
            }
            if !g.all_finite() {
                return Err(TrainError::NonFinite { step: adam.steps() as usize + 1, dump: "cardinality head".into() });
            }
            adam.apply(params, &g);
        }
        epoch_loss.push(total / train.len() as f64);
    }
    Ok(CardinalityFit { train, test, epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((loss(0.375, &[0.375; 4], 0.375) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let l = loss(0.0, &[1.0, 0.5], 0.375);
        let expected = -sig(0.375).ln() - 0.5 * (sig(0.625).ln() + sig(0.125).ln());
        assert!((l - expected).abs() < 1e-12, "{l}");
        assert!(loss(0.1, &[0.5], 0.375) < loss(0.2, &[0.5], 0.375));
    }

    #[test]
    fn negatives_avoid_answers() {
        let answers = EntitySet::singleton(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (neg, replaced) = sample_negatives(&answers, 4, 10, true, &mut rng);
        assert_eq!(neg.len(), 4);
        assert!(!replaced && !neg.contains(&3));
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_negatives(&answers, 4, 10, true, &mut rng2).0, neg);
        let all_but_one = EntitySet::from_unsorted((0..10).filter(|&e| e != 6).collect());
        let (neg, replaced) = sample_negatives(&all_but_one, 2, 10, true, &mut rng);
        assert!(replaced);
        assert_eq!(neg, vec![6, 6]);
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_gradient() {
        let config = ModelConfig { dim: 4, hidden: 4, ..ModelConfig::desk() };
        let mut p = ModelParams::init(config, 3, 2, 0);
        let before = p.get(Param::F2).clone();
        let mut adam = Adam::new(&p, 1e-4, 0.9, 0.999, 1e-8);
        let mut g = Gradients::new();
        let mut t = Tensor::zeros(before.shape());
        t.data_mut()[0] = 0.3;
        t.data_mut()[1] = -2.0;
        g.dense[Param::F2.index()] = Some(t);
        g.entity.insert(1, vec![1.0; 8]);
        let e_before = p.get(Param::Entity).clone();
        adam.apply(&mut p, &g);
        let after = p.get(Param::F2);
        assert!((after.data()[0] - (before.data()[0] - 1e-4)).abs() < 1e-9);
        assert!((after.data()[1] - (before.data()[1] + 1e-4)).abs() < 1e-9);
        assert_eq!(after.data()[2], before.data()[2]);
        assert_eq!(p.get(Param::Entity).row(0), e_before.row(0));
        assert_ne!(p.get(Param::Entity).row(1), e_before.row(1));
        assert_eq!(p.get(Param::Entity).row(2), e_before.row(2));
    }

    #[test]
    fn config_round_trips_through_text() {
        let mut c = TrainConfig { negatives: 16, steps: 50, seed: 4, ..Default::default() };
        c.model.tnorm = crate::logic::TNormKind::Luk;
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("margin = -1").is_err());
    }
}
