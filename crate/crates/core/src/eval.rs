//! Ranking metrics, uncertainty correlations and cardinality error.
//!
//! Ranks are filtered: when ranking an answer every other true answer is
//! ignored, and ties with non-answers count against it. Per-structure MRR and
//! Hits@k average each query's mean over its target answers.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    entropy_features, width_features, EmbeddingMode, ModelError, ModelParams, QueryEmbedding, UnionMode,
};
use crate::oracle::{EntitySet, QueryDataset, QueryRecord};
use crate::query::{QueryInstance, QueryStructure};
use crate::train::Task;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    Empty,
    #[error("entailment evaluation needs a dataset without hard answers ({0} records have some)")]
    WrongMode(usize),
    #[error("{0} needs truth-bound embeddings")]
    NeedsBounds(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl Metrics {
    fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics { mrr: sum(|m| m.mrr), hits1: sum(|m| m.hits1), hits3: sum(|m| m.hits3), hits10: sum(|m| m.hits10) }
    }
}

/// Filtered ranks of `targets` under `scores`: the rank of `t` is one plus
/// the number of entities outside `filter` scoring at least as high. Every
/// target must be in `filter`.
pub fn filtered_ranks(scores: &[f64], targets: &EntitySet, filter: &EntitySet) -> Vec<usize> {
    targets
        .iter()
        .map(|t| {
            let s = scores[t];
            1 + scores.iter().enumerate().filter(|&(v, &x)| x >= s && !filter.contains(v)).count()
        })
        .collect()
}

/// Ranks of a record's hard answers, filtering easy and hard answers.
pub fn rank_hard_answers(scores: &[f64], record: &QueryRecord) -> Vec<usize> {
    filtered_ranks(scores, &record.hard, &record.answers())
}

pub fn mrr_hits(ranks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub structure: QueryStructure,
    pub metrics: Metrics,
    /// Target ranks of every evaluated query, in dataset order.
    pub ranks: Vec<Vec<usize>>,
    /// Queries without targets.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub structures: Vec<StructureReport>,
    pub epfo: Option<Metrics>,
    pub negation: Option<Metrics>,
}

impl RankingReport {
    pub fn get(&self, s: QueryStructure) -> Option<&StructureReport> {
        self.structures.iter().find(|r| r.structure == s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |name: &str, m: &Metrics, count: usize| {
            for (k, v) in [("mrr", m.mrr), ("hits1", m.hits1), ("hits3", m.hits3), ("hits10", m.hits10)] {
                let _ = writeln!(out, "{name},{k},{v},{count}");
            }
        };
        for r in &self.structures {
            row(r.structure.name(), &r.metrics, r.ranks.len());
        }
        let count = |f: fn(QueryStructure) -> bool| {
            self.structures.iter().filter(|r| f(r.structure)).map(|r| r.ranks.len()).sum()
        };
        if let Some(m) = &self.epfo {
            row("epfo_avg", m, count(|s| !s.has_negation()));
        }
        if let Some(m) = &self.negation {
            row("negation_avg", m, count(QueryStructure::has_negation));
        }
        out
    }
}

pub const CSV_HEADER: &str = "structure,metric,value,count";

fn scores(params: &ModelParams, queries: &[QueryInstance], union: UnionMode) -> Result<Vec<Vec<f64>>, EvalError> {
    let emb: Vec<QueryEmbedding> = params.embed_queries(queries, union)?;
    Ok(emb.par_iter().map(|e| params.score_entities(e)).collect())
}

fn ranking(
    params: &ModelParams,
    dataset: &QueryDataset,
    union: UnionMode,
    targets: impl Fn(&QueryRecord) -> &EntitySet + Sync,
) -> Result<RankingReport, EvalError> {
    let mut structures = Vec::new();
    for s in QueryStructure::ALL {
        let records: Vec<&QueryRecord> = dataset.records.iter().filter(|r| r.instance.structure == s).collect();
        if records.is_empty() {
            continue;
        }
        let queries: Vec<QueryInstance> = records.iter().map(|r| r.instance.clone()).collect();
        let all_scores = scores(params, &queries, union)?;
        let ranks: Vec<Vec<usize>> =
            records.par_iter().zip(&all_scores).map(|(r, sc)| filtered_ranks(sc, targets(r), &r.answers())).collect();
        let per_query: Vec<Metrics> =
            ranks.iter().filter(|r| !r.is_empty()).map(|r| mrr_hits(r)).collect::<Result<_, _>>()?;
        let skipped = ranks.len() - per_query.len();
        if per_query.is_empty() {
            continue;
        }
        let ranks = ranks.into_iter().filter(|r| !r.is_empty()).collect();
        structures.push(StructureReport { structure: s, metrics: Metrics::mean(&per_query), ranks, skipped });
    }
    if structures.is_empty() {
        return Err(EvalError::Empty);
    }
    let avg = |neg: bool| {
        let m: Vec<Metrics> =
            structures.iter().filter(|r| r.structure.has_negation() == neg).map(|r| r.metrics).collect();
        (!m.is_empty()).then(|| Metrics::mean(&m))
    };
    let (epfo, negation) = (avg(false), avg(true));
    Ok(RankingReport { structures, epfo, negation })
}

/// Filtered ranking of hard answers.
pub fn generalization_eval(
    params: &ModelParams,
    dataset: &QueryDataset,
    union: UnionMode,
) -> Result<RankingReport, EvalError> {
    ranking(params, dataset, union, |r| &r.hard)
}

/// Filtered ranking of easy answers; the dataset must have no hard answers.
pub fn entailment_eval(
    params: &ModelParams,
    dataset: &QueryDataset,
    union: UnionMode,
) -> Result<RankingReport, EvalError> {
    let bad = dataset.records.iter().filter(|r| !r.hard.is_empty()).count();
    if bad > 0 {
        return Err(EvalError::WrongMode(bad));
    }
    ranking(params, dataset, union, |r| &r.easy)
}

pub fn evaluate(
    params: &ModelParams,
    dataset: &QueryDataset,
    task: Task,
    union: UnionMode,
) -> Result<RankingReport, EvalError> {
    match task {
        Task::Generalization => generalization_eval(params, dataset, union),
        Task::Entailment => entailment_eval(params, dataset, union),
    }
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation, `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    /// Sum of per-dimension log widths.
    Entropy,
    /// Sum of per-dimension widths.
    Width,
}

impl Statistic {
    pub fn of(self, x: &[f64]) -> f64 {
        match self {
            Self::Entropy => entropy_features(x).iter().sum(),
            Self::Width => width_features(x).iter().sum(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Entropy => "entropy",
            Self::Width => "width",
        }
    }
}

impl std::str::FromStr for Statistic {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "width" => Ok(Self::Width),
            _ => Err(format!("unknown statistic `{s}` (entropy|width)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub structure: QueryStructure,
    pub spearman: f64,
    pub pearson: f64,
    /// Set when a side had zero variance and the values were reported as 0.
    pub degenerate: bool,
    pub count: usize,
    /// `(answer size, statistic)` per query.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    pub statistic: Statistic,
    pub structures: Vec<Correlation>,
    pub spearman_avg: f64,
    pub pearson_avg: f64,
}

impl UncertaintyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let stat = self.statistic.name();
        for c in &self.structures {
            let _ = writeln!(out, "{},spearman_{stat},{},{}", c.structure, c.spearman, c.count);
            let _ = writeln!(out, "{},pearson_{stat},{},{}", c.structure, c.pearson, c.count);
        }
        let total: usize = self.structures.iter().map(|c| c.count).sum();
        let _ = writeln!(out, "avg,spearman_{stat},{},{total}", self.spearman_avg);
        let _ = writeln!(out, "avg,pearson_{stat},{},{total}", self.pearson_avg);
        out
    }

    /// `structure,answer_size,statistic` rows for plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = format!("structure,answer_size,{}\n", self.statistic.name());
        for c in &self.structures {
            for (x, y) in &c.points {
                let _ = writeln!(out, "{},{x},{y}", c.structure);
            }
        }
        out
    }
}

fn per_structure(dataset: &QueryDataset) -> impl Iterator<Item = (QueryStructure, Vec<&QueryRecord>)> {
    QueryStructure::ALL.into_iter().filter_map(move |s| {
        let recs: Vec<&QueryRecord> = dataset.records.iter().filter(|r| r.instance.structure == s).collect();
        (!recs.is_empty()).then_some((s, recs))
    })
}

fn dm_embeddings(params: &ModelParams, records: &[&QueryRecord]) -> Result<Vec<Vec<f64>>, EvalError> {
    let queries: Vec<QueryInstance> = records.iter().map(|r| r.instance.clone()).collect();
    Ok(params.embed_queries(&queries, UnionMode::Dm)?.into_iter().map(|e| e.single().to_vec()).collect())
}

/// Correlation between an uncertainty statistic of each query embedding and
/// its answer-set size. Unions use the De Morgan form so that every query
/// has a single embedding.
pub fn uncertainty_correlation(
    params: &ModelParams,
    dataset: &QueryDataset,
    statistic: Statistic,
) -> Result<UncertaintyReport, EvalError> {
    if params.config.mode != EmbeddingMode::Bounds {
        return Err(EvalError::NeedsBounds("uncertainty correlation"));
    }
    let mut structures = Vec::new();
    for (s, recs) in per_structure(dataset) {
        let emb = dm_embeddings(params, &recs)?;
        let stats: Vec<f64> = emb.iter().map(|e| statistic.of(e)).collect();
        let sizes: Vec<f64> = recs.iter().map(|r| (r.easy.len() + r.hard.len()) as f64).collect();
        let sp = spearman(&stats, &sizes);
        let pe = pearson(&stats, &sizes);
        structures.push(Correlation {
            structure: s,
            spearman: sp.unwrap_or(0.0),
            pearson: pe.unwrap_or(0.0),
            degenerate: sp.is_none() || pe.is_none(),
            count: recs.len(),
            points: sizes.into_iter().zip(stats).collect(),
        });
    }
    if structures.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = structures.len() as f64;
    let spearman_avg = structures.iter().map(|c| c.spearman).sum::<f64>() / n;
    let pearson_avg = structures.iter().map(|c| c.pearson).sum::<f64>() / n;
    Ok(UncertaintyReport { statistic, structures, spearman_avg, pearson_avg })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeRow {
    pub structure: QueryStructure,
    /// Mean of `|s - |X|| / |X|` in percent.
    pub mae: f64,
    pub count: usize,
    /// Queries skipped for having no answers.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardinalityReport {
    pub structures: Vec<MaeRow>,
    pub avg: f64,
}

impl CardinalityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.structures {
            let _ = writeln!(out, "{},mae_pct,{},{}", r.structure, r.mae, r.count);
        }
        let total: usize = self.structures.iter().map(|r| r.count).sum();
        let _ = writeln!(out, "avg,mae_pct,{},{total}", self.avg);
        out
    }
}

/// Mean relative error in percent of `predict` over the records at
/// `indices`, per structure.
pub fn mae_report(
    dataset: &QueryDataset,
    indices: &[usize],
    predict: impl Fn(&[usize]) -> Result<Vec<f64>, EvalError>,
) -> Result<CardinalityReport, EvalError> {
    let mut structures = Vec::new();
    for s in QueryStructure::ALL {
        let idx: Vec<usize> = indices.iter().copied().filter(|&i| dataset.records[i].instance.structure == s).collect();
        if idx.is_empty() {
            continue;
        }
        let sizes: Vec<f64> = idx.iter().map(|&i| dataset.records[i].answers().len() as f64).collect();
        let keep: Vec<usize> = (0..idx.len()).filter(|&j| sizes[j] > 0.0).collect();
        let skipped = idx.len() - keep.len();
        if keep.is_empty() {
            continue;
        }
        let kept: Vec<usize> = keep.iter().map(|&j| idx[j]).collect();
        let pred = predict(&kept)?;
        let mae =
            keep.iter().zip(&pred).map(|(&j, p)| (p - sizes[j]).abs() / sizes[j]).sum::<f64>() / keep.len() as f64;
        structures.push(MaeRow { structure: s, mae: 100.0 * mae, count: keep.len(), skipped });
    }
    if structures.is_empty() {
        return Err(EvalError::Empty);
    }
    let avg = structures.iter().map(|r| r.mae).sum::<f64>() / structures.len() as f64;
    Ok(CardinalityReport { structures, avg })
}

/// Cardinality head error on the records at `indices`.
pub fn cardinality_mae(
    params: &ModelParams,
    dataset: &QueryDataset,
    indices: &[usize],
) -> Result<CardinalityReport, EvalError> {
    if params.config.mode != EmbeddingMode::Bounds {
        return Err(EvalError::NeedsBounds("cardinality prediction"));
    }
    mae_report(dataset, indices, |idx| {
        let recs: Vec<&QueryRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
        let emb = dm_embeddings(params, &recs)?;
        Ok(params.predict_cardinality_batch(&emb)?)
    })
}

/// Error of predicting the constant `value` for every record at `indices`.
pub fn constant_mae(dataset: &QueryDataset, indices: &[usize], value: f64) -> Result<CardinalityReport, EvalError> {
    mae_report(dataset, indices, |idx| Ok(vec![value; idx.len()]))
}

/// Mean and median answer-set size over the records at `indices`.
pub fn size_mean_median(dataset: &QueryDataset, indices: &[usize]) -> Option<(f64, f64)> {
    let mut sizes: Vec<f64> = indices.iter().map(|&i| dataset.records[i].answers().len() as f64).collect();
    if sizes.is_empty() {
        return None;
    }
    sizes.sort_by(f64::total_cmp);
    let mean = sizes.iter().sum::<f64>() / sizes.len() as f64;
    Some((mean, sizes[sizes.len() / 2]))
}
