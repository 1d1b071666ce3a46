//! `skolemqe` command-line tool: data generation, training, evaluation and
//! ad-hoc query answering.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use skolemqe::eval::{self, Statistic};
use skolemqe::kg::{generate_synthetic, SyntheticConfig};
use skolemqe::model::{Checkpoint, ModelParams, UnionMode};
use skolemqe::oracle::{
    self, negation_ratio_counts, read_jsonl, sample_dataset, write_jsonl, QueryDataset, SampleMode,
};
use skolemqe::query::{compile, parse_fol, PlanNode};
use skolemqe::train::{self, log_csv, CardinalityConfig, Task, TrainConfig, TrainError};
use skolemqe::{KnowledgeGraph, QueryStructure, Split};

#[derive(Parser)]
#[command(name = "skolemqe", version, about = "Logical query answering with truth-bound embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic knowledge graph as train/valid/test TSVs.
    GenKg(GenKg),
    /// Sample a query dataset with exact answers.
    GenQueries(GenQueries),
    /// Train a model on a query dataset.
    Train(TrainCmd),
    /// Rank answers of a query dataset and report MRR and Hits@k.
    Eval(EvalCmd),
    /// Correlate embedding uncertainty with answer-set size.
    Correlate(CorrelateCmd),
    /// Fit the cardinality head of a trained model.
    FitCardinality(FitCardinality),
    /// Report cardinality error on the held-out half of a dataset.
    EvalCardinality(EvalCardinality),
    /// Answer one query with a trained model.
    Answer(AnswerCmd),
    /// Answer one query exactly from the triples.
    Oracle(OracleCmd),
}

#[derive(Args)]
struct GenKg {
    #[arg(long)]
    entities: usize,
    #[arg(long)]
    relations: usize,
    #[arg(long, default_value_t = 4.0)]
    avg_degree: f64,
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenQueries {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long, value_parser = parse_with::<SampleMode>)]
    mode: SampleMode,
    #[arg(long)]
    per_structure: usize,
    /// `all`, `training`, `epfo`, `negation` or a comma-separated list of names.
    #[arg(long, default_value = "all")]
    structures: String,
    /// Splits whose triples define the answers, e.g. `train` for training data.
    #[arg(long, default_value = "train,valid,test")]
    graph_splits: String,
    /// Sample negation structures at a tenth of the per-structure count.
    #[arg(long)]
    negation_ratio: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Flat `key = value` settings file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Setting overrides, `key=value`; these win over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Training log CSV (default `<out>.log.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnionArg {
    Dnf,
    Dm,
}

impl From<UnionArg> for UnionMode {
    fn from(u: UnionArg) -> Self {
        match u {
            UnionArg::Dnf => UnionMode::Dnf,
            UnionArg::Dm => UnionMode::Dm,
        }
    }
}

#[derive(Args)]
struct Model {
    #[arg(long)]
    ckpt: PathBuf,
    /// Verify the checkpoint against this graph.
    #[arg(long)]
    kg: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value_t = UnionArg::Dnf)]
    union: UnionArg,
    /// Threads for scoring (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateCmd {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_parser = parse_with::<Statistic>)]
    statistic: Statistic,
    /// Write `(answer size, statistic)` pairs per structure here.
    #[arg(long)]
    emit_plot_data: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitCardinality {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCardinality {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnswerCmd {
    #[command(flatten)]
    model: Model,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    /// Also print this many nearest entities of every intermediate node.
    #[arg(long)]
    explain: Option<usize>,
    #[arg(long, value_enum, default_value_t = UnionArg::Dnf)]
    union: UnionArg,
}

#[derive(Args)]
struct OracleCmd {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    query: String,
    #[arg(long, default_value = "train,valid,test")]
    graph_splits: String,
}

fn parse_with<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn parse_splits(s: &str) -> Result<Vec<Split>> {
    s.split(',')
        .map(|x| match x.trim() {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => bail!("unknown split `{other}`"),
        })
        .collect()
}

fn parse_structures(s: &str) -> Result<Vec<QueryStructure>> {
    Ok(match s {
        "all" => QueryStructure::ALL.to_vec(),
        "training" => QueryStructure::TRAINING.to_vec(),
        "epfo" => QueryStructure::EPFO.to_vec(),
        "negation" => QueryStructure::NEGATION.to_vec(),
        list => list
            .split(',')
            .map(|n| {
                QueryStructure::ALL
                    .into_iter()
                    .find(|s| s.name() == n.trim())
                    .with_context(|| format!("unknown structure `{n}`"))
            })
            .collect::<Result<_>>()?,
    })
}

fn load_kg(dir: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::load_dir(dir).with_context(|| format!("loading graph from {}", dir.display()))
}

fn load_model(m: &Model) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&m.ckpt).with_context(|| format!("loading checkpoint {}", m.ckpt.display()))?;
    if let Some(dir) = &m.kg {
        let hash = load_kg(dir)?.content_hash();
        if ckpt.graph_hash() != Some(hash.as_str()) {
            bail!("checkpoint was trained on graph {:?}, {} has hash {hash}", ckpt.graph_hash(), dir.display());
        }
    }
    Ok(ckpt)
}

fn load_queries(path: &Path, ckpt: &Checkpoint) -> Result<QueryDataset> {
    read_jsonl(path, &ckpt.entities, &ckpt.relations, ckpt.graph_hash())
        .with_context(|| format!("reading queries from {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn set_workers(workers: Option<usize>) {
    if let Some(n) = workers {
        // Fails only if the pool was already built, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_kg(a: GenKg) -> Result<()> {
    let graph = generate_synthetic(&SyntheticConfig {
        num_entities: a.entities,
        num_relations: a.relations,
        avg_out_degree: a.avg_degree,
        valid_frac: a.valid_frac,
        test_frac: a.test_frac,
        seed: a.seed,
    })?;
    graph.write_dir(&a.out)?;
    info!("wrote {} triples to {}", graph.triples().len(), a.out.display());
    Ok(())
}

fn gen_queries(a: GenQueries) -> Result<()> {
    let graph = load_kg(&a.kg)?;
    let structures = parse_structures(&a.structures)?;
    let counts = if a.negation_ratio {
        negation_ratio_counts(&structures, a.per_structure)
    } else {
        structures.iter().map(|&s| (s, a.per_structure)).collect()
    };
    let splits = parse_splits(&a.graph_splits)?;
    let dataset = sample_dataset(&graph, &counts, a.seed, a.mode, &splits);
    write_jsonl(&a.out, &dataset, graph.entities(), graph.relations())?;
    info!("wrote {} queries to {}", dataset.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainCmd) -> Result<()> {
    let graph = load_kg(&a.kg)?;
    let hash = graph.content_hash();
    let dataset = read_jsonl(&a.queries, graph.entities(), graph.relations(), Some(&hash))
        .with_context(|| format!("reading queries from {}", a.queries.display()))?;
    let mut map = BTreeMap::new();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (k, v) in TrainConfig::parse(&text)?.to_pairs() {
            map.insert(k, v);
        }
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got `{kv}`"))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    for (k, v) in [
        ("steps", a.steps.map(|x| x.to_string())),
        ("seed", a.seed.map(|x| x.to_string())),
        ("workers", a.workers.map(|x| x.to_string())),
    ] {
        if let Some(v) = v {
            map.insert(k.to_owned(), v);
        }
    }
    let config = TrainConfig::from_map(&map)?;
    let init = match &a.init {
        Some(p) => {
            let c = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if c.params.config != config.model {
                bail!("initial checkpoint has a different model configuration");
            }
            Some(c.params)
        }
        None => None,
    };
    write(&with_suffix(&a.out, ".config.txt"), &config.to_text())?;
    let header = |step: Option<usize>| {
        let mut h: BTreeMap<String, String> = config.to_pairs().into_iter().collect();
        h.insert("graph_hash".into(), hash.clone());
        if let Some(s) = step {
            h.insert("step".into(), s.to_string());
        }
        h
    };
    let mut save_err = None;
    let outcome =
        train::train(&dataset, graph.num_entities(), graph.num_relations(), &config, init, |step, params| {
            let path = with_suffix(&a.out, &format!(".step{step}"));
            let c = Checkpoint::new(
                params.clone(),
                graph.entities().clone(),
                graph.relations().clone(),
                header(Some(step)),
            );
            if let Err(e) = c.save(&path) {
                save_err.get_or_insert(e);
            }
        })?;
    if let Some(e) = save_err {
        return Err(e.into());
    }
    let ckpt = Checkpoint::new(outcome.params, graph.entities().clone(), graph.relations().clone(), header(None));
    ckpt.save(&a.out)?;
    write(&a.log.unwrap_or_else(|| with_suffix(&a.out, ".log.csv")), &log_csv(&outcome.log))?;
    info!("wrote {}", a.out.display());
    Ok(())
}

fn task_of(dataset: &QueryDataset) -> Task {
    match dataset.meta.mode {
        SampleMode::Entailment => Task::Entailment,
        SampleMode::Generalization => Task::Generalization,
    }
}

fn eval_cmd(a: EvalCmd) -> Result<()> {
    set_workers(a.workers);
    let ckpt = load_model(&a.model)?;
    let dataset = load_queries(&a.queries, &ckpt)?;
    let report = eval::evaluate(&ckpt.params, &dataset, task_of(&dataset), a.union.into())?;
    write(&a.out, &report.to_csv())
}

fn correlate_cmd(a: CorrelateCmd) -> Result<()> {
    set_workers(a.workers);
    let ckpt = load_model(&a.model)?;
    let dataset = load_queries(&a.queries, &ckpt)?;
    let report = eval::uncertainty_correlation(&ckpt.params, &dataset, a.statistic)?;
    if let Some(p) = &a.emit_plot_data {
        write(p, &report.plot_csv())?;
    }
    write(&a.out, &report.to_csv())
}

fn fit_cardinality(a: FitCardinality) -> Result<()> {
    let mut ckpt = load_model(&a.model)?;
    let dataset = load_queries(&a.queries, &ckpt)?;
    let config = CardinalityConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed };
    let fit = train::train_cardinality_head(&mut ckpt.params, &dataset, &config)?;
    info!("cardinality fit: train-half relative error {:.4}", fit.epoch_loss.last().copied().unwrap_or(f64::NAN));
    for (k, v) in [
        ("card.epochs", a.epochs.to_string()),
        ("card.lr", format!("{:?}", a.lr)),
        ("card.batch_size", a.batch_size.to_string()),
        ("card.seed", a.seed.to_string()),
    ] {
        ckpt.header.insert(k.into(), v);
    }
    ckpt.save(&a.out)?;
    Ok(())
}

fn eval_cardinality(a: EvalCardinality) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let dataset = load_queries(&a.queries, &ckpt)?;
    let (train_half, test_half) = train::cardinality_split(&dataset);
    let report = eval::cardinality_mae(&ckpt.params, &dataset, &test_half)?;
    let mut csv = report.to_csv();
    if let Some((mean, median)) = eval::size_mean_median(&dataset, &train_half) {
        for (name, value) in [("mean", mean), ("median", median)] {
            let base = eval::constant_mae(&dataset, &test_half, value)?;
            let total: usize = base.structures.iter().map(|r| r.count).sum();
            csv.push_str(&format!("avg,mae_pct_{name}_baseline,{},{total}\n", base.avg));
        }
    }
    write(&a.out, &csv)
}

fn answer_cmd(a: AnswerCmd) -> Result<()> {
    let ckpt = load_model(&a.model)?;
    let inst = parse_fol(&a.query, &ckpt.entities, &ckpt.relations)?;
    let params: &ModelParams = &ckpt.params;
    let qe = params.embed_query(&inst, a.union.into())?;
    let scores = params.score_entities(&qe);
    for (e, s) in top(&scores, a.topk) {
        println!("{}\t{s:.6}", ckpt.entities.name(e));
    }
    if let Some(n) = a.explain {
        let plan = compile(&inst)?;
        let nodes = params.embed_plan_nodes(&plan)?;
        for id in plan.topo_order() {
            if matches!(plan.nodes[id], PlanNode::Anchor(_)) || id == plan.sink {
                continue;
            }
            let qe = skolemqe::model::QueryEmbedding { branches: vec![nodes[id].clone()] };
            let near: Vec<String> = top(&params.score_entities(&qe), n)
                .into_iter()
                .map(|(e, s)| format!("{}:{s:.3}", ckpt.entities.name(e)))
                .collect();
            println!("# node {id} {}: {}", describe(&plan.nodes[id]), near.join(" "));
        }
    }
    Ok(())
}

fn describe(node: &PlanNode) -> String {
    match node {
        PlanNode::Anchor(e) => format!("anchor {e}"),
        PlanNode::Relate { relation, input } => format!("relate r{relation}({input})"),
        PlanNode::Negate(x) => format!("negate({x})"),
        PlanNode::Conjoin(xs) => format!("conjoin{xs:?}"),
        PlanNode::Disjoin(xs) => format!("disjoin{xs:?}"),
    }
}

/// Highest `k` scores, ties broken by entity id.
fn top(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|e| (e, scores[e])).collect()
}

fn oracle_cmd(a: OracleCmd) -> Result<()> {
    let graph = load_kg(&a.kg)?;
    let inst = parse_fol(&a.query, graph.entities(), graph.relations())?;
    let plan = compile(&inst)?;
    let index = graph.build_index(&parse_splits(&a.graph_splits)?);
    let answers = oracle::eval_plan(&plan, &index);
    let names: Vec<&str> = answers.iter().map(|e| graph.entities().name(e)).collect();
    println!("{{{}}}", names.join(","));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenKg(a) => gen_kg(a),
        Command::GenQueries(a) => gen_queries(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Correlate(a) => correlate_cmd(a),
        Command::FitCardinality(a) => fit_cardinality(a),
        Command::EvalCardinality(a) => eval_cardinality(a),
        Command::Answer(a) => answer_cmd(a),
        Command::Oracle(a) => oracle_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric =
                e.chain().any(|c| matches!(c.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. })));
            ExitCode::from(if numeric { 3 } else { 2 })
        }
    }
}
