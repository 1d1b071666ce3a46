//! Acceptance suite: one PASS/FAIL line per criterion, run in order.
//!
//! Criteria 6 to 9 train desk-scale models and take most of the runtime.
//! Artifacts (checkpoints, metric CSVs) are written under the cargo target
//! temp directory so the numbers can be inspected afterwards.

use std::fmt::Write as _;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skolemqe::autodiff::{gradient_check, AutodiffError, Tape, Tensor, Var};
use skolemqe::eval::{
    cardinality_mae, constant_mae, entailment_eval, generalization_eval, mrr_hits, size_mean_median, spearman,
    uncertainty_correlation, Metrics, Statistic,
};
use skolemqe::kg::{generate_synthetic, SyntheticConfig};
use skolemqe::logic::{
    conjoin_bounds, disjoin_bounds, negate, tnorm, truth_grid, weighted_tnorm, TNormKind, TruthBounds,
};
use skolemqe::model::{
    param_gradient_check, Checkpoint, ModelConfig, ModelError, ModelParams, ParamGrads, Session, UnionMode,
};
use skolemqe::oracle::{eval_plan, exhaustive_eval, sample_dataset, EntitySet, QueryDataset, SampleMode};
use skolemqe::query::{compile, to_dnf};
use skolemqe::train::{group_loss, train, train_cardinality_head, CardinalityConfig, Example, Task, TrainConfig};
use skolemqe::{KnowledgeGraph, QueryInstance, QueryStructure, Split};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Shared desk-scale setup

const DESK_SEED: u64 = 7;
const DESK_STEPS: usize = 20_000;

fn desk_graph() -> KnowledgeGraph {
    generate_synthetic(&SyntheticConfig {
        num_entities: 200,
        num_relations: 5,
        avg_out_degree: 4.0,
        valid_frac: 0.1,
        test_frac: 0.1,
        seed: DESK_SEED,
    })
    .expect("desk graph")
}

fn desk_config(task: Task) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::desk(),
        task,
        margin: 0.375,
        negatives: 16,
        steps: DESK_STEPS,
        lr: 1e-4,
        seed: 0,
        log_every: 1000,
        ..TrainConfig::default()
    }
}

struct Generalization {
    params: ModelParams,
    test: QueryDataset,
}

struct Ctx {
    out: PathBuf,
    graph: KnowledgeGraph,
    generalization: Option<Generalization>,
}

impl Ctx {
    fn save(&self, name: &str, params: &ModelParams) {
        let ckpt = Checkpoint::new(
            params.clone(),
            self.graph.entities().clone(),
            self.graph.relations().clone(),
            [("graph_hash".to_owned(), self.graph.content_hash())].into(),
        );
        let _ = ckpt.save(&self.out.join(name));
    }

    fn write(&self, name: &str, text: &str) {
        let _ = fs::write(self.out.join(name), text);
    }
}

fn structure_hits3(metrics: &[(QueryStructure, Metrics)]) -> String {
    metrics.iter().map(|(s, m)| format!("{s} {:.3}", m.hits3)).collect::<Vec<_>>().join(", ")
}

// ---------------------------------------------------------------------------
// 1. Logic kernel laws

/// Scalar t-norms written out independently of the library.
fn reference_tnorm(kind: TNormKind, a: f64, b: f64) -> f64 {
    match kind {
        TNormKind::Min => a.min(b),
        TNormKind::Prod => a * b,
        TNormKind::Luk => (a + b - 1.0).max(0.0),
    }
}

fn grid_bounds(g: &[f64]) -> Vec<TruthBounds> {
    let mut out = Vec::new();
    for (i, &l) in g.iter().enumerate() {
        for &u in &g[i..] {
            out.push(TruthBounds::new(&[l], &[u]).unwrap());
        }
    }
    out
}

fn logic_laws(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let g = truth_grid(20);
    let mut failures = Vec::new();
    for kind in TNormKind::ALL {
        for &a in &g {
            if tnorm(kind, &[1.0, a]) != a {
                failures.push(format!("{kind} identity at {a}"));
            }
            if tnorm(kind, &[0.0, a]) != 0.0 {
                failures.push(format!("{kind} annihilator at {a}"));
            }
            for &b in &g {
                if tnorm(kind, &[a, b]) != tnorm(kind, &[b, a]) {
                    failures.push(format!("{kind} commutativity at {a},{b}"));
                }
                for &c in &g {
                    let left = tnorm(kind, &[tnorm(kind, &[a, b]), c]);
                    let right = tnorm(kind, &[a, tnorm(kind, &[b, c])]);
                    if (left - right).abs() > 1e-9 {
                        failures.push(format!("{kind} associativity at {a},{b},{c}"));
                    }
                    if b >= a && tnorm(kind, &[a, c]) > tnorm(kind, &[b, c]) {
                        failures.push(format!("{kind} monotonicity at {a},{b},{c}"));
                    }
                }
            }
        }
    }
    for &t in &g {
        if tnorm(TNormKind::Luk, &[t, 1.0 - t]) != 0.0 {
            failures.push(format!("Lukasiewicz nilpotency at {t}"));
        }
    }
    let bounds = grid_bounds(&g);
    for s in &bounds {
        if negate(&negate(s)) != *s {
            failures.push(format!("negation involution at {s:?}"));
        }
    }
    for kind in TNormKind::ALL {
        for a in &bounds {
            for b in &bounds {
                let dis = disjoin_bounds(kind, None, &[a.clone(), b.clone()]).unwrap().bounds;
                let con = conjoin_bounds(kind, None, &[negate(a), negate(b)]).unwrap().bounds;
                if dis != negate(&con) {
                    failures.push(format!("{kind} De Morgan at {a:?},{b:?}"));
                }
                // The dual conorm, computed without the library, up to rounding.
                let conorm = |x: f64, y: f64| 1.0 - reference_tnorm(kind, 1.0 - x, 1.0 - y);
                let expected = [conorm(a.lower()[0], b.lower()[0]), conorm(a.upper()[0], b.upper()[0])];
                if dis.as_slice().iter().zip(expected).any(|(x, y)| (x - y).abs() > 1e-12) {
                    failures.push(format!("{kind} conorm at {a:?},{b:?}"));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(10) {
        failures.push(format!("runtime {elapsed:?} over 10 s"));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("all laws hold on the 21-point grid ({:.2} s)", elapsed.as_secs_f64())
        } else {
            format!("{} violations, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------------------
// 2. Weighted reduction

fn weighted_reduction(_: &mut Ctx) -> Verdict {
    let g = truth_grid(20);
    let mut failures = Vec::new();
    let mut smooth_gap: f64 = 0.0;
    let mut worst = (0.0, 0.0);
    for &a in &g {
        for &b in &g {
            for kind in [TNormKind::Prod, TNormKind::Luk] {
                if weighted_tnorm(kind, &[1.0, 1.0], &[a, b]).unwrap() != tnorm(kind, &[a, b]) {
                    failures.push(format!("{kind} unit weights at {a},{b}"));
                }
                let removed = weighted_tnorm(kind, &[1.0, 0.0], &[a, b]).unwrap();
                if removed != weighted_tnorm(kind, &[1.0], &[a]).unwrap() {
                    failures.push(format!("{kind} zero weight at {a},{b}"));
                }
            }
            let gap = (weighted_tnorm(TNormKind::Min, &[1.0, 1.0], &[a, b]).unwrap() - a.min(b)).abs();
            if gap > smooth_gap {
                smooth_gap = gap;
                worst = (a, b);
            }
        }
    }
    if smooth_gap > 1e-3 {
        failures.push(format!(
            "smoothmin with unit weights deviates from min by {smooth_gap:.4} at ({:.2}, {:.2}), tolerance 1e-3",
            worst.0, worst.1
        ));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("prod/luk exact; smoothmin max gap {smooth_gap:.2e}")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_ABS_TOL: f64 = 1e-7;
const FD_POINTS: u64 = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let c = random_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let c = tape.constant(c);
    let z = tape.mul(y, c)?;
    Ok(tape.sum(z))
}

type Prim = fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>;
type PrimCase = (&'static str, Vec<Vec<usize>>, (f64, f64), Prim);

fn primitives() -> Vec<PrimCase> {
    vec![
        ("relu", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.relu(v[0]))),
        ("max_zero", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.max_zero(v[0]))),
        ("sigmoid", vec![vec![3, 4]], (-3.0, 3.0), |t, v| Ok(t.sigmoid(v[0]))),
        ("log", vec![vec![3, 4]], (0.1, 2.0), |t, v| Ok(t.log(v[0]))),
        ("exp", vec![vec![3, 4]], (-2.0, 2.0), |t, v| Ok(t.exp(v[0]))),
        ("abs", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.abs(v[0]))),
        ("log_sigmoid", vec![vec![3, 4]], (-5.0, 5.0), |t, v| Ok(t.log_sigmoid(v[0]))),
        ("affine", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.affine(v[0], -0.7, 0.2))),
        ("scale", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.scale(v[0], 1.7))),
        ("one_minus", vec![vec![3, 4]], (0.0, 1.0), |t, v| Ok(t.one_minus(v[0]))),
        ("add", vec![vec![3, 4], vec![1, 4]], (-1.0, 1.0), |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 1]], (-1.0, 1.0), |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![1, 3, 4]], (-1.0, 1.0), |t, v| t.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], (0.5, 2.0), |t, v| t.div(v[0], v[1])),
        ("pow", vec![vec![3, 4], vec![3, 4]], (0.2, 1.0), |t, v| t.pow(v[0], v[1])),
        ("matmul", vec![vec![3, 5], vec![5, 2]], (-1.0, 1.0), |t, v| t.matmul(v[0], v[1])),
        ("sum_axis", vec![vec![3, 4, 2]], (-1.0, 1.0), |t, v| t.sum_axis(v[0], 1)),
        ("max_axis", vec![vec![3, 4, 2]], (-1.0, 1.0), |t, v| t.max_axis(v[0], 0)),
        ("min_axis", vec![vec![3, 4, 2]], (-1.0, 1.0), |t, v| t.min_axis(v[0], 1)),
        ("softmax_axis", vec![vec![3, 4, 2]], (-2.0, 2.0), |t, v| t.softmax_axis(v[0], 0)),
        ("smoothmin", vec![vec![3, 4, 2], vec![3, 4, 2]], (0.05, 1.0), |t, v| {
            t.smoothmin_weighted(v[0], v[1], 0, -10.0)
        }),
        ("sum", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![vec![3, 4]], (-1.0, 1.0), |t, v| Ok(t.mean(v[0]))),
        ("concat_last", vec![vec![3, 2], vec![3, 4]], (-1.0, 1.0), |t, v| t.concat_last(&[v[0], v[1]])),
        ("slice_last", vec![vec![3, 6]], (-1.0, 1.0), |t, v| t.slice_last(v[0], 2, 3)),
        ("reshape", vec![vec![3, 4]], (-1.0, 1.0), |t, v| t.reshape(v[0], &[2, 6])),
        ("stack", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), |t, v| t.stack(&[v[0], v[1]])),
        ("select", vec![vec![3, 4, 2]], (-1.0, 1.0), |t, v| t.select(v[0], 1)),
        ("gather_rows", vec![vec![3, 4]], (-1.0, 1.0), |t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
    ]
}

fn bounds_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * 2 * d];
    for row in 0..n {
        for i in 0..d {
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            data[row * 2 * d + i] = a.min(b);
            data[row * 2 * d + d + i] = a.max(b);
        }
    }
    Tensor::matrix(n, 2 * d, data).unwrap()
}

/// Small model with biases moved off zero, so no relu sits exactly on its
/// kink when differencing.
fn small_params(tnorm: TNormKind, seed: u64) -> ModelParams {
    let config = ModelConfig { dim: 4, hidden: 8, tnorm, ..ModelConfig::desk() };
    let mut params = ModelParams::init(config, 3, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in skolemqe::model::Param::ALL.into_iter().filter(|p| p.is_bias()) {
        for v in params.get_mut(p).data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    params
}

type ModelOut = Result<(f64, ParamGrads), ModelError>;
type ModelFn = Box<dyn Fn(&ModelParams, &mut ChaCha8Rng) -> ModelOut>;

fn finish(s: &mut Session, y: Var, seed: u64) -> ModelOut {
    let out = project(&mut s.tape, y, seed)?;
    Ok((s.tape.value(out).item(), s.gradients(out)?))
}

fn model_checks() -> Vec<(String, TNormKind, ModelFn)> {
    let mut checks: Vec<(String, TNormKind, ModelFn)> = vec![
        (
            "skolem".into(),
            TNormKind::Min,
            Box::new(|p, rng| {
                let mut s = Session::new(p, [], [0, 1], true)?;
                let x = s.tape.constant(bounds_batch(rng, 2, 4));
                let r = s.relations(&[1, 0])?;
                let y = s.skolem(r, x)?;
                finish(&mut s, y, 1)
            }),
        ),
        (
            "attention".into(),
            TNormKind::Min,
            Box::new(|p, rng| {
                let mut s = Session::new(p, [], [], true)?;
                let xs: Vec<Var> = (0..3).map(|_| s.tape.constant(bounds_batch(rng, 2, 4))).collect();
                let w = s.attention_weights(&xs)?;
                finish(&mut s, w, 2)
            }),
        ),
        (
            "dissimilarity".into(),
            TNormKind::Min,
            Box::new(|p, rng| {
                let mut s = Session::new(p, [0, 1, 2], [], true)?;
                let q = s.tape.constant(bounds_batch(rng, 3, 4));
                let e = s.entities(&[2, 0, 1])?;
                let d = s.distance(q, e)?;
                finish(&mut s, d, 4)
            }),
        ),
    ];
    for kind in TNormKind::ALL {
        checks.push((
            format!("weighted {kind}"),
            kind,
            Box::new(|p, rng| {
                let mut s = Session::new(p, [], [], true)?;
                let xs: Vec<Var> = (0..3).map(|_| s.tape.constant(bounds_batch(rng, 2, 4))).collect();
                let y = s.conjoin(&xs)?;
                finish(&mut s, y, 3)
            }),
        ));
    }
    for (i, structure) in QueryStructure::ALL.into_iter().enumerate() {
        checks.push((
            format!("margin loss {structure}"),
            TNormKind::ALL[i % 3],
            Box::new(move |p, _| {
                let anchors = (0..structure.num_anchors()).map(|i| i % 3).collect();
                let relations = (0..structure.num_relations()).map(|i| i % 2).collect();
                let q = QueryInstance::new(structure, anchors, relations).unwrap();
                let examples = [Example { query: &q, positive: 1, negatives: vec![0, 2] }];
                let r = group_loss(p, structure, &examples, 0.375, UnionMode::Dnf)?;
                Ok((r.loss_sum, r.grads))
            }),
        ));
    }
    checks
}

fn gradient_correctness(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut count = 0;
    for (name, shapes, (lo, hi), f) in primitives() {
        for point in 0..FD_POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s, lo, hi)).collect();
            let report = gradient_check(&inputs, FD_STEP, FD_ABS_TOL, |t, v| {
                let y = f(t, v)?;
                project(t, y, point)
            });
            count += 1;
            match report {
                Ok(r) if r.passes(FD_REL_TOL) => {}
                Ok(r) => failures.push(format!("{name} at point {point}: rel {:.2e}", r.max_rel_err)),
                Err(e) => failures.push(format!("{name} at point {point}: {e}")),
            }
        }
    }
    for (name, tnorm, f) in model_checks() {
        // The loss is checked at FD_POINTS points spread over the structures.
        let points = if name.starts_with("margin loss") { 2 } else { FD_POINTS };
        for point in 0..points {
            let params = small_params(tnorm, point);
            let report = param_gradient_check(&params, FD_STEP, FD_ABS_TOL, |p| {
                let mut rng = ChaCha8Rng::seed_from_u64(point + 1000);
                f(p, &mut rng)
            });
            count += 1;
            match report {
                Ok(r) if r.passes(FD_REL_TOL) && r.checked > 0 => {}
                Ok(r) => failures.push(format!("{name} at point {point}: rel {:.2e}", r.max_rel_err)),
                Err(e) => failures.push(format!("{name} at point {point}: {e}")),
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(30) {
        failures.push(format!("runtime {:.1} s over 30 s", elapsed.as_secs_f64()));
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{count} checks at {FD_POINTS} points each ({:.1} s)", elapsed.as_secs_f64())
        } else {
            format!("{} failures, first: {}", failures.len(), failures[0])
        },
    )
}

// ---------------------------------------------------------------------------
// 4, 5. Oracle equivalence and DNF soundness

fn oracle_graph() -> KnowledgeGraph {
    generate_synthetic(&SyntheticConfig {
        num_entities: 50,
        num_relations: 4,
        avg_out_degree: 3.0,
        valid_frac: 0.1,
        test_frac: 0.1,
        seed: 11,
    })
    .unwrap()
}

/// Half walk-sampled instances (non-empty answers), half uniform random.
fn random_instances(graph: &KnowledgeGraph, s: QueryStructure, n: usize, seed: u64) -> Vec<QueryInstance> {
    let sampled = sample_dataset(graph, &[(s, n / 2)], seed, SampleMode::Entailment, &Split::ALL);
    let mut out: Vec<QueryInstance> = sampled.records.into_iter().map(|r| r.instance).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < n {
        let anchors = (0..s.num_anchors()).map(|_| rng.gen_range(0..graph.num_entities())).collect();
        let relations = (0..s.num_relations()).map(|_| rng.gen_range(0..graph.num_relations())).collect();
        out.push(QueryInstance::new(s, anchors, relations).unwrap());
    }
    out
}

fn oracle_equivalence(_: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let graph = oracle_graph();
    let index = graph.build_index(&Split::ALL);
    let mut mismatches = Vec::new();
    let mut nonempty = 0;
    for (i, s) in QueryStructure::ALL.into_iter().enumerate() {
        for inst in random_instances(&graph, s, 100, i as u64) {
            let fast = eval_plan(&compile(&inst).unwrap(), &index);
            let slow = exhaustive_eval(&inst, &graph, &Split::ALL).map_err(|e| e.to_string())?;
            nonempty += !fast.is_empty() as usize;
            if fast != slow {
                mismatches.push(format!("{inst:?}"));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        mismatches.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{} mismatches over 1400 instances ({nonempty} with answers, {:.1} s)",
            mismatches.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn dnf_soundness(_: &mut Ctx) -> Verdict {
    let graph = oracle_graph();
    let index = graph.build_index(&Split::ALL);
    let mut bad = 0;
    let mut total = 0;
    for s in [QueryStructure::U2, QueryStructure::Up] {
        for inst in random_instances(&graph, s, 100, 99) {
            let plan = compile(&inst).unwrap();
            let union = to_dnf(&plan)
                .map_err(|e| e.to_string())?
                .iter()
                .fold(EntitySet::empty(), |acc, b| acc.union(&eval_plan(b, &index)));
            bad += (union != eval_plan(&plan, &index)) as usize;
            total += 1;
        }
    }
    check(bad == 0, format!("{bad} of {total} 2u/up instances differ"))
}

// ---------------------------------------------------------------------------
// 6. Desk-scale entailment

fn desk_entailment(ctx: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let counts: Vec<_> = QueryStructure::ALL.iter().map(|&s| (s, 500)).collect();
    let data = sample_dataset(&ctx.graph, &counts, 1, SampleMode::Entailment, &Split::ALL);
    let cfg = desk_config(Task::Entailment);
    let out = train(&data, ctx.graph.num_entities(), ctx.graph.num_relations(), &cfg, None, |_, _| {})
        .map_err(|e| e.to_string())?;
    let train_secs = start.elapsed().as_secs_f64();
    ctx.save("entailment.ckpt", &out.params);
    ctx.write("entailment.log.csv", &skolemqe::train::log_csv(&out.log));
    let report = entailment_eval(&out.params, &data, UnionMode::Dnf).map_err(|e| e.to_string())?;
    ctx.write("entailment.metrics.csv", &report.to_csv());
    let per: Vec<(QueryStructure, Metrics)> = report.structures.iter().map(|r| (r.structure, r.metrics)).collect();
    let p1 = report.get(QueryStructure::P1).ok_or("no 1p queries")?.metrics.hits3;
    let avg = per.iter().map(|(_, m)| m.hits3).sum::<f64>() / per.len() as f64;
    check(
        p1 >= 0.95 && avg >= 0.60,
        format!(
            "1p hits@3 {p1:.3} (need 0.95), average hits@3 {avg:.3} (need 0.60); training {train_secs:.0} s; per structure: {}",
            structure_hits3(&per)
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Desk-scale generalization

fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

fn generalization_model(ctx: &mut Ctx) -> Result<&Generalization, String> {
    if ctx.generalization.is_none() {
        let train_counts: Vec<_> = QueryStructure::TRAINING.iter().map(|&s| (s, 500)).collect();
        let train_data = sample_dataset(&ctx.graph, &train_counts, 1, SampleMode::Entailment, &[Split::Train]);
        let test_counts: Vec<_> = QueryStructure::ALL.iter().map(|&s| (s, 200)).collect();
        let test = sample_dataset(&ctx.graph, &test_counts, 2, SampleMode::Generalization, &Split::ALL);
        let cfg = desk_config(Task::Generalization);
        let out = train(&train_data, ctx.graph.num_entities(), ctx.graph.num_relations(), &cfg, None, |_, _| {})
            .map_err(|e| e.to_string())?;
        ctx.save("generalization.ckpt", &out.params);
        ctx.write("generalization.log.csv", &skolemqe::train::log_csv(&out.log));
        ctx.generalization = Some(Generalization { params: out.params, test });
    }
    Ok(ctx.generalization.as_ref().unwrap())
}

fn desk_generalization(ctx: &mut Ctx) -> Verdict {
    let start = Instant::now();
    let g = generalization_model(ctx)?;
    let report = generalization_eval(&g.params, &g.test, UnionMode::Dnf).map_err(|e| e.to_string())?;
    let csv = report.to_csv();
    let secs = start.elapsed().as_secs_f64();
    ctx.write("generalization.metrics.csv", &csv);
    let baseline = random_mrr(ctx.graph.num_entities());
    let mrr = |s| report.get(s).map(|r| r.metrics.mrr).unwrap_or(0.0);
    let p1 = mrr(QueryStructure::P1);
    let mut ok = p1 >= 10.0 * baseline;
    let mut detail = format!("random baseline MRR {baseline:.4}; 1p MRR {p1:.4} (need {:.4})", 10.0 * baseline);
    for s in [QueryStructure::Ip, QueryStructure::Pi, QueryStructure::U2, QueryStructure::Up] {
        let m = mrr(s);
        ok &= m > baseline;
        let _ = write!(detail, ", {s} {m:.4}");
    }
    let _ = write!(detail, "; {secs:.0} s");
    check(ok, detail)
}

// ---------------------------------------------------------------------------
// 8. Uncertainty correlation

fn uncertainty(ctx: &mut Ctx) -> Verdict {
    let g = generalization_model(ctx)?;
    let mut ok = true;
    let mut parts = Vec::new();
    let mut csvs = Vec::new();
    for stat in [Statistic::Entropy, Statistic::Width] {
        let report = uncertainty_correlation(&g.params, &g.test, stat).map_err(|e| e.to_string())?;
        ok &= report.spearman_avg > 0.3;
        let degenerate = report.structures.iter().filter(|c| c.degenerate).count();
        parts.push(format!(
            "{} spearman {:.3} pearson {:.3} ({degenerate} degenerate structures)",
            stat.name(),
            report.spearman_avg,
            report.pearson_avg
        ));
        csvs.push((format!("uncertainty.{}.csv", stat.name()), report.to_csv()));
    }
    for (name, csv) in csvs {
        ctx.write(&name, &csv);
    }
    check(ok, format!("{} (need > 0.3 each)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 9. Cardinality head

fn cardinality(ctx: &mut Ctx) -> Verdict {
    let g = generalization_model(ctx)?;
    let mut params = g.params.clone();
    let test = g.test.clone();
    let fit = train_cardinality_head(&mut params, &test, &CardinalityConfig::default()).map_err(|e| e.to_string())?;
    let (mean, _) = size_mean_median(&test, &fit.train).ok_or("empty train half")?;
    let model = cardinality_mae(&params, &test, &fit.test).map_err(|e| e.to_string())?;
    let constant = constant_mae(&test, &fit.test, mean).map_err(|e| e.to_string())?;
    ctx.save("cardinality.ckpt", &params);
    ctx.write("cardinality.csv", &model.to_csv());
    check(
        model.avg < constant.avg,
        format!(
            "test-half MAE {:.1}% vs constant-mean ({mean:.2}) MAE {:.1}% over {} queries",
            model.avg,
            constant.avg,
            fit.test.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Determinism

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_skolemqe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn pipeline(dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let _ = fs::remove_dir_all(dir);
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = |name: &str| dir.join(name).to_str().unwrap().to_owned();
    cli(&["gen-kg", "--entities", "80", "--relations", "4", "--seed", "3", "--out", &p("kg")])?;
    cli(&[
        "gen-queries",
        "--kg",
        &p("kg"),
        "--mode",
        "entailment",
        "--per-structure",
        "20",
        "--seed",
        "4",
        "--out",
        &p("q.jsonl"),
    ])?;
    cli(&[
        "train",
        "--kg",
        &p("kg"),
        "--queries",
        &p("q.jsonl"),
        "--set",
        "task=entailment",
        "--set",
        "negatives=16",
        "--set",
        "batch_size=64",
        "--steps",
        "60",
        "--seed",
        "5",
        "--out",
        &p("m.ckpt"),
    ])?;
    cli(&["eval", "--ckpt", &p("m.ckpt"), "--queries", &p("q.jsonl"), "--out", &p("metrics.csv")])?;
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| e.to_string());
    Ok((read("m.ckpt")?, read("metrics.csv")?))
}

fn determinism(ctx: &mut Ctx) -> Verdict {
    let a = pipeline(&ctx.out.join("run_a"))?;
    let b = pipeline(&ctx.out.join("run_b"))?;
    check(
        a == b,
        format!(
            "checkpoint {} bytes {}, metrics CSV {} bytes {}",
            a.0.len(),
            if a.0 == b.0 { "identical" } else { "differ" },
            a.1.len(),
            if a.1 == b.1 { "identical" } else { "differ" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 11. Metric reference checks

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn metric_references(_: &mut Ctx) -> Verdict {
    let ranks = [1usize, 2, 4];
    let m = mrr_hits(&ranks).map_err(|e| e.to_string())?;
    let n = ranks.len() as f64;
    let naive = (
        ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        ranks.iter().filter(|&&r| r <= 1).count() as f64 / n,
        ranks.iter().filter(|&&r| r <= 3).count() as f64 / n,
        ranks.iter().filter(|&&r| r <= 10).count() as f64 / n,
    );
    let got = (m.mrr, m.hits1, m.hits3, m.hits10);
    let x: Vec<f64> = (0..25).map(|i| (i as f64 * 0.3).sin() + i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| v.exp() - 3.0).collect();
    let s = spearman(&x, &y);
    let reference = naive_spearman(&x, &y);
    check(
        got == naive && got == ((1.0 + 0.5 + 0.25) / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0) && s == Some(1.0) && reference == 1.0,
        format!(
            "mrr_hits([1,2,4]) = ({:.4}, {:.4}, {:.4}, {:.4}); spearman of monotone pairing {s:?}, reference {reference}",
            got.0, got.1, got.2, got.3
        ),
    )
}

// ---------------------------------------------------------------------------

type Criterion = fn(&mut Ctx) -> Verdict;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 11] = [
        ("logic kernel laws", logic_laws),
        ("weighted reduction", weighted_reduction),
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("DNF soundness", dnf_soundness),
        ("desk-scale entailment", desk_entailment),
        ("desk-scale generalization", desk_generalization),
        ("uncertainty correlation", uncertainty),
        ("cardinality head", cardinality),
        ("determinism", determinism),
        ("metric reference checks", metric_references),
    ];
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::create_dir_all(&out);
    let mut ctx = Ctx { out, graph: desk_graph(), generalization: None };
    println!("acceptance artifacts in {}", ctx.out.display());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(|| run(&mut ctx)))
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} criterion {:>2} {name} [{secs:.1} s]: {detail}", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
