//! Tape gradients against central finite differences, for every primitive
//! and for the model's composite expressions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skolemqe::autodiff::{gradient_check, AutodiffError, GradCheck, Tape, Tensor, Var};
use skolemqe::logic::TNormKind;
use skolemqe::model::{
    param_gradient_check, ModelConfig, ModelError, ModelParams, Param, ParamGrads, Session, UnionMode,
};
use skolemqe::train::{group_loss, Example};
use skolemqe::{QueryInstance, QueryStructure};

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;
const POINTS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum of `y` with fixed random weights, so every output entry
/// contributes a distinct amount.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let c = random(&mut rng, tape.shape(y), -1.0, 1.0);
    let c = tape.constant(c);
    let z = tape.mul(y, c)?;
    Ok(tape.sum(z))
}

fn check_primitive<F>(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    for point in 0..POINTS {
        let mut rng = ChaCha8Rng::seed_from_u64(point);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
        let report = gradient_check(&inputs, STEP, ABS_TOL, |t, v| {
            let y = f(t, v)?;
            project(t, y, point)
        })
        .unwrap();
        assert!(report.passes(REL_TOL), "{name} at point {point}: {report:?}");
    }
}

#[test]
fn unary_primitives() {
    check_primitive("relu", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.relu(v[0])));
    check_primitive("sigmoid", &[&[3, 4]], -3.0, 3.0, |t, v| Ok(t.sigmoid(v[0])));
    check_primitive("log", &[&[3, 4]], 0.1, 2.0, |t, v| Ok(t.log(v[0])));
    check_primitive("exp", &[&[3, 4]], -2.0, 2.0, |t, v| Ok(t.exp(v[0])));
    check_primitive("abs", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.abs(v[0])));
    check_primitive("log_sigmoid", &[&[3, 4]], -5.0, 5.0, |t, v| Ok(t.log_sigmoid(v[0])));
    check_primitive("affine", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.affine(v[0], -0.7, 0.2)));
    check_primitive("one_minus", &[&[3, 4]], 0.0, 1.0, |t, v| Ok(t.one_minus(v[0])));
    check_primitive("max_zero", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.max_zero(v[0])));
}

#[test]
fn binary_primitives_with_broadcasting() {
    check_primitive("add", &[&[3, 4], &[1, 4]], -1.0, 1.0, |t, v| t.add(v[0], v[1]));
    check_primitive("sub", &[&[3, 4], &[3, 1]], -1.0, 1.0, |t, v| t.sub(v[0], v[1]));
    check_primitive("mul", &[&[2, 3, 4], &[1, 3, 4]], -1.0, 1.0, |t, v| t.mul(v[0], v[1]));
    check_primitive("div", &[&[3, 4], &[3, 4]], 0.5, 2.0, |t, v| t.div(v[0], v[1]));
    check_primitive("pow", &[&[3, 4], &[3, 4]], 0.2, 1.0, |t, v| t.pow(v[0], v[1]));
    check_primitive("matmul", &[&[3, 5], &[5, 2]], -1.0, 1.0, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn reductions() {
    check_primitive("sum_axis0", &[&[3, 4, 2]], -1.0, 1.0, |t, v| t.sum_axis(v[0], 0));
    check_primitive("sum_axis2", &[&[3, 4, 2]], -1.0, 1.0, |t, v| t.sum_axis(v[0], 2));
    check_primitive("max_axis", &[&[3, 4, 2]], -1.0, 1.0, |t, v| t.max_axis(v[0], 0));
    check_primitive("min_axis", &[&[3, 4, 2]], -1.0, 1.0, |t, v| t.min_axis(v[0], 1));
    check_primitive("softmax_axis", &[&[3, 4, 2]], -2.0, 2.0, |t, v| t.softmax_axis(v[0], 0));
    check_primitive("smoothmin", &[&[3, 4, 2], &[3, 4, 2]], 0.05, 1.0, |t, v| {
        t.smoothmin_weighted(v[0], v[1], 0, -10.0)
    });
    check_primitive("sum", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.sum(v[0])));
    check_primitive("mean", &[&[3, 4]], -1.0, 1.0, |t, v| Ok(t.mean(v[0])));
}

#[test]
fn shape_primitives() {
    check_primitive("concat_last", &[&[3, 2], &[3, 4]], -1.0, 1.0, |t, v| t.concat_last(&[v[0], v[1]]));
    check_primitive("slice_last", &[&[3, 6]], -1.0, 1.0, |t, v| t.slice_last(v[0], 2, 3));
    check_primitive("reshape", &[&[3, 4]], -1.0, 1.0, |t, v| t.reshape(v[0], &[2, 6]));
    check_primitive("stack", &[&[3, 4], &[3, 4]], -1.0, 1.0, |t, v| t.stack(&[v[0], v[1]]));
    check_primitive("select", &[&[3, 4, 2]], -1.0, 1.0, |t, v| t.select(v[0], 1));
    check_primitive("gather_rows", &[&[3, 4]], -1.0, 1.0, |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]));
}

fn small_config(tnorm: TNormKind) -> ModelConfig {
    ModelConfig { dim: 4, hidden: 8, tnorm, ..ModelConfig::desk() }
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

/// Freshly initialised biases are zero, which can park a dead hidden row
/// exactly on a relu kink; move them off it before differencing.
fn jittered(config: ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(config, 3, 2, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    for p in Param::ALL.into_iter().filter(|p| p.is_bias()) {
        for v in params.get_mut(p).data_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
    }
    params
}

type Out = Result<(f64, ParamGrads), ModelError>;

fn finish(s: &Session, out: Var) -> Out {
    Ok((s.tape.value(out).item(), s.gradients(out)?))
}

fn check_model(name: &str, tnorm: TNormKind, f: impl Fn(&ModelParams, &mut ChaCha8Rng) -> Out) {
    for point in 0..POINTS {
        let params = jittered(small_config(tnorm), point);
        let report: GradCheck = param_gradient_check(&params, STEP, ABS_TOL, |p| {
            let mut rng = ChaCha8Rng::seed_from_u64(point + 1000);
            f(p, &mut rng)
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.passes(REL_TOL), "{name} at point {point}: {report:?}");
    }
}

fn projected(s: &mut Session, y: Var, seed: u64) -> Result<Var, ModelError> {
    Ok(project(&mut s.tape, y, seed)?)
}

#[test]
fn skolem_function() {
    check_model("skolem", TNormKind::Min, |p, rng| {
        let mut s = Session::new(p, [], [0, 1], true)?;
        let x = s.tape.constant(bounds_batch(rng, 2, 4));
        let r = s.relations(&[1, 0])?;
        let y = s.skolem(r, x)?;
        let out = projected(&mut s, y, 1)?;
        finish(&s, out)
    });
}

#[test]
fn attention_weights_over_three_inputs() {
    check_model("attention", TNormKind::Min, |p, rng| {
        let mut s = Session::new(p, [], [], true)?;
        let xs: Vec<Var> = (0..3).map(|_| s.tape.constant(bounds_batch(rng, 2, 4))).collect();
        let w = s.attention_weights(&xs)?;
        let out = projected(&mut s, w, 2)?;
        finish(&s, out)
    });
}

#[test]
fn weighted_conjunction_for_every_tnorm() {
    for kind in TNormKind::ALL {
        check_model(kind.name(), kind, |p, rng| {
            let mut s = Session::new(p, [], [], true)?;
            let xs: Vec<Var> = (0..3).map(|_| s.tape.constant(bounds_batch(rng, 2, 4))).collect();
            let y = s.conjoin(&xs)?;
            let out = projected(&mut s, y, 3)?;
            finish(&s, out)
        });
    }
}

#[test]
fn dissimilarity_to_entities() {
    check_model("dissimilarity", TNormKind::Min, |p, rng| {
        let mut s = Session::new(p, [0, 1, 2], [], true)?;
        let q = s.tape.constant(bounds_batch(rng, 3, 4));
        let e = s.entities(&[2, 0, 1])?;
        let d = s.distance(q, e)?;
        let out = projected(&mut s, d, 4)?;
        finish(&s, out)
    });
}

#[test]
fn margin_loss_on_a_toy_model() {
    let queries = [
        QueryInstance::new(QueryStructure::P1, vec![0], vec![1]).unwrap(),
        QueryInstance::new(QueryStructure::P1, vec![2], vec![0]).unwrap(),
    ];
    for union in [UnionMode::Dnf, UnionMode::Dm] {
        check_model("loss", TNormKind::Prod, |p, _| {
            let examples = [
                Example { query: &queries[0], positive: 1, negatives: vec![0, 2] },
                Example { query: &queries[1], positive: 0, negatives: vec![1, 2] },
            ];
            let r = group_loss(p, QueryStructure::P1, &examples, 0.375, union)?;
            Ok((r.loss_sum, r.grads))
        });
    }
}

#[test]
fn loss_through_every_structure() {
    let anchors = |s: QueryStructure| (0..s.num_anchors()).map(|i| i % 3).collect::<Vec<_>>();
    let relations = |s: QueryStructure| (0..s.num_relations()).map(|i| i % 2).collect::<Vec<_>>();
    for s in QueryStructure::ALL {
        let q = QueryInstance::new(s, anchors(s), relations(s)).unwrap();
        for point in 0..3 {
            let params = jittered(small_config(TNormKind::Min), point);
            let report = param_gradient_check(&params, STEP, ABS_TOL, |p| {
                let examples = [Example { query: &q, positive: 1, negatives: vec![0, 2] }];
                let r = group_loss(p, s, &examples, 0.375, UnionMode::Dnf)?;
                Ok((r.loss_sum, r.grads))
            })
            .unwrap();
            assert!(report.passes(REL_TOL), "{s} at point {point}: {report:?}");
        }
    }
}
