mod common;

use common::*;
use metric_distill::gradcheck::{grad_check_many, GradCheckReport};
use metric_distill::loss::{kd_rel_loss, DistanceKind};
use metric_distill::model::{init_params, EmbeddingNet, NetConfig, ParamNodes};
use metric_distill::sampling::enumerate_pairs;
use metric_distill::{NodeId, Result, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;
const TRIALS: usize = 50;

/// Contracts any output with fixed, position-dependent weights so every
/// output coordinate reaches the root with a distinct coefficient.
fn weighted_sum(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect())?;
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Uniform in `[lo, hi]` with a random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    away_from_zero(rng, shape, lo, hi).map(f64::abs)
}

type Op = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;
type Points = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

fn cases() -> Vec<(&'static str, Op, Points)> {
    vec![
        ("add (broadcast)", |t, x| t.add(x[0], x[1]), |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[4], 2.0)]),
        ("subtract (broadcast)", |t, x| t.sub(x[0], x[1]), |r| vec![random_tensor(r, &[2, 3, 4], 2.0), random_tensor(r, &[3, 4], 2.0)]),
        ("multiply", |t, x| t.mul(x[0], x[1]), |r| vec![random_tensor(r, &[3, 4], 2.0), random_tensor(r, &[3, 4], 2.0)]),
        ("divide", |t, x| t.div(x[0], x[1]), |r| vec![random_tensor(r, &[3, 4], 2.0), away_from_zero(r, &[3, 1], 0.5, 2.0)]),
        ("matmul", |t, x| t.matmul(x[0], x[1]), |r| vec![random_tensor(r, &[3, 5], 2.0), random_tensor(r, &[5, 2], 2.0)]),
        ("relu", |t, x| t.relu(x[0]), |r| vec![away_from_zero(r, &[4, 3], 0.1, 2.0)]),
        ("square", |t, x| t.square(x[0]), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("sqrt", |t, x| t.sqrt(x[0]), |r| vec![positive(r, &[4, 3], 0.5, 3.0)]),
        ("abs", |t, x| t.abs(x[0]), |r| vec![away_from_zero(r, &[4, 3], 0.1, 2.0)]),
        ("sum", |t, x| t.sum(x[0]), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("mean", |t, x| t.mean(x[0]), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("sum_axis 0", |t, x| t.sum_axis(x[0], 0), |r| vec![random_tensor(r, &[4, 3, 2], 2.0)]),
        ("sum_axis 2", |t, x| t.sum_axis(x[0], 2), |r| vec![random_tensor(r, &[4, 3, 2], 2.0)]),
        ("mean_axis 1", |t, x| t.mean_axis(x[0], 1), |r| vec![random_tensor(r, &[4, 3, 2], 2.0)]),
        ("norm_axis 1", |t, x| t.norm_axis(x[0], 1), |r| vec![away_from_zero(r, &[5, 3], 0.2, 2.0)]),
        ("scale", |t, x| t.scale(x[0], -2.5), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("add_scalar", |t, x| t.add_scalar(x[0], 0.75), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("broadcast_scalar", |t, x| t.broadcast_scalar(x[0], &[3, 2]), |r| vec![random_tensor(r, &[1], 2.0)]),
        ("reshape", |t, x| t.reshape(x[0], &[2, 6]), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("select_rows (repeats)", |t, x| t.select_rows(x[0], &[3, 0, 3, 1]), |r| vec![random_tensor(r, &[4, 3], 2.0)]),
        ("conv2d stride 1", |t, x| t.conv2d(x[0], x[1], x[2], 1), |r| {
            vec![random_tensor(r, &[2, 2, 4, 5], 1.0), random_tensor(r, &[3, 2, 3, 3], 1.0), random_tensor(r, &[3], 1.0)]
        }),
        ("conv2d stride 2", |t, x| t.conv2d(x[0], x[1], x[2], 2), |r| {
            vec![random_tensor(r, &[2, 2, 5, 4], 1.0), random_tensor(r, &[3, 2, 3, 3], 1.0), random_tensor(r, &[3], 1.0)]
        }),
        ("global_avg_pool", |t, x| t.global_avg_pool(x[0]), |r| vec![random_tensor(r, &[2, 3, 4, 4], 2.0)]),
    ]
}

fn check_all(name: &str, op: Op, points: Points, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..TRIALS {
        let report = grad_check_many(
            |tape, ids| {
                let out = op(tape, ids)?;
                weighted_sum(tape, out)
            },
            &points(&mut rng),
            EPS,
        )
        .unwrap();
        assert!(report.passed(TOL), "{name}: {report:?}");
        if worst.as_ref().is_none_or(|w| report.max_rel_error > w.max_rel_error) {
            worst = Some(report);
        }
    }
    worst.unwrap()
}

#[test]
fn every_primitive_passes_finite_differences() {
    for (seed, (name, op, points)) in cases().into_iter().enumerate() {
        check_all(name, op, points, seed as u64);
    }
}

/// Scalar objective of a network: weighted embeddings plus a relative loss
/// against a fixed random configuration, which exercises the distance
/// primitives on top of the network.
fn net_objective<'a>(net: &'a EmbeddingNet, teacher: &Tensor) -> impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a {
    let teacher = teacher.clone();
    move |tape, ids| {
        let names: Vec<String> = net.params().keys().cloned().collect();
        let params: ParamNodes = names.into_iter().zip(ids.iter().copied()).collect();
        let out = net.forward(tape, &params, *ids.last().unwrap())?;
        let mut root = weighted_sum(tape, out.embeddings)?;
        for (_, tap) in &out.taps {
            let t = weighted_sum(tape, *tap)?;
            root = tape.add(root, t)?;
        }
        let b = tape.shape(out.embeddings)[0];
        let t = tape.constant(teacher.clone());
        let rel = kd_rel_loss(tape, out.embeddings, t, &enumerate_pairs(b).unwrap(), DistanceKind::Euclidean)?;
        tape.add(root, rel)
    }
}

#[test]
fn every_network_configuration_passes_finite_differences() {
    for (k, (name, config)) in network_configs().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        for trial in 0..10 {
            let net = init_params(&config, rng.random()).unwrap();
            let mut batch_shape = vec![4];
            batch_shape.extend(config.input.sample_shape());
            // Zero init biases put dead-unit rows exactly on a relu kink.
            let mut points: Vec<Tensor> = net
                .params()
                .values()
                .map(|p| p.zip_map(&random_tensor(&mut rng, p.shape(), 0.3), |a, b| a + b))
                .collect();
            points.push(random_tensor(&mut rng, &batch_shape, 2.0));
            let teacher = random_tensor(&mut rng, &[4, 6], 2.0);
            let report = grad_check_many(net_objective(&net, &teacher), &points, EPS).unwrap();
            assert!(report.passed(TOL), "{name} trial {trial}: {report:?}");
        }
    }
}

#[test]
fn taps_equal_independent_recomputation() {
    let config = NetConfig::mlp(3, &[4], 2).with_taps(&["affine0", "relu1"]);
    let net = init_params(&config, 9).unwrap();
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[5, 3], 2.0);
    let (emb, taps) = net.embed(&x).unwrap();
    let w0 = &net.params()["affine0.weight"];
    let b0 = &net.params()["affine0.bias"];
    let w2 = &net.params()["affine2.weight"];
    let b2 = &net.params()["affine2.bias"];
    for i in 0..5 {
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            *h = b0.data()[j] + (0..3).map(|k| x.row(i)[k] * w0.data()[k * 4 + j]).sum::<f64>();
        }
        assert!(taps[0].activation.row(i).iter().zip(&hidden).all(|(a, b)| (a - b).abs() < 1e-12));
        let relu: Vec<f64> = hidden.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(taps[1].activation.row(i), relu.as_slice());
        for j in 0..2 {
            let e = b2.data()[j] + (0..4).map(|k| relu[k] * w2.data()[k * 2 + j]).sum::<f64>();
            assert!((emb.row(i)[j] - e).abs() < 1e-12);
        }
    }
    assert_eq!(taps[0].name, "affine0");
}

fn grads_of(f: impl Fn(&mut Tape, NodeId) -> Result<NodeId>, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let id = tape.param(x.clone());
    let root = f(&mut tape, id).unwrap();
    tape.backward(root).unwrap().wrt(id)
}

proptest! {
    #[test]
    fn backward_is_linear_in_the_root(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        a in -4.0f64..4.0,
        b in -4.0f64..4.0
    ) {
        let x = Tensor::new(vec![4, 3], data).unwrap();
        let f = |tape: &mut Tape, x: NodeId| {
            let s = tape.square(x)?;
            tape.sum(s)
        };
        let g = |tape: &mut Tape, x: NodeId| {
            let w = tape_const(tape);
            let m = tape.matmul(x, w)?;
            weighted_sum(tape, m)
        };
        let combined = grads_of(
            |tape, x| {
                let fx = f(tape, x)?;
                let gx = g(tape, x)?;
                let fa = tape.scale(fx, a)?;
                let gb = tape.scale(gx, b)?;
                tape.add(fa, gb)
            },
            &x,
        );
        let separate = grads_of(f, &x).zip_map(&grads_of(g, &x), |u, v| a * u + b * v);
        for (c, s) in combined.data().iter().zip(separate.data()) {
            prop_assert!((c - s).abs() <= 1e-9 * (1.0 + s.abs()));
        }
    }
}

fn tape_const(tape: &mut Tape) -> NodeId {
    tape.constant(Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap())
}
