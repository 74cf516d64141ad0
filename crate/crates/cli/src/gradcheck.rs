//! Finite-difference checks over every primitive, loss and layer type.

use metric_distill::gradcheck::grad_check_many;
use metric_distill::loss::{attention_transfer_loss, hint_loss, kd_abs_loss, kd_rel_loss, triplet_loss, DistanceKind, TapLink};
use metric_distill::model::{init_params, InputKind, LayerSpec, NetConfig, ParamNodes};
use metric_distill::sampling::{enumerate_pairs, Triplet};
use metric_distill::{NodeId, Result, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;
const TRIALS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub kind: &'static str,
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOL
    }

    pub fn to_line(&self) -> String {
        format!(
            "kind={} case={} max_rel_error={:e} status={}",
            self.kind,
            self.name,
            self.max_rel_error,
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Magnitudes in `[lo, hi)` with random signs, away from kinks at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn contract(tape: &mut Tape, out: NodeId) -> Result<NodeId> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect())?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn primitive(op: fn(&mut Tape, &[NodeId]) -> Result<NodeId>) -> Objective {
    Box::new(move |tape, ids| {
        let out = op(tape, ids)?;
        contract(tape, out)
    })
}

type Case = (&'static str, &'static str, Objective, fn(&mut ChaCha8Rng) -> Vec<Tensor>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("primitive", "add", primitive(|t, x| t.add(x[0], x[1])), |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[4], -2.0, 2.0)]),
        ("primitive", "sub", primitive(|t, x| t.sub(x[0], x[1])), |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)]),
        ("primitive", "mul", primitive(|t, x| t.mul(x[0], x[1])), |r| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)]),
        ("primitive", "div", primitive(|t, x| t.div(x[0], x[1])), |r| vec![uniform(r, &[3, 4], -2.0, 2.0), signed(r, &[3, 1], 0.5, 2.0)]),
        ("primitive", "matmul", primitive(|t, x| t.matmul(x[0], x[1])), |r| vec![uniform(r, &[3, 5], -2.0, 2.0), uniform(r, &[5, 2], -2.0, 2.0)]),
        ("primitive", "relu", primitive(|t, x| t.relu(x[0])), |r| vec![signed(r, &[4, 3], 0.1, 2.0)]),
        ("primitive", "square", primitive(|t, x| t.square(x[0])), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "sqrt", primitive(|t, x| t.sqrt(x[0])), |r| vec![uniform(r, &[4, 3], 0.5, 3.0)]),
        ("primitive", "abs", primitive(|t, x| t.abs(x[0])), |r| vec![signed(r, &[4, 3], 0.1, 2.0)]),
        ("primitive", "mean", primitive(|t, x| t.mean(x[0])), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "sum_axis", primitive(|t, x| t.sum_axis(x[0], 1)), |r| vec![uniform(r, &[4, 3, 2], -2.0, 2.0)]),
        ("primitive", "mean_axis", primitive(|t, x| t.mean_axis(x[0], 2)), |r| vec![uniform(r, &[4, 3, 2], -2.0, 2.0)]),
        ("primitive", "norm_axis", primitive(|t, x| t.norm_axis(x[0], 1)), |r| vec![signed(r, &[5, 3], 0.2, 2.0)]),
        ("primitive", "scale", primitive(|t, x| t.scale(x[0], -2.5)), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "add_scalar", primitive(|t, x| t.add_scalar(x[0], 0.75)), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "reshape", primitive(|t, x| t.reshape(x[0], &[2, 6])), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "select_rows", primitive(|t, x| t.select_rows(x[0], &[3, 0, 3, 1])), |r| vec![uniform(r, &[4, 3], -2.0, 2.0)]),
        ("primitive", "conv2d", primitive(|t, x| t.conv2d(x[0], x[1], x[2], 2)), |r| {
            vec![uniform(r, &[2, 2, 5, 4], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]
        }),
        ("primitive", "global_avg_pool", primitive(|t, x| t.global_avg_pool(x[0])), |r| vec![uniform(r, &[2, 3, 4, 4], -2.0, 2.0)]),
    ]
}

fn link(ids: &[NodeId]) -> TapLink {
    TapLink {
        student_name: "student".into(),
        teacher_name: "teacher".into(),
        student: ids[0],
        teacher: ids[1],
    }
}

fn loss_cases() -> Vec<Case> {
    // Fixed index sets over 6 well-separated points keep every hinge and
    // distance away from zero.
    let triplets = [(0, 1, 2), (3, 4, 5), (1, 0, 4)].map(|(anchor, positive, negative)| Triplet { anchor, positive, negative });
    let pairs = enumerate_pairs(6).expect("six points");
    vec![
        (
            "loss",
            "triplet",
            Box::new(move |t: &mut Tape, x: &[NodeId]| triplet_loss(t, x[0], &triplets, 5.0, DistanceKind::Euclidean)),
            |r| vec![uniform(r, &[6, 3], -2.0, 2.0)],
        ),
        (
            "loss",
            "kd_abs",
            Box::new(|t: &mut Tape, x: &[NodeId]| kd_abs_loss(t, x[0], x[1], DistanceKind::Euclidean)),
            |r| vec![uniform(r, &[6, 3], -2.0, 2.0), uniform(r, &[6, 3], 3.0, 5.0)],
        ),
        (
            "loss",
            "kd_rel",
            Box::new(move |t: &mut Tape, x: &[NodeId]| {
                let scaled = t.scale(x[1], 10.0)?;
                kd_rel_loss(t, x[0], scaled, &pairs, DistanceKind::Euclidean)
            }),
            |r| vec![uniform(r, &[6, 3], -0.1, 0.1), uniform(r, &[6, 4], -2.0, 2.0)],
        ),
        (
            "loss",
            "hint",
            Box::new(|t: &mut Tape, x: &[NodeId]| hint_loss(t, &[link(x)])),
            |r| vec![uniform(r, &[2, 3, 3, 3], -2.0, 2.0), uniform(r, &[2, 3, 3, 3], 3.0, 5.0)],
        ),
        (
            "loss",
            "attention",
            Box::new(|t: &mut Tape, x: &[NodeId]| attention_transfer_loss(t, &[link(x)])),
            |r| vec![signed(r, &[2, 2, 3, 3], 0.1, 2.0), signed(r, &[2, 4, 3, 3], 0.1, 2.0)],
        ),
    ]
}

fn network_configs() -> Vec<(&'static str, NetConfig)> {
    let conv = NetConfig {
        input: InputKind::Grid { height: 5, width: 4, channels: 2 },
        layers: vec![
            LayerSpec::Conv { out_channels: 3, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Affine { out_dim: 3 },
        ],
        embedding_dim: 3,
        normalize: false,
        taps: Vec::new(),
    };
    let mut normalized = NetConfig::mlp(5, &[6], 3);
    normalized.normalize = true;
    vec![("mlp", NetConfig::mlp(5, &[6, 4], 3)), ("normalized-mlp", normalized), ("conv-gap", conv)]
}

/// Checks a network's embeddings with respect to parameters and inputs.
fn network_error(config: &NetConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = init_params(config, rng.random())?;
    let mut points: Vec<Tensor> = net
        .params()
        .values()
        .map(|p| p.zip_map(&signed(rng, p.shape(), 0.05, 0.3), |a, b| a + b))
        .collect();
    let mut batch = vec![3];
    batch.extend(config.input.sample_shape());
    points.push(uniform(rng, &batch, -2.0, 2.0));
    let names: Vec<String> = net.params().keys().cloned().collect();
    let report = grad_check_many(
        |tape, ids| {
            let params: ParamNodes = names.iter().cloned().zip(ids.iter().copied()).collect();
            let out = net.forward(tape, &params, *ids.last().expect("input node"))?;
            contract(tape, out.embeddings)
        },
        &points,
        EPS,
    )?;
    Ok(report.max_rel_error)
}

/// A gradient that misses a path: the second factor of `x * x` is recorded
/// as a constant, so the analytic gradient is half the true one.
fn broken_case() -> Case {
    (
        "fixture",
        "detached-square",
        Box::new(|t: &mut Tape, x: &[NodeId]| {
            let value = t.value(x[0]).clone();
            let copy = t.constant(value);
            let prod = t.mul(x[0], copy)?;
            t.sum(prod)
        }),
        |r| vec![uniform(r, &[4], 0.5, 2.0)],
    )
}

pub fn run(include_broken: bool) -> Result<Vec<CheckRow>> {
    let mut cases = primitive_cases();
    cases.extend(loss_cases());
    if include_broken {
        cases.push(broken_case());
    }
    let mut rows = Vec::new();
    for (k, (kind, name, f, points)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..TRIALS {
            let report = grad_check_many(&f, &points(&mut rng), EPS)?;
            worst = worst.max(report.max_rel_error);
        }
        rows.push(CheckRow {
            kind,
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    for (k, (name, config)) in network_configs().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + k as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..TRIALS {
            worst = worst.max(network_error(&config, &mut rng)?);
        }
        rows.push(CheckRow {
            kind: "network",
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(rows)
}
