//! Scalar reference implementations and random instance generators shared
//! by the integration tests. Nothing here touches the tape.

#![allow(dead_code)]

use metric_distill::model::{InputKind, LayerSpec, NetConfig};
use metric_distill::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(t: &Tensor) -> Rows {
    let n = t.shape()[0];
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

pub fn tensor_of(rows: &Rows) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Rows {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]).powi(2);
    }
    s.sqrt()
}

pub fn triplet_oracle(emb: &Rows, triplets: &[(usize, usize, usize)], margin: f64) -> f64 {
    let mut total = 0.0;
    for &(a, p, n) in triplets {
        let v = dist(&emb[a], &emb[p]) - dist(&emb[a], &emb[n]) + margin;
        if v > 0.0 {
            total += v;
        }
    }
    total / triplets.len() as f64
}

pub fn kd_abs_oracle(s: &Rows, t: &Rows) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        total += dist(&s[i], &t[i]);
    }
    total / s.len() as f64
}

pub fn kd_rel_oracle(s: &Rows, t: &Rows) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            total += (dist(&s[i], &s[j]) - dist(&t[i], &t[j])).abs();
            count += 1.0;
        }
    }
    total / count
}

/// Mean over samples of the Frobenius distance between flattened
/// activations.
pub fn hint_oracle(s: &Tensor, t: &Tensor) -> f64 {
    let b = s.shape()[0];
    let width = s.numel() / b;
    let mut total = 0.0;
    for i in 0..b {
        let mut sq = 0.0;
        for k in 0..width {
            sq += (s.data()[i * width + k] - t.data()[i * width + k]).powi(2);
        }
        total += sq.sqrt();
    }
    total / b as f64
}

/// `B x C x H x W` to `B x (H*W)` sums of squares over channels; rank 2 is
/// squared in place.
pub fn attention_map_oracle(x: &Tensor) -> Rows {
    let shape = x.shape();
    if shape.len() == 2 {
        return rows_of(x).into_iter().map(|r| r.iter().map(|v| v * v).collect()).collect();
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![vec![0.0; h * w]; b];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..h * w {
                let v = x.data()[((bi * c + ci) * h * w) + p];
                out[bi][p] += v * v;
            }
        }
    }
    out
}

pub fn attention_loss_oracle(s: &Rows, t: &Rows) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        let ns = s[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut sq = 0.0;
        for k in 0..s[i].len() {
            sq += (s[i][k] / ns - t[i][k] / nt).powi(2);
        }
        total += sq.sqrt();
    }
    total / s.len() as f64
}

/// Recall@K by full sort of every query's neighbour list.
pub fn recall_oracle(emb: &Rows, labels: &[u32], k: usize) -> f64 {
    let n = emb.len();
    let mut hits = 0;
    for q in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n).filter(|&j| j != q).map(|j| (dist(&emb[q], &emb[j]), j)).collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        if others.iter().take(k).any(|&(_, j)| labels[j] == labels[q]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Every triplet the mining rule should produce, by exhaustive search.
pub fn mining_oracle(emb: &Rows, labels: &[u32]) -> Vec<(usize, usize, usize)> {
    let n = emb.len();
    let mut out = Vec::new();
    for a in 0..n {
        let mut best: Option<(f64, usize)> = None;
        for c in 0..n {
            if labels[c] == labels[a] {
                continue;
            }
            let d: f64 = emb[a].iter().zip(&emb[c]).map(|(x, y)| (x - y) * (x - y)).sum();
            match best {
                Some((bd, bc)) if bd < d || (bd == d && bc < c) => {}
                _ => best = Some((d, c)),
            }
        }
        for p in 0..n {
            if p != a && labels[p] == labels[a] {
                out.push((a, p, best.unwrap().1));
            }
        }
    }
    out
}

/// Random orthogonal matrix by Gram-Schmidt, with a random reflection.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Rows {
    let mut q: Rows = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for k in 0..d {
                v[k] -= dot * u[k];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    if rng.random_bool(0.5) {
        for x in q[0].iter_mut() {
            *x = -*x;
        }
    }
    q
}

pub fn apply_isometry(rows: &Rows, q: &Rows, shift: &[f64]) -> Rows {
    rows.iter()
        .map(|r| {
            (0..q.len())
                .map(|i| q[i].iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + shift[i])
                .collect()
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Small instances of every layer combination the model supports.
pub fn network_configs() -> Vec<(&'static str, NetConfig)> {
    let grid = InputKind::Grid { height: 6, width: 5, channels: 2 };
    let conv_net = |layers: Vec<LayerSpec>, taps: &[&str]| {
        NetConfig {
            input: grid.clone(),
            layers,
            embedding_dim: 3,
            normalize: false,
            taps: Vec::new(),
        }
        .with_taps(taps)
    };
    let mut normalized = NetConfig::mlp(5, &[7], 4);
    normalized.normalize = true;
    vec![
        ("mlp 5-7-6-3", NetConfig::mlp(5, &[7, 6], 3).with_taps(&["relu1", "affine2"])),
        ("student 5-16-4", NetConfig::student(5, 4)),
        ("linear 5-3", NetConfig::mlp(5, &[], 3)),
        ("normalized mlp", normalized),
        (
            "conv-gap",
            conv_net(
                vec![
                    LayerSpec::Conv { out_channels: 3, stride: 1 },
                    LayerSpec::Relu,
                    LayerSpec::Conv { out_channels: 4, stride: 2 },
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Affine { out_dim: 3 },
                ],
                &["relu1"],
            ),
        ),
        (
            "conv-flatten",
            conv_net(
                vec![LayerSpec::Conv { out_channels: 2, stride: 1 }, LayerSpec::Relu, LayerSpec::Affine { out_dim: 3 }],
                &["conv0"],
            ),
        ),
    ]
}
