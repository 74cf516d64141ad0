//! Retrieval evaluation and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::EmbeddingNet;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MDEB";
pub const EMBEDDING_VERSION: u32 = 1;

/// Recall@K grid used for reports.
pub const DEFAULT_K: [usize; 5] = [1, 2, 4, 8, 16];

/// Euclidean distance matrix of the rows of an `N x D` tensor.
pub fn pairwise_distances(embeddings: &Tensor) -> Result<Tensor> {
    if embeddings.rank() != 2 || embeddings.shape()[0] < 2 {
        return Err(Error::Eval(format!(
            "pairwise distances need an N x D matrix with N >= 2, got {:?}",
            embeddings.shape()
        )));
    }
    let n = embeddings.shape()[0];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let d = embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            out.data_mut()[i * n + j] = d;
            out.data_mut()[j * n + i] = d;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub k_values: Vec<usize>,
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries: usize,
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// One `k=<K> recall=<value> num_queries=<N>` line per K.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for k in &self.k_values {
            let _ = writeln!(s, "k={k} recall={:?} num_queries={}", self.recall_at[k], self.num_queries);
        }
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut report = RetrievalReport {
            k_values: Vec::new(),
            recall_at: BTreeMap::new(),
            num_queries: 0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fields: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect();
            let parse_err = || Error::Eval(format!("malformed report line `{line}`"));
            let k: usize = fields.get("k").ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
            let r: f64 = fields.get("recall").ok_or_else(parse_err)?.parse().map_err(|_| parse_err())?;
            report.num_queries = fields
                .get("num_queries")
                .ok_or_else(parse_err)?
                .parse()
                .map_err(|_| parse_err())?;
            report.k_values.push(k);
            report.recall_at.insert(k, r);
        }
        Ok(report)
    }
}

/// Fraction of queries whose K nearest neighbours (self excluded, distance
/// ties broken by lower index) include a sample with the same label. Every
/// sample is a query and the rest of the set is the gallery. K values above
/// `N - 1` are evaluated over the whole gallery.
pub fn recall_at_k(embeddings: &Tensor, labels: &[u32], k_values: &[usize]) -> Result<RetrievalReport> {
    let n = labels.len();
    if embeddings.rank() != 2 || embeddings.shape()[0] != n {
        return Err(Error::Eval(format!(
            "{n} labels for embeddings of shape {:?}",
            embeddings.shape()
        )));
    }
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::Eval("K values must be a non-empty list of positive integers".into()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((class, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Eval(format!("class {class} has a single sample; no same-class neighbour exists")));
    }
    let dist = pairwise_distances(embeddings)?;
    let max_k = k_values.iter().copied().max().unwrap_or(1).min(n - 1);

    // Rank of the first same-label neighbour for each query.
    let mut first_hit = Vec::with_capacity(n);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for q in 0..n {
        let row = dist.row(q);
        order.clear();
        order.extend((0..n).filter(|&j| j != q));
        let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if max_k < order.len() {
            order.select_nth_unstable_by(max_k - 1, cmp);
            order.truncate(max_k);
        }
        order.sort_unstable_by(cmp);
        first_hit.push(order.iter().position(|&j| labels[j] == labels[q]));
    }

    let recall_at = k_values
        .iter()
        .map(|&k| {
            let hits = first_hit.iter().filter(|h| h.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    Ok(RetrievalReport {
        k_values: k_values.to_vec(),
        recall_at,
        num_queries: n,
    })
}

/// Writes embeddings in the `MDEB` format: magic, u32 version, u64 N, u64 D,
/// then N rows of (u32 label, D f64), all little-endian.
pub fn write_embeddings(embeddings: &Tensor, labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if labels.is_empty() {
        return Err(Error::Eval("refusing to export an empty embedding set".into()));
    }
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::Eval(format!(
            "{} labels for embeddings of shape {:?}",
            labels.len(),
            embeddings.shape()
        )));
    }
    let (n, d) = (embeddings.shape()[0], embeddings.shape()[1]);
    let mut out = Vec::with_capacity(24 + n * (4 + 8 * d));
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for (i, &label) in labels.iter().enumerate() {
        out.extend_from_slice(&label.to_le_bytes());
        for v in embeddings.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Tensor, Vec<u32>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Eval(format!("{}: {msg}", path.display()));
    if bytes.len() < 24 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = n * (4 + 8 * d);
    if bytes.len() - 24 != expected {
        return Err(bad(format!(
            "header declares {n} x {d} ({expected} payload bytes) but file has {}",
            bytes.len() - 24
        )));
    }
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for row in bytes[24..].chunks_exact(4 + 8 * d) {
        labels.push(u32::from_le_bytes(row[..4].try_into().unwrap()));
        data.extend(row[4..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}

/// Embeds the listed samples with `net` and writes them with their labels.
pub fn export_embeddings(net: &EmbeddingNet, dataset: &Dataset, indices: &[usize], path: impl AsRef<Path>) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::Eval("refusing to export an empty split".into()));
    }
    let emb = net.embed_all(&dataset.gather(indices)?)?;
    write_embeddings(&emb, &dataset.labels_of(indices), path)
}

/// Recall@K of `net` on the listed samples.
pub fn evaluate(net: &EmbeddingNet, dataset: &Dataset, indices: &[usize], k_values: &[usize]) -> Result<RetrievalReport> {
    let emb = net.embed_all(&dataset.gather(indices)?)?;
    recall_at_k(&emb, &dataset.labels_of(indices), k_values)
}
