//! Class-balanced mini-batches, in-batch hard negative mining and pair
//! enumeration.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Indices into the current batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    /// Dataset indices of the batch members, in batch order.
    pub sample_indices: Vec<usize>,
    pub triplets: Vec<Triplet>,
    pub pairs: Vec<(usize, usize)>,
}

/// Sample indices grouped by class, for drawing balanced batches.
#[derive(Clone, Debug)]
pub struct ClassPool {
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl ClassPool {
    /// Groups `indices` by `labels[index]`.
    pub fn new(labels: &[u32], indices: &[usize]) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(labels[i]).or_default().push(i);
        }
        ClassPool { by_class }
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn len(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `classes_per_batch` distinct classes and an equal share of samples
/// from each (the first `batch_size % classes_per_batch` classes take one
/// extra). Samples within a class are drawn without replacement.
pub fn make_batch<R: Rng + ?Sized>(
    pool: &ClassPool,
    batch_size: usize,
    classes_per_batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if classes_per_batch < 2 {
        return Err(Error::Sampling(format!(
            "need at least 2 classes per batch for negatives, got {classes_per_batch}"
        )));
    }
    let base = batch_size / classes_per_batch;
    if base < 2 {
        return Err(Error::Sampling(format!(
            "batch of {batch_size} cannot give {classes_per_batch} classes 2 samples each"
        )));
    }
    let extra = batch_size % classes_per_batch;
    let quota = |k: usize| base + usize::from(k < extra);

    let mut rich: Vec<u32> = Vec::new();
    let mut eligible: Vec<u32> = Vec::new();
    for (&class, members) in &pool.by_class {
        if members.len() > base {
            rich.push(class);
        }
        if members.len() >= base {
            eligible.push(class);
        }
    }
    if eligible.len() < classes_per_batch || rich.len() < extra {
        return Err(Error::Sampling(format!(
            "{} classes available with >= {base} samples ({} with > {base}); need {classes_per_batch} ({extra} with one extra)",
            eligible.len(),
            rich.len()
        )));
    }

    // Classes that must take an extra sample come from `rich` first.
    rich.shuffle(rng);
    let mut chosen: Vec<u32> = rich[..extra].to_vec();
    let mut rest: Vec<u32> = eligible.into_iter().filter(|c| !chosen.contains(c)).collect();
    rest.shuffle(rng);
    chosen.extend_from_slice(&rest[..classes_per_batch - extra]);

    let mut batch = Vec::with_capacity(batch_size);
    for (k, class) in chosen.iter().enumerate() {
        let members = &pool.by_class[class];
        batch.extend(members.choose_multiple(rng, quota(k)).copied());
    }
    Ok(batch)
}

/// Uniform draw without replacement; returns the whole pool (shuffled) when
/// it is smaller than `batch_size`.
pub fn sample_indices<R: Rng + ?Sized>(pool: &[usize], batch_size: usize, rng: &mut R) -> Vec<usize> {
    pool.choose_multiple(rng, batch_size.min(pool.len())).copied().collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// One triplet per ordered same-class (anchor, positive) pair; the negative
/// is the differently labelled batch member nearest to the anchor, ties
/// broken by lower index.
pub fn mine_hard_negatives(embeddings: &Tensor, labels: &[u32]) -> Result<Vec<Triplet>> {
    let n = labels.len();
    if embeddings.rank() != 2 || embeddings.shape()[0] != n {
        return Err(Error::shape("mine_hard_negatives", embeddings.shape(), &[n]));
    }
    let mut triplets = Vec::new();
    for anchor in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != anchor && labels[p] == labels[anchor])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let a = embeddings.row(anchor);
        let mut best: Option<(f64, usize)> = None;
        for cand in (0..n).filter(|&c| labels[c] != labels[anchor]) {
            let d = squared_distance(a, embeddings.row(cand));
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, cand));
            }
        }
        let Some((_, negative)) = best else {
            return Err(Error::Sampling(format!(
                "anchor {anchor} has no differently labelled sample in the batch"
            )));
        };
        triplets.extend(positives.into_iter().map(|positive| Triplet {
            anchor,
            positive,
            negative,
        }));
    }
    Ok(triplets)
}

/// All unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn enumerate_pairs(batch_size: usize) -> Result<Vec<(usize, usize)>> {
    if batch_size < 2 {
        return Err(Error::Sampling(format!("pairs need a batch of at least 2, got {batch_size}")));
    }
    Ok((0..batch_size)
        .flat_map(|i| (i + 1..batch_size).map(move |j| (i, j)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(classes: u32, per_class: usize) -> Vec<u32> {
        (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect()
    }

    #[test]
    fn batch_32_is_8_classes_of_4() {
        let labels = labels(10, 40);
        let all: Vec<usize> = (0..labels.len()).collect();
        let pool = ClassPool::new(&labels, &all);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = make_batch(&pool, 32, 8, &mut rng).unwrap();
        assert_eq!(batch.len(), 32);
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &i in &batch {
            *counts.entry(labels[i]).or_default() += 1;
        }
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 4));
        let mut dedup = batch.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);
    }

    #[test]
    fn uneven_batch_composition() {
        let labels = labels(6, 10);
        let all: Vec<usize> = (0..labels.len()).collect();
        let pool = ClassPool::new(&labels, &all);
        let batch = make_batch(&pool, 14, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(batch.len(), 14);
    }

    #[test]
    fn single_class_rejected() {
        let labels = labels(1, 50);
        let all: Vec<usize> = (0..50).collect();
        let pool = ClassPool::new(&labels, &all);
        assert!(make_batch(&pool, 32, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(make_batch(&pool, 32, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn too_few_classes_rejected_with_counts() {
        let labels = labels(5, 10);
        let all: Vec<usize> = (0..50).collect();
        let pool = ClassPool::new(&labels, &all);
        let err = make_batch(&pool, 32, 8, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err()
            .to_string();
        assert!(err.contains('5') && err.contains('8'), "{err}");
    }

    #[test]
    fn same_seed_same_batch() {
        let labels = labels(10, 20);
        let all: Vec<usize> = (0..labels.len()).collect();
        let pool = ClassPool::new(&labels, &all);
        let a = make_batch(&pool, 32, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_batch(&pool, 32, 8, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nearest_negative_chosen() {
        // anchor 0 at origin, positive 1, negatives at distance 1.2 and 0.5
        let emb = Tensor::from_rows(&[vec![0.0], vec![2.0], vec![1.2], vec![-0.5]]).unwrap();
        let t = mine_hard_negatives(&emb, &[0, 0, 1, 1]).unwrap();
        assert_eq!(t[0], Triplet { anchor: 0, positive: 1, negative: 3 });
    }

    #[test]
    fn tie_goes_to_lower_index() {
        let emb = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![1.0], vec![-1.0]]).unwrap();
        let t = mine_hard_negatives(&emb, &[0, 0, 1, 1]).unwrap();
        assert_eq!(t[0].negative, 2);
    }

    #[test]
    fn every_ordered_positive_pair_gets_a_triplet() {
        let labels = labels(8, 4);
        let emb = Tensor::new(vec![32, 1], (0..32).map(f64::from).collect()).unwrap();
        let t = mine_hard_negatives(&emb, &labels).unwrap();
        assert_eq!(t.len(), 8 * 4 * 3);
    }

    #[test]
    fn pairs_enumeration() {
        assert_eq!(enumerate_pairs(3).unwrap(), vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(enumerate_pairs(2).unwrap(), vec![(0, 1)]);
        assert_eq!(enumerate_pairs(32).unwrap().len(), 496);
        assert!(enumerate_pairs(1).is_err());
    }
}
