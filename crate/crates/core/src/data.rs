//! Datasets, class-disjoint splits and input degradations.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class-disjoint partition of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
    /// Sample indices from train classes used for fitting.
    pub train: Vec<usize>,
    /// Held-out samples of the train classes.
    pub validation: Vec<usize>,
    /// All samples of the test classes.
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    sample_shape: Vec<usize>,
    /// `N x sample_shape`.
    features: Tensor,
    labels: Vec<u32>,
    split: Option<Split>,
}

impl Dataset {
    /// Checks that every class has at least two samples.
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<u32>) -> Result<Self> {
        if features.rank() < 2 || features.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for feature tensor of shape {:?}",
                labels.len(),
                features.shape()
            )));
        }
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_default() += 1;
        }
        if let Some((class, _)) = counts.iter().find(|(_, &c)| c < 2) {
            return Err(Error::Data(format!("class {class} has fewer than 2 samples")));
        }
        Ok(Dataset {
            name: name.into(),
            sample_shape: features.shape()[1..].to_vec(),
            features,
            labels,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn split(&self) -> Option<&Split> {
        self.split.as_ref()
    }

    pub fn classes(&self) -> Vec<u32> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        Tensor::new(self.sample_shape.clone(), self.features.row(i).to_vec()).expect("row matches sample shape")
    }

    /// Stacks the listed samples into a `B x sample_shape` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        self.features.select_rows(indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<u32> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// The same dataset with every sample passed through [`degrade`]. Sample
    /// `i` uses a seed derived from `(seed, i)`; labels and split carry over.
    pub fn degraded(&self, spec: &DegradationSpec, seed: u64) -> Result<Dataset> {
        let mut data = Vec::with_capacity(self.features.numel());
        for i in 0..self.len() {
            let sample_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            data.extend(degrade(&self.sample(i), spec, sample_seed)?.into_data());
        }
        Ok(Dataset {
            name: format!("{}+{spec}", self.name),
            sample_shape: self.sample_shape.clone(),
            features: Tensor::new(self.features.shape().to_vec(), data)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub intra_std: f64,
    pub inter_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 20,
            per_class: 50,
            input_dim: 32,
            intra_std: 3.0,
            inter_scale: 5.0,
            seed: 0,
        }
    }
}

/// Gaussian clusters around prototypes drawn uniformly from
/// `[-inter_scale, inter_scale]^input_dim`. Samples are ordered by class.
pub fn gen_synthetic_clusters(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes < 4 || spec.per_class < 2 || spec.input_dim == 0 {
        return Err(Error::Data(format!(
            "synthetic clusters need >= 4 classes, >= 2 per class and dim >= 1 (got {}, {}, {})",
            spec.num_classes, spec.per_class, spec.input_dim
        )));
    }
    if !(spec.intra_std >= 0.0 && spec.inter_scale > 0.0) {
        return Err(Error::Data("intra_std must be >= 0 and inter_scale > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.intra_std).map_err(|e| Error::Data(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.num_classes * spec.per_class * spec.input_dim);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        let prototype: Vec<f64> = (0..spec.input_dim)
            .map(|_| rng.random_range(-spec.inter_scale..=spec.inter_scale))
            .collect();
        for _ in 0..spec.per_class {
            data.extend(prototype.iter().map(|&p| p + noise.sample(&mut rng)));
            labels.push(class as u32);
        }
    }
    let n = labels.len();
    Dataset::new(
        format!("synthetic-{}x{}x{}", spec.num_classes, spec.per_class, spec.input_dim),
        Tensor::new(vec![n, spec.input_dim], data)?,
        labels,
    )
}

/// Grid-shaped clusters (`channels x height x width` samples) for
/// convolutional networks. Prototypes are piecewise constant over 2x2 cells
/// plus a per-pixel component, so both coarse and fine structure carry class
/// information.
pub fn gen_synthetic_grids(
    num_classes: usize,
    per_class: usize,
    (channels, height, width): (usize, usize, usize),
    intra_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 4 || per_class < 2 || channels == 0 || height < 2 || width < 2 {
        return Err(Error::Data("synthetic grids need >= 4 classes, >= 2 per class, grids >= 2x2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, intra_std).map_err(|e| Error::Data(e.to_string()))?;
    let numel = channels * height * width;
    let mut data = Vec::with_capacity(num_classes * per_class * numel);
    let mut labels = Vec::new();
    for class in 0..num_classes {
        let coarse: Vec<f64> = (0..channels * height.div_ceil(2) * width.div_ceil(2))
            .map(|_| rng.random_range(-2.0..=2.0))
            .collect();
        let prototype: Vec<f64> = (0..numel)
            .map(|k| {
                let (c, y, x) = (k / (height * width), (k / width) % height, k % width);
                coarse[(c * height.div_ceil(2) + y / 2) * width.div_ceil(2) + x / 2] + rng.random_range(-1.0..=1.0)
            })
            .collect();
        for _ in 0..per_class {
            data.extend(prototype.iter().map(|&p| p + noise.sample(&mut rng)));
            labels.push(class as u32);
        }
    }
    let n = labels.len();
    Dataset::new(
        format!("grid-{num_classes}x{per_class}-{channels}x{height}x{width}"),
        Tensor::new(vec![n, channels, height, width], data)?,
        labels,
    )
}

/// Lower half of the sorted class ids trains, upper half tests; an odd extra
/// class goes to train. Within each train class a seeded 80/20 sample split
/// gives train/validation (classes whose 20% share rounds below 2 samples
/// keep everything in train).
pub fn split_classes_half(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "class split needs at least 2 classes, got {}",
            classes.len()
        )));
    }
    let n_train = classes.len().div_ceil(2);
    let train_classes = classes[..n_train].to_vec();
    let test_classes = classes[n_train..].to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &class in &classes {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if test_classes.contains(&class) {
            test.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let mut n_val = (members.len() as f64 * 0.2).round() as usize;
        if n_val < 2 || members.len() - n_val < 2 {
            n_val = 0;
        }
        let (val, tr) = members.split_at(n_val);
        let mut val = val.to_vec();
        let mut tr = tr.to_vec();
        val.sort_unstable();
        tr.sort_unstable();
        validation.extend(val);
        train.extend(tr);
    }
    let mut out = dataset.clone();
    out.split = Some(Split {
        train_classes,
        test_classes,
        train,
        validation,
        test,
    });
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationSpec {
    /// Average-pool non-overlapping `factor x factor` blocks, then
    /// nearest-neighbour upsample back. Grid samples only.
    LowRes { factor: usize },
    /// Additive Gaussian noise.
    Noise { sigma: f64 },
    /// Zero a random subset of `round(fraction * numel)` coordinates.
    Mask { fraction: f64 },
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DegradationSpec::LowRes { factor } => factor >= 2,
            DegradationSpec::Noise { sigma } => sigma > 0.0 && sigma.is_finite(),
            DegradationSpec::Mask { fraction } => fraction > 0.0 && fraction < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid degradation {self}")))
        }
    }
}

impl std::fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DegradationSpec::LowRes { factor } => write!(f, "lowres:{factor}"),
            DegradationSpec::Noise { sigma } => write!(f, "noise:{sigma}"),
            DegradationSpec::Mask { fraction } => write!(f, "mask:{fraction}"),
        }
    }
}

impl std::str::FromStr for DegradationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse degradation `{s}` (lowres:F|noise:S|mask:P)"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "lowres" => DegradationSpec::LowRes {
                factor: value.parse().map_err(|_| bad())?,
            },
            "noise" => DegradationSpec::Noise {
                sigma: value.parse().map_err(|_| bad())?,
            },
            "mask" => DegradationSpec::Mask {
                fraction: value.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies a degradation to one sample. Output shape equals input shape.
pub fn degrade(sample: &Tensor, spec: &DegradationSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        DegradationSpec::LowRes { factor } => {
            let (channels, h, w) = match *sample.shape() {
                [h, w] => (1, h, w),
                [c, h, w] => (c, h, w),
                ref s => {
                    return Err(Error::Data(format!(
                        "lowres degradation needs a grid sample, got shape {s:?}"
                    )))
                }
            };
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::Data(format!(
                    "lowres factor {factor} does not divide grid {h}x{w}"
                )));
            }
            let src = sample.data();
            let mut out = vec![0.0; src.len()];
            let area = (factor * factor) as f64;
            for c in 0..channels {
                let base = c * h * w;
                for by in (0..h).step_by(factor) {
                    for bx in (0..w).step_by(factor) {
                        let mut sum = 0.0;
                        for y in by..by + factor {
                            for x in bx..bx + factor {
                                sum += src[base + y * w + x];
                            }
                        }
                        let mean = sum / area;
                        for y in by..by + factor {
                            for x in bx..bx + factor {
                                out[base + y * w + x] = mean;
                            }
                        }
                    }
                }
            }
            Tensor::new(sample.shape().to_vec(), out)
        }
        DegradationSpec::Noise { sigma } => {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Data(e.to_string()))?;
            let data = sample.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Tensor::new(sample.shape().to_vec(), data)
        }
        DegradationSpec::Mask { fraction } => {
            let n = sample.numel();
            let count = (fraction * n as f64).round() as usize;
            let mut out = sample.clone();
            for i in index::sample(&mut rng, n, count) {
                out.data_mut()[i] = 0.0;
            }
            Ok(out)
        }
    }
}

/// Reads `label,f1,...,fD` lines. Blank lines and lines starting with `#`
/// are skipped.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let csv_err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut width: Option<usize> = None;
    let mut first_line: BTreeMap<u32, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or_default();
        let label: u32 = label_field
            .parse()
            .map_err(|_| csv_err(line_no, format!("label `{label_field}` is not a non-negative integer")))?;
        let row: Vec<f64> = fields
            .enumerate()
            .map(|(k, f)| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| csv_err(line_no, format!("feature {} `{f}` is not a finite number", k + 1)))
            })
            .collect::<Result<_>>()?;
        match width {
            None if row.is_empty() => return Err(csv_err(line_no, "row has no features".into())),
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(csv_err(
                    line_no,
                    format!("ragged row: {} features, expected {w}", row.len()),
                ))
            }
            Some(_) => {}
        }
        first_line.entry(label).or_insert(line_no);
        labels.push(label);
        data.extend(row);
    }
    let width = width.ok_or_else(|| Error::Data(format!("{}: no samples", path.display())))?;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in &labels {
        *counts.entry(l).or_default() += 1;
    }
    if let Some((&class, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(csv_err(
            first_line[&class],
            format!("class {class} has only one sample (need >= 2)"),
        ));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let n = labels.len();
    Dataset::new(name, Tensor::new(vec![n, width], data)?, labels)
}

/// Writes a vector dataset in the format read by [`load_csv_dataset`], with
/// round-trip exact float formatting.
pub fn export_csv_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if dataset.sample_shape().len() != 1 {
        return Err(Error::Data(format!(
            "CSV export needs vector samples, got shape {:?}",
            dataset.sample_shape()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let write = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        writeln!(out, "# label,features x{}", dataset.sample_shape()[0])?;
        for i in 0..dataset.len() {
            write!(out, "{}", dataset.labels[i])?;
            for v in dataset.features.row(i) {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}
