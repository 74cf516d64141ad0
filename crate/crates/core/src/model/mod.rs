//! Teacher and student embedding networks.
//!
//! A network is a stack of layers described by a [`NetConfig`]. Layers are
//! named by kind and position (`affine0`, `relu1`, `conv2`, `gap3`, ...), and
//! any of those names can be exposed as a tap so hint and attention losses
//! can read intermediate activations.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Shape of one input sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Vector { dim: usize },
    /// Samples are `channels x height x width`, batches `B x C x H x W`.
    Grid { height: usize, width: usize, channels: usize },
}

impl InputKind {
    pub fn sample_shape(&self) -> Vec<usize> {
        match *self {
            InputKind::Vector { dim } => vec![dim],
            InputKind::Grid { height, width, channels } => vec![channels, height, width],
        }
    }
}

impl fmt::Display for InputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputKind::Vector { dim } => write!(f, "vector:{dim}"),
            InputKind::Grid { height, width, channels } => write!(f, "grid:{height}x{width}x{channels}"),
        }
    }
}

impl FromStr for InputKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse input kind `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "vector" => Ok(InputKind::Vector {
                dim: rest.parse().map_err(|_| bad())?,
            }),
            "grid" => {
                let dims: Vec<usize> = rest
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                match dims[..] {
                    [height, width, channels] => Ok(InputKind::Grid { height, width, channels }),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Fully connected layer; inputs of rank > 1 per sample are flattened.
    Affine { out_dim: usize },
    Relu,
    /// 3x3 convolution, zero padding 1.
    Conv { out_channels: usize, stride: usize },
    GlobalAvgPool,
}

impl LayerSpec {
    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Relu => "relu",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::GlobalAvgPool => "gap",
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Affine { out_dim } => write!(f, "affine:{out_dim}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Conv { out_channels, stride } => write!(f, "conv:{out_channels}:{stride}"),
            LayerSpec::GlobalAvgPool => write!(f, "gap"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse layer `{s}`"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts[..] {
            ["affine", n] => Ok(LayerSpec::Affine { out_dim: num(n)? }),
            ["relu"] => Ok(LayerSpec::Relu),
            ["conv", c] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                stride: 1,
            }),
            ["conv", c, s] => Ok(LayerSpec::Conv {
                out_channels: num(c)?,
                stride: num(s)?,
            }),
            ["gap"] => Ok(LayerSpec::GlobalAvgPool),
            _ => Err(bad()),
        }
    }
}

/// Parses a comma-separated layer list such as `affine:256,relu,affine:64`.
pub fn parse_layers(s: &str) -> Result<Vec<LayerSpec>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input: InputKind,
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
    /// L2-normalize embedding rows. Off by default.
    pub normalize: bool,
    /// Layer names exposed as intermediate outputs.
    pub taps: Vec<String>,
}

impl NetConfig {
    /// Three hidden affine+relu layers of width 256 and a linear embedding layer.
    pub fn teacher(input_dim: usize, embedding_dim: usize) -> Self {
        Self::mlp(input_dim, &[256, 256, 256], embedding_dim)
    }

    /// One hidden affine+relu layer of width 16 and a linear embedding layer.
    pub fn student(input_dim: usize, embedding_dim: usize) -> Self {
        Self::mlp(input_dim, &[16], embedding_dim)
    }

    pub fn mlp(input_dim: usize, hidden: &[usize], embedding_dim: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Affine { out_dim: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Affine { out_dim: embedding_dim });
        NetConfig {
            input: InputKind::Vector { dim: input_dim },
            layers,
            embedding_dim,
            normalize: false,
            taps: Vec::new(),
        }
    }

    pub fn with_taps(mut self, taps: &[&str]) -> Self {
        self.taps = taps.iter().map(|t| t.to_string()).collect();
        self
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{}{i}", l.kind()))
            .collect()
    }

    /// Per-sample output shape of every layer, validating the chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        let mut shape = self.input.sample_shape();
        if shape.contains(&0) {
            return Err(Error::Config(format!("input kind {} has a zero extent", self.input)));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Affine { out_dim } if out_dim > 0 => vec![out_dim],
                LayerSpec::Relu => shape,
                LayerSpec::Conv { out_channels, stride } if out_channels > 0 && (stride == 1 || stride == 2) => {
                    match shape[..] {
                        [_, h, w] => vec![out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1],
                        _ => {
                            return Err(Error::Config(format!(
                                "layer {i} ({layer}) needs a grid input, got per-sample shape {shape:?}"
                            )))
                        }
                    }
                }
                LayerSpec::GlobalAvgPool => match shape[..] {
                    [c, _, _] => vec![c],
                    _ => {
                        return Err(Error::Config(format!(
                            "layer {i} (gap) needs a grid input, got per-sample shape {shape:?}"
                        )))
                    }
                },
                _ => return Err(Error::Config(format!("layer {i} ({layer}) has invalid parameters"))),
            };
            shapes.push(shape.clone());
        }
        if shape != [self.embedding_dim] {
            return Err(Error::Config(format!(
                "final layer outputs {shape:?} but embedding_dim is {}",
                self.embedding_dim
            )));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_shapes()?;
        let names = self.layer_names();
        for tap in &self.taps {
            if !names.contains(tap) {
                return Err(Error::Config(format!(
                    "tap `{tap}` is not a layer name (layers: {})",
                    names.join(",")
                )));
            }
        }
        Ok(())
    }

    /// Per-sample activation shape of a named layer.
    pub fn tap_shape(&self, name: &str) -> Result<Vec<usize>> {
        let shapes = self.layer_shapes()?;
        self.layer_names()
            .iter()
            .position(|n| n == name)
            .map(|i| shapes[i].clone())
            .ok_or_else(|| Error::Config(format!("unknown layer `{name}`")))
    }

    /// `key=value` lines; the inverse of [`NetConfig::from_text`].
    pub fn to_text(&self) -> String {
        format!(
            "input={}\nlayers={}\nembedding_dim={}\nnormalize={}\ntaps={}\n",
            self.input,
            format_layers(&self.layers),
            self.embedding_dim,
            self.normalize,
            self.taps.join(",")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing field `{k}`")))
        };
        let config = NetConfig {
            input: get("input")?.parse()?,
            layers: parse_layers(get("layers")?)?,
            embedding_dim: get("embedding_dim")?
                .parse()
                .map_err(|_| Error::Config("embedding_dim must be a positive integer".into()))?,
            normalize: get("normalize")?
                .parse()
                .map_err(|_| Error::Config("normalize must be true or false".into()))?,
            taps: get("taps")?
                .split(',')
                .filter(|t| !t.is_empty())
                .map(String::from)
                .collect(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapOutput {
    pub name: String,
    /// `B x per-sample shape`.
    pub activation: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    config: NetConfig,
    params: BTreeMap<String, Tensor>,
}

/// Parameter leaves of a network registered on a tape.
#[derive(Clone, Debug)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.0.iter()
    }
}

/// Builds handles from nodes the caller placed on the tape, e.g. to perturb
/// parameters outside the network.
impl FromIterator<(String, NodeId)> for ParamNodes {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        ParamNodes(iter.into_iter().collect())
    }
}

/// Node handles produced by a forward pass on a tape.
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub embeddings: NodeId,
    pub taps: Vec<(String, NodeId)>,
}

impl ForwardNodes {
    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }
}

/// Deterministic initialization: weights uniform in `±1/sqrt(fan_in)`,
/// biases zero.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<EmbeddingNet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut shape = config.input.sample_shape();
    for (name, layer) in config.layer_names().into_iter().zip(&config.layers) {
        match *layer {
            LayerSpec::Affine { out_dim } => {
                let fan_in: usize = shape.iter().product();
                let w = uniform(&mut rng, &[fan_in, out_dim], fan_in);
                params.insert(format!("{name}.weight"), w);
                params.insert(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
                shape = vec![out_dim];
            }
            LayerSpec::Conv { out_channels, stride } => {
                let fan_in = shape[0] * 9;
                let k = uniform(&mut rng, &[out_channels, shape[0], 3, 3], fan_in);
                params.insert(format!("{name}.kernel"), k);
                params.insert(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
                shape = vec![out_channels, (shape[1] - 1) / stride + 1, (shape[2] - 1) / stride + 1];
            }
            LayerSpec::GlobalAvgPool => shape = vec![shape[0]],
            LayerSpec::Relu => {}
        }
    }
    Ok(EmbeddingNet {
        config: config.clone(),
        params,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

impl EmbeddingNet {
    /// Builds a network from explicit parameters, checking names and shapes.
    pub fn from_params(config: NetConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = init_params(&config, 0)?;
        for (name, expected) in &reference.params {
            match params.get(name) {
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != expected.shape() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        expected.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !reference.params.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(EmbeddingNet { config, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replaces the exposed taps. Fails if a name is not a layer.
    pub fn set_taps(&mut self, taps: Vec<String>) -> Result<()> {
        let mut config = self.config.clone();
        config.taps = taps;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    /// Records parameters on the tape, as gradient-receiving leaves when
    /// `trainable`, otherwise as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        ParamNodes(
            self.params
                .iter()
                .map(|(name, t)| {
                    let id = if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    };
                    (name.clone(), id)
                })
                .collect(),
        )
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        let sample = self.config.input.sample_shape();
        if shape.len() != sample.len() + 1 || shape[1..] != sample[..] {
            let mut expected = vec![0];
            expected.extend(sample);
            return Err(Error::shape("embed", shape, &expected));
        }
        Ok(())
    }

    /// Forward pass recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamNodes, batch: NodeId) -> Result<ForwardNodes> {
        self.check_batch(tape.shape(batch))?;
        let batch_size = tape.shape(batch)[0];
        let mut x = batch;
        let mut taps = Vec::new();
        for (name, layer) in self.config.layer_names().into_iter().zip(&self.config.layers) {
            x = match *layer {
                LayerSpec::Affine { .. } => {
                    if tape.shape(x).len() > 2 {
                        let width = tape.value(x).numel() / batch_size;
                        x = tape.reshape(x, &[batch_size, width])?;
                    }
                    let h = tape.matmul(x, params.get(&format!("{name}.weight")))?;
                    tape.add(h, params.get(&format!("{name}.bias")))?
                }
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Conv { stride, .. } => tape.conv2d(
                    x,
                    params.get(&format!("{name}.kernel")),
                    params.get(&format!("{name}.bias")),
                    stride,
                )?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
            };
            if self.config.taps.contains(&name) {
                taps.push((name, x));
            }
        }
        if self.config.normalize {
            let norms = tape.norm_axis(x, 1)?;
            let norms = tape.add_scalar(norms, 1e-12)?;
            let norms = tape.reshape(norms, &[batch_size, 1])?;
            x = tape.div(x, norms)?;
        }
        // Taps are reported in configuration order.
        taps.sort_by_key(|(n, _)| self.config.taps.iter().position(|t| t == n));
        Ok(ForwardNodes { embeddings: x, taps })
    }

    /// Forward pass without gradient recording.
    pub fn embed(&self, batch: &Tensor) -> Result<(Tensor, Vec<TapOutput>)> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let input = tape.constant(batch.clone());
        let out = self.forward(&mut tape, &params, input)?;
        let taps = out
            .taps
            .iter()
            .map(|(name, id)| TapOutput {
                name: name.clone(),
                activation: tape.value(*id).clone(),
            })
            .collect();
        Ok((tape.value(out.embeddings).clone(), taps))
    }

    /// Embeddings of a large set, computed in chunks.
    pub fn embed_all(&self, inputs: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 256;
        let n = inputs.shape()[0];
        let mut data = Vec::with_capacity(n * self.config.embedding_dim);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let (emb, _) = self.embed(&inputs.select_rows(&rows)?)?;
            data.extend_from_slice(emb.data());
            start = end;
        }
        Tensor::new(vec![n, self.config.embedding_dim], data)
    }
}
