//! Metric-learning and distillation losses.
//!
//! All losses are built from tape primitives so they are differentiable with
//! respect to whatever parameters produced their inputs. Batch reductions are
//! arithmetic means. Distances are unsquared Euclidean unless
//! [`DistanceKind::Squared`] is selected.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::sampling::Triplet;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistanceKind {
    #[default]
    Euclidean,
    /// Squared Euclidean distance, for ablations.
    Squared,
}

/// Hyperparameters of the combined objective
/// `L_ML + lambda * L_KD + mu * L_hint + kappa * L_AT`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub margin: f64,
    pub lambda: f64,
    pub mu: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: DEFAULT_MARGIN,
            lambda: 0.0,
            mu: 0.0,
            kappa: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margin", self.margin),
            ("lambda", self.lambda),
            ("mu", self.mu),
            ("kappa", self.kappa),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which distillation signal the teacher provides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistillMode {
    /// Metric learning only, no teacher.
    #[default]
    Baseline,
    /// Match the teacher's embedding coordinates.
    Absolute,
    /// Match the teacher's pairwise distances.
    Relative,
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(DistillMode::Baseline),
            "abs" | "absolute" | "distill_abs" => Ok(DistillMode::Absolute),
            "rel" | "relative" | "distill_rel" => Ok(DistillMode::Relative),
            _ => Err(Error::Config(format!("unknown mode `{s}` (baseline|abs|rel)"))),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::Baseline => "baseline",
            DistillMode::Absolute => "abs",
            DistillMode::Relative => "rel",
        })
    }
}

/// Distances between row `a[k]` and row `b[k]` of two equally shaped `N x D`
/// nodes; returns an `N` vector.
pub fn row_distances(tape: &mut Tape, a: NodeId, b: NodeId, kind: DistanceKind) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) || tape.shape(a).len() != 2 {
        return Err(Error::shape("row_distances", tape.shape(a), tape.shape(b)));
    }
    let diff = tape.sub(a, b)?;
    match kind {
        DistanceKind::Euclidean => tape.norm_axis(diff, 1),
        DistanceKind::Squared => {
            let sq = tape.square(diff)?;
            tape.sum_axis(sq, 1)
        }
    }
}

/// Distances `|| e[i] - e[j] ||` for each listed pair.
pub fn pair_distances(tape: &mut Tape, emb: NodeId, pairs: &[(usize, usize)], kind: DistanceKind) -> Result<NodeId> {
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let a = tape.select_rows(emb, &left)?;
    let b = tape.select_rows(emb, &right)?;
    row_distances(tape, a, b, kind)
}

/// Mean over triplets of `max(0, d(a,p) - d(a,n) + margin)` on rows of `emb`.
pub fn triplet_loss(
    tape: &mut Tape,
    emb: NodeId,
    triplets: &[Triplet],
    margin: f64,
    kind: DistanceKind,
) -> Result<NodeId> {
    if triplets.is_empty() {
        return Err(Error::Loss("triplet loss needs at least one triplet".into()));
    }
    let anchors: Vec<usize> = triplets.iter().map(|t| t.anchor).collect();
    let positives: Vec<usize> = triplets.iter().map(|t| t.positive).collect();
    let negatives: Vec<usize> = triplets.iter().map(|t| t.negative).collect();
    let a = tape.select_rows(emb, &anchors)?;
    let p = tape.select_rows(emb, &positives)?;
    let n = tape.select_rows(emb, &negatives)?;
    let d_pos = row_distances(tape, a, p, kind)?;
    let d_neg = row_distances(tape, a, n, kind)?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Absolute teacher: mean over samples of `|| F_S(x_i) - F_T(x_i) ||`.
pub fn kd_abs_loss(tape: &mut Tape, student: NodeId, teacher: NodeId, kind: DistanceKind) -> Result<NodeId> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape("kd_abs_loss", tape.shape(student), tape.shape(teacher)));
    }
    let d = row_distances(tape, student, teacher, kind)?;
    tape.mean(d)
}

/// Relative teacher: mean over pairs of `| d_S(i,j) - d_T(i,j) |`. Student and
/// teacher embedding widths may differ.
pub fn kd_rel_loss(
    tape: &mut Tape,
    student: NodeId,
    teacher: NodeId,
    pairs: &[(usize, usize)],
    kind: DistanceKind,
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Loss("relative loss needs a non-empty pair set".into()));
    }
    let n = tape.shape(student)[0];
    if tape.shape(teacher)[0] != n {
        return Err(Error::shape("kd_rel_loss", tape.shape(student), tape.shape(teacher)));
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
        return Err(Error::Loss(format!("invalid pair ({i}, {j}) for batch of {n}")));
    }
    let ds = pair_distances(tape, student, pairs, kind)?;
    let dt = pair_distances(tape, teacher, pairs, kind)?;
    let diff = tape.sub(ds, dt)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// A student activation paired with a teacher activation.
#[derive(Clone, Debug)]
pub struct TapLink {
    pub student_name: String,
    pub teacher_name: String,
    pub student: NodeId,
    pub teacher: NodeId,
}

impl TapLink {
    fn label(&self) -> String {
        format!("({} <- {})", self.student_name, self.teacher_name)
    }
}

fn flatten_rows(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() == 2 {
        return Ok(x);
    }
    let width = shape[1..].iter().product();
    tape.reshape(x, &[shape[0], width])
}

/// Mean over links and samples of the Frobenius distance between paired
/// activations.
pub fn hint_loss(tape: &mut Tape, links: &[TapLink]) -> Result<NodeId> {
    if links.is_empty() {
        return Err(Error::Loss("hint loss needs at least one tap pair".into()));
    }
    let mut terms = Vec::with_capacity(links.len());
    for link in links {
        if tape.shape(link.student) != tape.shape(link.teacher) {
            return Err(Error::Loss(format!(
                "hint pair {} has mismatched shapes {:?} and {:?}",
                link.label(),
                tape.shape(link.student),
                tape.shape(link.teacher)
            )));
        }
        let s = flatten_rows(tape, link.student)?;
        let t = flatten_rows(tape, link.teacher)?;
        let d = row_distances(tape, s, t, DistanceKind::Euclidean)?;
        terms.push(tape.mean(d)?);
    }
    mean_of_scalars(tape, &terms)
}

fn mean_of_scalars(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Activation-based spatial attention: sum over channels of squared values.
///
/// Accepts `B x C x H x W` feature maps (result `B x (H*W)`) or `B x F`
/// vector activations, which are treated as a single channel over `F`
/// locations (result `B x F`).
pub fn attention_map(tape: &mut Tape, features: NodeId) -> Result<NodeId> {
    let shape = tape.shape(features).to_vec();
    match shape.len() {
        2 => tape.square(features),
        4 => {
            let sq = tape.square(features)?;
            let summed = tape.sum_axis(sq, 1)?;
            tape.reshape(summed, &[shape[0], shape[2] * shape[3]])
        }
        _ => Err(Error::Loss(format!(
            "attention map needs a B x C x H x W or B x F activation, got {shape:?}"
        ))),
    }
}

/// Mean over samples of `|| A_S / ||A_S|| - A_T / ||A_T|| ||` for `B x P` maps.
pub fn attention_loss(tape: &mut Tape, student_map: NodeId, teacher_map: NodeId) -> Result<NodeId> {
    if tape.shape(student_map) != tape.shape(teacher_map) || tape.shape(student_map).len() != 2 {
        return Err(Error::shape(
            "attention_loss",
            tape.shape(student_map),
            tape.shape(teacher_map),
        ));
    }
    let s = unit_rows(tape, student_map, "student")?;
    let t = unit_rows(tape, teacher_map, "teacher")?;
    let d = row_distances(tape, s, t, DistanceKind::Euclidean)?;
    tape.mean(d)
}

fn unit_rows(tape: &mut Tape, map: NodeId, who: &str) -> Result<NodeId> {
    let b = tape.shape(map)[0];
    let norms = tape.norm_axis(map, 1)?;
    if let Some(row) = tape.value(norms).data().iter().position(|&v| v == 0.0) {
        return Err(Error::Loss(format!(
            "{who} attention map of sample {row} is all zero"
        )));
    }
    let norms = tape.reshape(norms, &[b, 1])?;
    tape.div(map, norms)
}

/// Attention loss averaged over tap links.
pub fn attention_transfer_loss(tape: &mut Tape, links: &[TapLink]) -> Result<NodeId> {
    if links.is_empty() {
        return Err(Error::Loss("attention loss needs at least one tap pair".into()));
    }
    let mut terms = Vec::with_capacity(links.len());
    for link in links {
        let s = attention_map(tape, link.student)?;
        let t = attention_map(tape, link.teacher)?;
        if tape.shape(s) != tape.shape(t) {
            return Err(Error::Loss(format!(
                "attention pair {} has mismatched spatial shapes {:?} and {:?}",
                link.label(),
                tape.shape(s),
                tape.shape(t)
            )));
        }
        terms.push(attention_loss(tape, s, t)?);
    }
    mean_of_scalars(tape, &terms)
}

/// Which terms of the combined objective are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Objective {
    pub mode: DistillMode,
    pub use_hint: bool,
    pub use_attention: bool,
    /// Include the triplet term. Off for label-free batches.
    pub metric_learning: bool,
    pub distance: DistanceKind,
}

impl Objective {
    pub fn needs_teacher(&self) -> bool {
        self.mode != DistillMode::Baseline || self.use_hint || self.use_attention
    }
}

/// Everything a batch contributes to the objective.
#[derive(Clone, Debug, Default)]
pub struct LossInputs<'a> {
    pub student: Option<NodeId>,
    pub teacher: Option<NodeId>,
    pub triplets: &'a [Triplet],
    pub pairs: &'a [(usize, usize)],
    pub hint_links: &'a [TapLink],
    pub attention_links: &'a [TapLink],
}

/// The objective node plus the unweighted value of every term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: NodeId,
    pub ml: f64,
    pub kd: f64,
    pub hint: f64,
    pub at: f64,
}

impl LossTerms {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).item()
    }
}

/// Weighted sum of the active terms. A term whose weight is zero is still
/// evaluated for reporting but contributes nothing to the graph.
pub fn total_loss(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
    objective: &Objective,
) -> Result<LossTerms> {
    weights.validate()?;
    let student = inputs
        .student
        .ok_or_else(|| Error::Loss("student embeddings missing".into()))?;
    if objective.needs_teacher() && inputs.teacher.is_none() {
        return Err(Error::Loss(
            "distillation term requested without teacher outputs".into(),
        ));
    }

    let mut parts: Vec<(NodeId, f64)> = Vec::new();
    let mut terms = LossTerms {
        total: student,
        ml: 0.0,
        kd: 0.0,
        hint: 0.0,
        at: 0.0,
    };

    if objective.metric_learning && !inputs.triplets.is_empty() {
        let ml = triplet_loss(tape, student, inputs.triplets, weights.margin, objective.distance)?;
        terms.ml = tape.value(ml).item();
        parts.push((ml, 1.0));
    }
    if let Some(teacher) = inputs.teacher {
        let kd = match objective.mode {
            DistillMode::Baseline => None,
            DistillMode::Absolute => Some(kd_abs_loss(tape, student, teacher, objective.distance)?),
            DistillMode::Relative => Some(kd_rel_loss(tape, student, teacher, inputs.pairs, objective.distance)?),
        };
        if let Some(kd) = kd {
            terms.kd = tape.value(kd).item();
            parts.push((kd, weights.lambda));
        }
    }
    if objective.use_hint {
        let hint = hint_loss(tape, inputs.hint_links)?;
        terms.hint = tape.value(hint).item();
        parts.push((hint, weights.mu));
    }
    if objective.use_attention {
        let at = attention_transfer_loss(tape, inputs.attention_links)?;
        terms.at = tape.value(at).item();
        parts.push((at, weights.kappa));
    }

    let mut total: Option<NodeId> = None;
    for (node, weight) in parts {
        if weight == 0.0 {
            continue;
        }
        let weighted = if weight == 1.0 { node } else { tape.scale(node, weight)? };
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    terms.total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(terms)
}
