//! Optimization loop for teachers, baseline students and distilled students.
//!
//! One training step draws a class-balanced batch, runs the frozen teacher
//! (if any) as a value-only forward pass, runs the student on a fresh tape,
//! mines hard negatives on the student embeddings of that same pass, and
//! applies one Adam update to the student parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::seq::SliceRandom;

use crate::autodiff::{NodeId, Tape};
use crate::data::{Dataset, DegradationSpec};
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::loss::{total_loss, DistanceKind, DistillMode, LossInputs, LossWeights, Objective, TapLink};
use crate::model::{init_params, EmbeddingNet, NetConfig, TapOutput};
use crate::sampling::{enumerate_pairs, make_batch, mine_hard_negatives, sample_indices, ClassPool};
use crate::tensor::Tensor;

/// Semi-supervised regime.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SemiConfig {
    /// Fraction of each train class whose labels are visible, in (0, 1].
    pub labeled_fraction: f64,
    /// Apply the distillation loss to the remaining, label-free samples.
    pub use_unlabeled: bool,
    /// Drop the metric-learning term entirely and treat every train sample
    /// as unlabeled.
    pub kd_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: DistillMode,
    pub use_hint: bool,
    pub use_attention: bool,
    pub weights: LossWeights,
    pub distance: DistanceKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub semi: Option<SemiConfig>,
    /// Degradation applied to student inputs only.
    pub cross_quality: Option<DegradationSpec>,
    /// `(teacher_tap, student_tap)` pairs for the hint loss.
    pub hint_pairs: Vec<(String, String)>,
    /// `(teacher_tap, student_tap)` pairs for the attention loss.
    pub attention_pairs: Vec<(String, String)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: DistillMode::Baseline,
            use_hint: false,
            use_attention: false,
            weights: LossWeights::default(),
            distance: DistanceKind::Euclidean,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            classes_per_batch: 8,
            epochs: 200,
            seed: 0,
            semi: None,
            cross_quality: None,
            hint_pairs: Vec::new(),
            attention_pairs: Vec::new(),
        }
    }
}

/// Default distillation weight per mode: 100 for the relative teacher, 10
/// for the absolute one.
pub fn default_lambda(mode: DistillMode) -> f64 {
    match mode {
        DistillMode::Baseline => 0.0,
        DistillMode::Absolute => 10.0,
        DistillMode::Relative => 100.0,
    }
}

impl TrainConfig {
    /// Defaults for `mode`, with its default lambda.
    pub fn for_mode(mode: DistillMode) -> Self {
        let mut cfg = TrainConfig {
            mode,
            ..Default::default()
        };
        cfg.weights.lambda = default_lambda(mode);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be > 0".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if let Some(semi) = &self.semi {
            if !(semi.labeled_fraction > 0.0 && semi.labeled_fraction <= 1.0) {
                return bad(format!("labeled_fraction must lie in (0, 1], got {}", semi.labeled_fraction));
            }
            if (semi.kd_only || semi.use_unlabeled) && self.mode == DistillMode::Baseline {
                return bad("label-free training needs a distillation mode (abs or rel)".into());
            }
        }
        if let Some(spec) = &self.cross_quality {
            spec.validate()?;
        }
        if self.use_hint && self.hint_pairs.is_empty() {
            return bad("hint loss enabled but no hint tap pairs configured".into());
        }
        if self.use_attention && self.attention_pairs.is_empty() {
            return bad("attention loss enabled but no attention tap pairs configured".into());
        }
        Ok(())
    }

    fn objective(&self, metric_learning: bool) -> Objective {
        Objective {
            mode: self.mode,
            use_hint: self.use_hint,
            use_attention: self.use_attention,
            metric_learning,
            distance: self.distance,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    fn kd_only(&self) -> bool {
        self.semi.is_some_and(|s| s.kd_only)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let Some(p) = params.get(name) else {
            return Err(Error::Config(format!("gradient for unknown parameter `{name}`")));
        };
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                step: state.step + 1,
                param: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - cfg.beta1.powi(t);
    let correction2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let zeros = Tensor::zeros(p.shape());
        let g = grads.get(name).unwrap_or(&zeros);
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / correction1;
            let v_hat = *vv / correction2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Weighted loss contributions of one optimization step; `total` is the sum
/// of the other four.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub total: f64,
    pub ml: f64,
    pub kd: f64,
    pub hint: f64,
    pub at: f64,
}

impl StepRecord {
    fn accumulate(&mut self, other: &StepRecord) {
        self.total += other.total;
        self.ml += other.ml;
        self.kd += other.kd;
        self.hint += other.hint;
        self.at += other.at;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Means over the epoch's steps of the weighted loss contributions.
    pub loss: StepRecord,
    pub val_recall_at_1: Option<f64>,
    pub wall_ms: u128,
}

impl EpochRecord {
    /// `key=value` line; `wall_ms` is omitted when `with_wall` is false.
    pub fn to_line(&self, with_wall: bool) -> String {
        let mut s = format!(
            "epoch={} loss_total={:?} loss_ml={:?} loss_kd={:?} loss_hint={:?} loss_at={:?} val_recall@1={}",
            self.epoch,
            self.loss.total,
            self.loss.ml,
            self.loss.kd,
            self.loss.hint,
            self.loss.at,
            self.val_recall_at_1.map_or_else(|| "nan".to_string(), |r| format!("{r:?}")),
        );
        if with_wall {
            let _ = write!(s, " wall_ms={}", self.wall_ms);
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Epoch with the highest validation Recall@1 (first on ties).
    pub best_epoch: Option<usize>,
}

impl MetricsLog {
    pub fn to_lines(&self) -> String {
        self.epochs.iter().map(|e| e.to_line(true) + "\n").collect()
    }

    /// The log without wall-clock timings, which is a pure function of the
    /// run's inputs.
    pub fn deterministic_lines(&self) -> String {
        self.epochs.iter().map(|e| e.to_line(false) + "\n").collect()
    }

    pub fn final_val_recall(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_recall_at_1)
    }
}

/// Receives each epoch record as soon as it is complete.
pub trait EpochSink {
    fn record(&mut self, record: &EpochRecord) -> Result<()>;
}

/// Discards records.
pub struct NoSink;

impl EpochSink for NoSink {
    fn record(&mut self, _: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Writes one line per epoch and flushes.
pub struct LineSink<W: Write> {
    pub out: W,
    pub path: std::path::PathBuf,
}

impl<W: Write> EpochSink for LineSink<W> {
    fn record(&mut self, record: &EpochRecord) -> Result<()> {
        writeln!(self.out, "{}", record.to_line(true))
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Which version of the inputs each network consumed during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RoutingAudit {
    pub teacher_clean: usize,
    pub teacher_degraded: usize,
    pub student_clean: usize,
    pub student_degraded: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: EmbeddingNet,
    pub log: MetricsLog,
    pub audit: RoutingAudit,
}

/// A labelled batch. Teacher and student inputs hold the same samples in the
/// same order; they differ only under cross-quality training.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub student_input: Tensor,
    pub teacher_input: Tensor,
    pub labels: Vec<u32>,
}

/// A batch whose labels are not available to the loss.
#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub student_input: Tensor,
    pub teacher_input: Tensor,
}

/// Loss record and student gradients of one step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub record: StepRecord,
    pub grads: BTreeMap<String, Tensor>,
}

/// Networks and settings shared by every step of a run. The teacher must
/// expose every tap named in the config's pairs, as must the student.
pub struct StepContext<'a> {
    pub student: &'a EmbeddingNet,
    pub teacher: Option<&'a EmbeddingNet>,
    pub config: &'a TrainConfig,
}

struct BatchTerms {
    record: StepRecord,
    total: NodeId,
}

fn teacher_nodes(tape: &mut Tape, emb: Tensor, taps: Vec<TapOutput>) -> (NodeId, BTreeMap<String, NodeId>) {
    let emb = tape.constant(emb);
    let taps = taps.into_iter().map(|t| (t.name, tape.constant(t.activation))).collect();
    (emb, taps)
}

fn links(
    pairs: &[(String, String)],
    teacher_taps: &BTreeMap<String, NodeId>,
    student_taps: &[(String, NodeId)],
) -> Result<Vec<TapLink>> {
    pairs
        .iter()
        .map(|(t, s)| {
            let teacher = *teacher_taps
                .get(t)
                .ok_or_else(|| Error::Config(format!("teacher does not expose tap `{t}`")))?;
            let student = student_taps
                .iter()
                .find(|(n, _)| n == s)
                .map(|&(_, id)| id)
                .ok_or_else(|| Error::Config(format!("student does not expose tap `{s}`")))?;
            Ok(TapLink {
                student_name: s.clone(),
                teacher_name: t.clone(),
                student,
                teacher,
            })
        })
        .collect()
}

fn batch_terms(
    tape: &mut Tape,
    ctx: &StepContext<'_>,
    params: &crate::model::ParamNodes,
    student_input: &Tensor,
    teacher_input: &Tensor,
    labels: Option<&[u32]>,
) -> Result<BatchTerms> {
    let cfg = ctx.config;
    let objective = cfg.objective(labels.is_some());
    let teacher = match ctx.teacher {
        Some(t) if objective.needs_teacher() => {
            let (emb, taps) = t.embed(teacher_input)?;
            Some(teacher_nodes(tape, emb, taps))
        }
        _ => None,
    };

    let input = tape.constant(student_input.clone());
    let fwd = ctx.student.forward(tape, params, input)?;
    let triplets = match labels {
        Some(labels) => mine_hard_negatives(tape.value(fwd.embeddings), labels)?,
        None => Vec::new(),
    };
    let pairs = if cfg.mode == DistillMode::Relative {
        enumerate_pairs(tape.shape(fwd.embeddings)[0])?
    } else {
        Vec::new()
    };
    let empty = BTreeMap::new();
    let teacher_taps = teacher.as_ref().map_or(&empty, |(_, taps)| taps);
    let hint_links = if cfg.use_hint {
        links(&cfg.hint_pairs, teacher_taps, &fwd.taps)?
    } else {
        Vec::new()
    };
    let attention_links = if cfg.use_attention {
        links(&cfg.attention_pairs, teacher_taps, &fwd.taps)?
    } else {
        Vec::new()
    };
    let inputs = LossInputs {
        student: Some(fwd.embeddings),
        teacher: teacher.as_ref().map(|(emb, _)| *emb),
        triplets: &triplets,
        pairs: &pairs,
        hint_links: &hint_links,
        attention_links: &attention_links,
    };
    let terms = total_loss(tape, &inputs, &cfg.weights, &objective)?;
    let w = &cfg.weights;
    Ok(BatchTerms {
        record: StepRecord {
            total: terms.total_value(tape),
            ml: terms.ml,
            kd: w.lambda * terms.kd,
            hint: w.mu * terms.hint,
            at: w.kappa * terms.at,
        },
        total: terms.total,
    })
}

/// Loss and gradients for one step combining an optional labelled batch
/// (metric learning plus distillation) and an optional unlabelled batch
/// (distillation only). With `kd_only` the labelled batch's metric-learning
/// term is dropped as well.
pub fn semi_supervised_step(
    ctx: &StepContext<'_>,
    labeled: Option<&LabeledBatch>,
    unlabeled: Option<&UnlabeledBatch>,
) -> Result<StepResult> {
    let cfg = ctx.config;
    if unlabeled.is_some() && cfg.mode == DistillMode::Baseline {
        return Err(Error::Config("unlabeled batches need a distillation mode".into()));
    }
    if (cfg.mode != DistillMode::Baseline || cfg.use_hint || cfg.use_attention) && ctx.teacher.is_none() {
        return Err(Error::Config("distillation requested without a teacher".into()));
    }
    if labeled.is_none() && unlabeled.is_none() {
        return Err(Error::Config("step needs at least one batch".into()));
    }

    let mut tape = Tape::new();
    let params = ctx.student.register(&mut tape, true);
    let mut record = StepRecord::default();
    let mut total: Option<NodeId> = None;

    let mut add = |tape: &mut Tape, terms: BatchTerms| -> Result<()> {
        record.accumulate(&terms.record);
        total = Some(match total {
            None => terms.total,
            Some(acc) => tape.add(acc, terms.total)?,
        });
        Ok(())
    };

    if let Some(batch) = labeled {
        if batch.student_input.shape()[0] != batch.labels.len() || batch.teacher_input.shape()[0] != batch.labels.len() {
            return Err(Error::Config(format!(
                "batch length mismatch: student {}, teacher {}, labels {}",
                batch.student_input.shape()[0],
                batch.teacher_input.shape()[0],
                batch.labels.len()
            )));
        }
        let labels = (!cfg.kd_only()).then_some(batch.labels.as_slice());
        let terms = batch_terms(&mut tape, ctx, &params, &batch.student_input, &batch.teacher_input, labels)?;
        add(&mut tape, terms)?;
    }
    if let Some(batch) = unlabeled {
        if batch.student_input.shape()[0] != batch.teacher_input.shape()[0] {
            return Err(Error::Config("unlabeled batch length mismatch".into()));
        }
        let terms = batch_terms(&mut tape, ctx, &params, &batch.student_input, &batch.teacher_input, None)?;
        add(&mut tape, terms)?;
    }

    let total = total.expect("at least one batch");
    if !tape.value(total).all_finite() {
        return Err(Error::Loss("non-finite training loss".into()));
    }
    let grad_root = tape.backward(total)?;
    let grads = params
        .iter()
        .map(|(name, &id)| (name.clone(), grad_root.wrt(id)))
        .collect();
    Ok(StepResult { record, grads })
}

/// Distillation step where the teacher sees `clean` and the student sees
/// `degraded`, sample for sample.
pub fn cross_quality_step(ctx: &StepContext<'_>, clean: &Tensor, degraded: &Tensor, labels: &[u32]) -> Result<StepResult> {
    if clean.shape() != degraded.shape() {
        return Err(Error::Config(format!(
            "clean batch {:?} and degraded batch {:?} differ",
            clean.shape(),
            degraded.shape()
        )));
    }
    let batch = LabeledBatch {
        student_input: degraded.clone(),
        teacher_input: clean.clone(),
        labels: labels.to_vec(),
    };
    semi_supervised_step(ctx, Some(&batch), None)
}

/// Checks that every configured tap pair exists and has compatible shapes.
pub fn check_tap_pairs(teacher: &NetConfig, student: &NetConfig, cfg: &TrainConfig) -> Result<()> {
    let shape_of = |net: &NetConfig, who: &str, name: &str| {
        net.tap_shape(name)
            .map_err(|_| Error::Config(format!("{who} has no layer `{name}`")))
    };
    if cfg.use_hint {
        for (t, s) in &cfg.hint_pairs {
            let (ts, ss) = (shape_of(teacher, "teacher", t)?, shape_of(student, "student", s)?);
            if ts != ss {
                return Err(Error::Config(format!(
                    "hint pair ({s} <- {t}): student shape {ss:?} differs from teacher shape {ts:?}"
                )));
            }
        }
    }
    if cfg.use_attention {
        let spatial = |s: &[usize]| if s.len() == 3 { s[1..].to_vec() } else { s.to_vec() };
        for (t, s) in &cfg.attention_pairs {
            let (ts, ss) = (shape_of(teacher, "teacher", t)?, shape_of(student, "student", s)?);
            if spatial(&ts) != spatial(&ss) {
                return Err(Error::Config(format!(
                    "attention pair ({s} <- {t}): student map {:?} differs from teacher map {:?}",
                    spatial(&ss),
                    spatial(&ts)
                )));
            }
        }
    }
    Ok(())
}

/// Trains an embedding network with the triplet loss alone.
pub fn train_teacher(
    dataset: &Dataset,
    net_config: &NetConfig,
    train_config: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: DistillMode::Baseline,
        use_hint: false,
        use_attention: false,
        semi: None,
        ..train_config.clone()
    };
    let student = init_params(net_config, cfg.seed)?;
    run(student, None, dataset, &cfg, sink)
}

/// Trains a fresh student under a frozen teacher with the objective selected
/// by `train_config` (baseline mode trains without using the teacher).
pub fn distill_student(
    teacher: &EmbeddingNet,
    dataset: &Dataset,
    student_config: &NetConfig,
    train_config: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome> {
    train_config.validate()?;
    let mut student_config = student_config.clone();
    let mut teacher = teacher.clone();
    let (mut teacher_taps, mut student_taps) = (Vec::new(), Vec::new());
    for (t, s) in train_config
        .hint_pairs
        .iter()
        .filter(|_| train_config.use_hint)
        .chain(train_config.attention_pairs.iter().filter(|_| train_config.use_attention))
    {
        teacher_taps.push(t.clone());
        student_taps.push(s.clone());
    }
    for taps in [&mut teacher_taps, &mut student_taps] {
        taps.sort();
        taps.dedup();
    }
    check_tap_pairs(teacher.config(), &student_config, train_config)?;
    teacher.set_taps(teacher_taps)?;
    student_config.taps = student_taps;
    let student = init_params(&student_config, train_config.seed)?;
    run(student, Some(&teacher), dataset, train_config, sink)
}

/// Runs training from an explicit initial student.
pub fn train_from(
    student: EmbeddingNet,
    teacher: Option<&EmbeddingNet>,
    dataset: &Dataset,
    train_config: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome> {
    run(student, teacher, dataset, train_config, sink)
}

const BATCH_STREAM: u64 = 0x5EED_BA7C;
const LABEL_STREAM: u64 = 0x5EED_1ABE;
const DEGRADE_STREAM: u64 = 0x5EED_DE67;

/// Splits train indices into labelled and label-free pools.
fn label_pools(dataset: &Dataset, train: &[usize], cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let Some(semi) = cfg.semi else {
        return (train.to_vec(), Vec::new());
    };
    if semi.kd_only {
        return (Vec::new(), train.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LABEL_STREAM);
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_class.entry(dataset.labels()[i]).or_default().push(i);
    }
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for members in by_class.values_mut() {
        let keep = ((members.len() as f64 * semi.labeled_fraction).round() as usize).clamp(2.min(members.len()), members.len());
        if keep < members.len() {
            members.shuffle(&mut rng);
        }
        labeled.extend_from_slice(&members[..keep]);
        unlabeled.extend_from_slice(&members[keep..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    if !semi.use_unlabeled {
        unlabeled.clear();
    }
    (labeled, unlabeled)
}

fn run(
    mut student: EmbeddingNet,
    teacher: Option<&EmbeddingNet>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn EpochSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let split = dataset
        .split()
        .ok_or_else(|| Error::Data("dataset has no class split; apply split_classes_half first".into()))?;
    if let Some(t) = teacher {
        if t.config().input != student.config().input {
            return Err(Error::Config(format!(
                "teacher input {} differs from student input {}",
                t.config().input,
                student.config().input
            )));
        }
    }

    // Student-side view of the data.
    let degraded;
    let student_view: &Dataset = match &cfg.cross_quality {
        Some(spec) => {
            degraded = dataset.degraded(spec, cfg.seed ^ DEGRADE_STREAM)?;
            &degraded
        }
        None => dataset,
    };
    let student_is_degraded = cfg.cross_quality.is_some();

    let (labeled, unlabeled) = label_pools(dataset, &split.train, cfg);
    let pool = ClassPool::new(dataset.labels(), &labeled);
    let steps_per_epoch = if labeled.is_empty() {
        unlabeled.len().div_ceil(cfg.batch_size)
    } else {
        labeled.len().div_ceil(cfg.batch_size)
    };
    if steps_per_epoch == 0 && cfg.epochs > 0 {
        return Err(Error::Data("no training samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM);
    let mut state = OptimizerState::default();
    let mut log = MetricsLog::default();
    let mut audit = RoutingAudit::default();
    let adam = cfg.adam();
    let val_labels = dataset.labels_of(&split.validation);
    let val_inputs = if split.validation.is_empty() {
        None
    } else {
        Some(student_view.gather(&split.validation)?)
    };

    let gather = |indices: &[usize], for_teacher: bool, audit: &mut RoutingAudit| -> Result<Tensor> {
        if for_teacher {
            audit.teacher_clean += 1;
            dataset.gather(indices)
        } else if student_is_degraded {
            audit.student_degraded += 1;
            student_view.gather(indices)
        } else {
            audit.student_clean += 1;
            dataset.gather(indices)
        }
    };

    let uses_teacher = teacher.is_some()
        && (cfg.mode != DistillMode::Baseline || cfg.use_hint || cfg.use_attention);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut sum = StepRecord::default();
        for _ in 0..steps_per_epoch {
            let labeled_batch = if labeled.is_empty() {
                None
            } else {
                let idx = make_batch(&pool, cfg.batch_size, cfg.classes_per_batch, &mut rng)?;
                let student_input = gather(&idx, false, &mut audit)?;
                let teacher_input = if uses_teacher {
                    gather(&idx, true, &mut audit)?
                } else {
                    student_input.clone()
                };
                Some(LabeledBatch {
                    student_input,
                    teacher_input,
                    labels: dataset.labels_of(&idx),
                })
            };
            let unlabeled_batch = if unlabeled.len() >= 2 {
                let idx = sample_indices(&unlabeled, cfg.batch_size, &mut rng);
                Some(UnlabeledBatch {
                    student_input: gather(&idx, false, &mut audit)?,
                    teacher_input: gather(&idx, true, &mut audit)?,
                })
            } else {
                None
            };

            let ctx = StepContext {
                student: &student,
                teacher,
                config: cfg,
            };
            let step = semi_supervised_step(&ctx, labeled_batch.as_ref(), unlabeled_batch.as_ref())?;
            adam_step(student.params_mut(), &step.grads, &mut state, &adam)?;
            sum.accumulate(&step.record);
            log.steps.push(step.record);
        }

        let n = steps_per_epoch as f64;
        let val_recall_at_1 = match &val_inputs {
            Some(inputs) => {
                let emb = student.embed_all(inputs)?;
                recall_at_k(&emb, &val_labels, &[1])?.recall(1)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: StepRecord {
                total: sum.total / n,
                ml: sum.ml / n,
                kd: sum.kd / n,
                hint: sum.hint / n,
                at: sum.at / n,
            },
            val_recall_at_1,
            wall_ms: started.elapsed().as_millis(),
        };
        if let Some(r) = val_recall_at_1 {
            let best = log
                .best_epoch
                .and_then(|b| log.epochs[b - 1].val_recall_at_1)
                .unwrap_or(f64::NEG_INFINITY);
            if r > best {
                log.best_epoch = Some(epoch);
            }
        }
        sink.record(&record)?;
        log.epochs.push(record);
    }

    Ok(TrainOutcome {
        net: student,
        log,
        audit,
    })
}
