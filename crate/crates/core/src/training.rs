//! Margin-entropy training of leave-out classifiers.
//!
//! Each classifier sees its retained classes as labelled ID data and the
//! left-out part as unlabelled OOD data. Every SGD step draws one ID and one
//! OOD minibatch; after every epoch the model is validated and the final
//! model is the epoch with the lowest validation OOD error among epochs whose
//! accuracy is within `delta` points of the best.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::data::{self, leaveout_view, ClassPartition, ImageShape, LabeledDataset, LeaveOutView};
use crate::detection::{classifier_ood_score, ScoreVariant};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{Checkpoint, MlpClassifier, DEFAULT_HIDDEN};
use crate::tensor::Tensor;

/// Detector temperature used when scoring validation data for checkpointing.
pub const VALIDATION_TEMPERATURE: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossVariant {
    /// Cross-entropy with OOD samples assigned to an extra reject class.
    Sfx,
    /// Cross-entropy plus the unbounded ID-minus-OOD mean entropy difference.
    MaxEntropyDiff,
    /// Cross-entropy plus the margin hinge on the entropy gap.
    MarginEntropy,
}

impl LossVariant {
    pub const ALL: [LossVariant; 3] = [Self::Sfx, Self::MaxEntropyDiff, Self::MarginEntropy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sfx => "sfx",
            Self::MaxEntropyDiff => "max-entropy-diff",
            Self::MarginEntropy => "margin-entropy",
        }
    }

    /// Extra outputs the head needs beyond the retained classes.
    pub fn extra_outputs(self) -> usize {
        usize::from(self == Self::Sfx)
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss `{s}`; expected sfx, max-entropy-diff or margin-entropy"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub margin: f64,
    pub beta: f64,
    /// Accuracy bound for checkpoint selection, in percentage points.
    pub delta: f64,
    pub loss_variant: LossVariant,
    pub hidden: Vec<usize>,
    /// Crop padding for image-shaped data.
    pub augment_pad: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 100,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_start: 0.1,
            lr_end: 0.0001,
            margin: 0.4,
            beta: 1.0,
            delta: 2.0,
            loss_variant: LossVariant::MarginEntropy,
            hidden: DEFAULT_HIDDEN.to_vec(),
            augment_pad: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.margin >= 0.0) || !(self.beta >= 0.0) || !(self.delta >= 0.0) {
            return bad(format!(
                "margin, beta and delta must be nonnegative (got {}, {}, {})",
                self.margin, self.beta, self.delta
            ));
        }
        if !(self.lr_end > 0.0) || !(self.lr_start >= self.lr_end) {
            return bad(format!(
                "need lr_start >= lr_end > 0, got {} -> {}",
                self.lr_start, self.lr_end
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad(format!(
                "momentum must be in [0,1) and weight_decay nonnegative (got {}, {})",
                self.momentum, self.weight_decay
            ));
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    /// Learning rate at `step` of `total_steps`, linear from `lr_start` to
    /// `lr_end` (the last step uses exactly `lr_end`).
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.lr_end;
        }
        let frac = step as f64 / (total_steps - 1) as f64;
        if step + 1 >= total_steps {
            self.lr_end
        } else {
            self.lr_start + (self.lr_end - self.lr_start) * frac
        }
    }
}

/// Cross-entropy over ID rows plus `β·max(m + mean H(id) − mean H(ood), 0)`.
pub fn margin_entropy_loss(
    tape: &mut Tape,
    id_probs: Var,
    labels: &[usize],
    ood_probs: Var,
    margin: f64,
    beta: f64,
) -> Result<Var> {
    let ce = tape.nll(id_probs, labels)?;
    let gap = entropy_gap(tape, id_probs, ood_probs)?;
    let shifted = tape.add_scalar(gap, margin);
    let hinge = tape.relu(shifted);
    let weighted = tape.scale(hinge, beta);
    tape.add(ce, weighted)
}

/// `mean H(id) − mean H(ood)` as a scalar node.
fn entropy_gap(tape: &mut Tape, id_probs: Var, ood_probs: Var) -> Result<Var> {
    if tape.value(ood_probs).rows() == 0 {
        return Err(Error::Contract(
            "entropy terms need at least one OOD sample".into(),
        ));
    }
    let h_id = tape.entropy(id_probs)?;
    let h_ood = tape.entropy(ood_probs)?;
    let mean_id = tape.mean(h_id);
    let mean_ood = tape.mean(h_ood);
    tape.sub(mean_id, mean_ood)
}

/// Cross-entropy plus `β·(mean H(id) − mean H(ood))`.
pub fn max_entropy_diff_loss(
    tape: &mut Tape,
    id_probs: Var,
    labels: &[usize],
    ood_probs: Var,
    beta: f64,
) -> Result<Var> {
    let ce = tape.nll(id_probs, labels)?;
    let gap = entropy_gap(tape, id_probs, ood_probs)?;
    let weighted = tape.scale(gap, beta);
    tape.add(ce, weighted)
}

/// Cross-entropy over ID ∪ OOD rows with OOD rows labelled `reject_class`.
pub fn sfx_loss(
    tape: &mut Tape,
    id_probs: Option<(Var, &[usize])>,
    ood_probs: Option<Var>,
    reject_class: usize,
) -> Result<Var> {
    let mut terms = Vec::new();
    if let Some((p, labels)) = id_probs {
        terms.push((tape.nll(p, labels)?, labels.len()));
    }
    if let Some(p) = ood_probs {
        let n = tape.value(p).rows();
        if n > 0 {
            terms.push((tape.nll(p, &vec![reject_class; n])?, n));
        }
    }
    let total: usize = terms.iter().map(|t| t.1).sum();
    if total == 0 {
        return Err(Error::Contract("SFX loss needs at least one sample".into()));
    }
    let mut acc: Option<Var> = None;
    for (term, n) in terms {
        let weighted = tape.scale(term, n as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => tape.add(a, weighted)?,
            None => weighted,
        });
    }
    Ok(acc.expect("at least one term"))
}

/// Evaluates `variant` on one ID/OOD minibatch pair of softmax outputs.
/// `head_width` is the classifier's output width.
pub fn loss_variant_eval(
    tape: &mut Tape,
    variant: LossVariant,
    id_probs: Var,
    labels: &[usize],
    ood_probs: Var,
    retained_classes: usize,
    cfg: &TrainConfig,
) -> Result<Var> {
    let head_width = tape.value(id_probs).cols();
    if head_width != retained_classes + variant.extra_outputs() {
        return Err(Error::Config(format!(
            "{variant} needs a head of {} outputs, model has {head_width}",
            retained_classes + variant.extra_outputs()
        )));
    }
    match variant {
        LossVariant::Sfx => sfx_loss(tape, Some((id_probs, labels)), Some(ood_probs), retained_classes),
        LossVariant::MaxEntropyDiff => max_entropy_diff_loss(tape, id_probs, labels, ood_probs, cfg.beta),
        LossVariant::MarginEntropy => {
            margin_entropy_loss(tape, id_probs, labels, ood_probs, cfg.margin, cfg.beta)
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("sgd_step", &[params.len()], &[grads.len()]));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.shape() != g.shape() || v.len() != p.len() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
        for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vel = momentum * *vel + (grad + weight_decay * *theta);
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// Validation outcome of one epoch, with the (f32-rounded) model snapshot.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub accuracy: f64,
    pub ood_error: f64,
    pub model: MlpClassifier,
}

/// Index of the epoch with the lowest `ood_error` among those whose accuracy
/// is at least `max accuracy − delta`; ties go to the later epoch.
pub fn select_checkpoint(history: &[EpochRecord], delta: f64) -> Option<usize> {
    let best_acc = history.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    let mut chosen: Option<usize> = None;
    for (i, r) in history.iter().enumerate() {
        if r.accuracy < best_acc - delta {
            continue;
        }
        if chosen.map_or(true, |c| r.ood_error <= history[c].ood_error) {
            chosen = Some(i);
        }
    }
    chosen
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub part_index: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_ood_error: f64,
    pub lr: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str = "part_index,epoch,train_loss,val_accuracy,val_ood_error,lr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.9},{:.6},{:.6},{:.9}",
            self.part_index, self.epoch, self.train_loss, self.val_accuracy, self.val_ood_error, self.lr
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainedClassifier {
    pub model: MlpClassifier,
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Cycles through OOD rows in reshuffled passes.
struct CyclingSampler {
    order: Vec<usize>,
    pos: usize,
}

impl CyclingSampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// What a single training run optimizes against.
struct TrainingTask<'a> {
    id: &'a LabeledDataset,
    /// Unlabelled OOD rows; `None` trains with cross-entropy only.
    ood: Option<&'a Tensor>,
    local_map: Vec<usize>,
    part_index: usize,
    class_count: usize,
    k: usize,
    image_shape: Option<ImageShape>,
}

/// Validation accuracy (%) and FPR at 95% TPR (%) of one classifier.
pub fn validate_classifier(
    model: &MlpClassifier,
    val_id: &LabeledDataset,
    val_ood: &Tensor,
) -> Result<(f64, f64)> {
    let accuracy = metrics::cls_accuracy(&model.predict_local(&val_id.features)?, &val_id.labels)?;
    let variant = ScoreVariant::SoftmaxPlusEntropyAtTemp;
    let id_scores = classifier_ood_score(model, &val_id.features, VALIDATION_TEMPERATURE, variant)?;
    let ood_scores = classifier_ood_score(model, val_ood, VALIDATION_TEMPERATURE, variant)?;
    Ok((accuracy, metrics::fpr_at_95_tpr(&id_scores, &ood_scores)?))
}

fn run_training(
    task: TrainingTask<'_>,
    val_id: &LabeledDataset,
    val_ood: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if task.id.is_empty() || task.ood.is_some_and(|o| o.rows() == 0) {
        return Err(Error::Config(format!(
            "leave-out view {} has an empty ID or OOD side",
            task.part_index
        )));
    }
    if val_id.is_empty() || val_ood.rows() == 0 {
        return Err(Error::Config("validation ID and OOD sets must be nonempty".into()));
    }
    let variant = task.ood.map(|_| cfg.loss_variant);
    let retained = task.local_map.len();
    let extra = variant.map_or(0, LossVariant::extra_outputs);
    let mut dims = vec![task.id.dim()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(retained + extra);

    let mut model = MlpClassifier::init(&dims, task.local_map.clone(), task.part_index, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut ood_sampler = task.ood.map(|o| CyclingSampler::new(o.rows(), &mut rng));
    let mut state = SgdState::new();

    let steps_per_epoch = task.id.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut history = Vec::with_capacity(cfg.epochs.max(1));
    let mut log = Vec::with_capacity(cfg.epochs.max(1));

    if cfg.epochs == 0 {
        let snapshot = model.quantized();
        let (accuracy, ood_error) = validate_classifier(&snapshot, val_id, val_ood)?;
        log.push(TrainLogRow {
            part_index: task.part_index,
            epoch: 0,
            train_loss: f64::NAN,
            val_accuracy: accuracy,
            val_ood_error: ood_error,
            lr: cfg.lr_start,
        });
        history.push(EpochRecord {
            epoch: 0,
            accuracy,
            ood_error,
            model: snapshot,
        });
    }

    let mut order: Vec<usize> = (0..task.id.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_start;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cfg.lr_at(step, total_steps);
            let mut x_id = task.id.features.select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| task.id.labels[i]).collect();
            let mut x_ood = match (task.ood, ood_sampler.as_mut()) {
                (Some(o), Some(sampler)) => Some(o.select_rows(&sampler.next(chunk.len(), &mut rng))),
                _ => None,
            };
            if task.image_shape.is_some() {
                let aug_seed = rand::Rng::gen::<u64>(&mut rng);
                x_id = data::augment(&x_id, task.image_shape, cfg.augment_pad, aug_seed);
                x_ood = x_ood.map(|o| data::augment(&o, task.image_shape, cfg.augment_pad, aug_seed ^ 1));
            }

            let mut tape = Tape::new();
            let params = model.register_params(&mut tape);
            let xi = tape.constant(x_id);
            let logits_id = model.forward_tape(&mut tape, &params, xi)?;
            let p_id = tape.softmax_temp(logits_id, 1.0)?;
            let loss = match (variant, x_ood) {
                (Some(v), Some(x_ood)) => {
                    let xo = tape.constant(x_ood);
                    let logits_ood = model.forward_tape(&mut tape, &params, xo)?;
                    let p_ood = tape.softmax_temp(logits_ood, 1.0)?;
                    loss_variant_eval(&mut tape, v, p_id, &labels, p_ood, retained, cfg)?
                }
                _ => tape.nll(p_id, &labels)?,
            };
            loss_sum += tape.value(loss).item() * chunk.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<&Tensor> = params
                .0
                .iter()
                .map(|&v| tape.grad(v).expect("parameters are on the loss path"))
                .collect();
            sgd_step(
                &mut model.params_mut(),
                &grads,
                &mut state,
                lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            step += 1;
        }
        let snapshot = model.quantized();
        let (accuracy, ood_error) = validate_classifier(&snapshot, val_id, val_ood)?;
        log.push(TrainLogRow {
            part_index: task.part_index,
            epoch,
            train_loss: loss_sum / task.id.len() as f64,
            val_accuracy: accuracy,
            val_ood_error: ood_error,
            lr,
        });
        history.push(EpochRecord {
            epoch,
            accuracy,
            ood_error,
            model: snapshot,
        });
    }

    let chosen = &history[select_checkpoint(&history, cfg.delta).expect("history is nonempty")];
    let checkpoint = Checkpoint::new(&chosen.model, task.class_count, task.k)
        .with_meta("epoch", chosen.epoch)
        .with_meta("accuracy", format!("{:.6}", chosen.accuracy))
        .with_meta("ood_error", format!("{:.6}", chosen.ood_error))
        .with_meta("seed", cfg.seed)
        .with_meta(
            "loss",
            variant.map_or("cross-entropy", LossVariant::name),
        );
    Ok(TrainedClassifier {
        model: chosen.model.clone(),
        checkpoint,
        log,
    })
}

/// Trains one leave-out classifier. `val_id` must use the view's local labels.
pub fn train_leaveout_classifier(
    view: &LeaveOutView,
    val_id: &LabeledDataset,
    val_ood: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    let task = TrainingTask {
        id: &view.id_data,
        ood: Some(&view.ood_data),
        local_map: view.local_map.clone(),
        part_index: view.part_index,
        class_count: view.class_count,
        k: view.k,
        image_shape: view.id_data.image_shape,
    };
    run_training(task, val_id, val_ood, cfg)
}

/// Trains an all-class classifier with cross-entropy only: the single-model
/// baseline. Checkpoint selection uses the same validation rule.
pub fn train_plain_classifier(
    train: &LabeledDataset,
    val: &LabeledDataset,
    val_ood: &Tensor,
    cfg: &TrainConfig,
) -> Result<TrainedClassifier> {
    let task = TrainingTask {
        id: train,
        ood: None,
        local_map: (0..train.class_count).collect(),
        part_index: 0,
        class_count: train.class_count,
        k: 1,
        image_shape: train.image_shape,
    };
    run_training(task, val, val_ood, cfg)
}

/// Trains all K leave-out classifiers; classifier `i` uses seed `cfg.seed + i`
/// so results do not depend on `parallel`.
pub fn train_ensemble(
    train: &LabeledDataset,
    val: &LabeledDataset,
    partition: &ClassPartition,
    val_ood: &Tensor,
    cfg: &TrainConfig,
    parallel: bool,
) -> Result<Vec<TrainedClassifier>> {
    cfg.validate()?;
    let run = |i: usize| -> Result<TrainedClassifier> {
        let view = leaveout_view(train, partition, i)?;
        let val_view = leaveout_view(val, partition, i)?;
        let cfg_i = TrainConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        train_leaveout_classifier(&view, &val_view.id_data, val_ood, &cfg_i)
    };
    if parallel {
        (0..partition.k()).into_par_iter().map(run).collect()
    } else {
        (0..partition.k()).map(run).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn hand_evaluated_margin_loss() {
        let mut tape = Tape::new();
        let id = probs(&mut tape, &[vec![0.5, 0.5]]);
        let ood = probs(&mut tape, &[vec![0.5, 0.5]]);
        let loss = margin_entropy_loss(&mut tape, id, &[0], ood, 0.4, 1.0).unwrap();
        let expected = 2f64.ln() + 0.4;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
        assert!((tape.value(loss).item() - 1.0931).abs() < 1e-4);
    }

    #[test]
    fn confident_id_and_uniform_ood_cost_nothing() {
        let mut tape = Tape::new();
        let id = probs(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let ood = probs(&mut tape, &[vec![1.0 / 3.0; 3]]);
        let loss = margin_entropy_loss(&mut tape, id, &[0, 2], ood, 0.4, 1.0).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);
    }

    #[test]
    fn margin_needs_ood_rows() {
        let mut tape = Tape::new();
        let id = probs(&mut tape, &[vec![0.5, 0.5]]);
        let ood = tape.constant(Tensor::matrix(0, 2, vec![]).unwrap());
        let err = margin_entropy_loss(&mut tape, id, &[0], ood, 0.4, 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let err = margin_entropy_loss(&mut tape, id, &[5], id, 0.4, 1.0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn head_mismatch_is_a_config_error() {
        let mut tape = Tape::new();
        let id = probs(&mut tape, &[vec![0.5, 0.5]]);
        let cfg = TrainConfig::default();
        let err = loss_variant_eval(&mut tape, LossVariant::Sfx, id, &[0], id, 2, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sfx_on_ood_only_is_reject_cross_entropy() {
        let mut tape = Tape::new();
        let ood = probs(&mut tape, &[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]]);
        let loss = sfx_loss(&mut tape, None, Some(ood), 2).unwrap();
        let expected = -(0.5f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn plain_gradient_descent_without_momentum() {
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let mut state = SgdState::new();
        sgd_step(&mut [&mut p], &[&g], &mut state, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);

        let zero = Tensor::zeros(&[2]);
        let before = p.clone();
        sgd_step(&mut [&mut p], &[&zero], &mut SgdState::new(), 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, before);

        let wrong = Tensor::zeros(&[3]);
        assert!(sgd_step(&mut [&mut p], &[&wrong], &mut SgdState::new(), 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 1000), 0.1);
        assert!((cfg.lr_at(999, 1000) - 0.0001).abs() < 1e-9);
        assert!(cfg.lr_at(500, 1000) < 0.1 && cfg.lr_at(500, 1000) > 0.0001);
    }

    fn record(epoch: usize, accuracy: f64, ood_error: f64) -> EpochRecord {
        EpochRecord {
            epoch,
            accuracy,
            ood_error,
            model: MlpClassifier::init(&[1, 1], vec![0], 0, 0).unwrap(),
        }
    }

    #[test]
    fn checkpoint_rule_hand_trace() {
        let h = vec![record(1, 80.0, 30.0), record(2, 79.0, 10.0), record(3, 70.0, 5.0)];
        assert_eq!(h[select_checkpoint(&h, 2.0).unwrap()].epoch, 2);
        assert_eq!(h[select_checkpoint(&h, f64::INFINITY).unwrap()].epoch, 3);
        assert_eq!(select_checkpoint(&h[..1], 2.0), Some(0));
        assert_eq!(select_checkpoint(&[], 2.0), None);
        let tied = vec![record(1, 90.0, 5.0), record(2, 90.0, 5.0)];
        assert_eq!(select_checkpoint(&tied, 0.0), Some(1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            lr_end: 0.2,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            margin: -0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_names_parse() {
        for v in LossVariant::ALL {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        assert_eq!("MARGIN_ENTROPY".parse::<LossVariant>().unwrap(), LossVariant::MarginEntropy);
        assert!("hinge".parse::<LossVariant>().is_err());
    }
}
