//! Unsupervised image classification: argmax pseudo-labels from the
//! network's own softmax on augmented views, alternated with class-balanced
//! supervised epochs.
//!
//! With label reuse (the default) the labels for epoch `e + 1` are the
//! argmax of the logits computed in the training forward pass of epoch `e`,
//! so no separate labeling pass is needed after the bootstrap.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_into, center_eval_into, AugmentPolicy, View};
use crate::dataset::{class_balanced_batches, Dataset, LabelAssignment};
use crate::encoder::{BatchGrads, EncoderState};
use crate::error::{Error, Result};
use crate::eval::{nmi, partition_stats};
use crate::optim::{linear_decay_lr, sgd_step, SgdConfig};
use crate::parallel::Parallelism;
use crate::rng::{tags, Rng};
use crate::tensor::{self, Tensor};

/// Samples per forward/backward work unit. Gradients of a batch are summed
/// chunk by chunk in this granularity whatever the thread count.
pub const MICRO_BATCH: usize = 32;
/// Samples per forward pass when only logits or embeddings are needed.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UicConfig {
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// t1: view used to generate labels.
    pub policy_label: AugmentPolicy,
    /// t2: view used for training.
    pub policy_train: AugmentPolicy,
    /// When false, labels come from the deterministic center-crop view.
    pub label_aug_enabled: bool,
    /// Reuse the argmax of the training forward pass as next epoch's labels.
    /// Without reuse (or with labeling augmentation disabled) a separate
    /// labeling pass runs every epoch.
    pub label_reuse: bool,
    pub fft_epochs: usize,
    pub seed: u64,
}

impl Default for UicConfig {
    fn default() -> Self {
        UicConfig {
            k: 30,
            epochs: 200,
            batch_size: 128,
            sgd: SgdConfig::default(),
            policy_label: AugmentPolicy::default(),
            policy_train: AugmentPolicy::default(),
            label_aug_enabled: true,
            label_reuse: true,
            fft_epochs: 0,
            seed: 0,
        }
    }
}

impl UicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config("k >= 2 required".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs >= 1 required".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size >= 1 required".into()));
        }
        self.sgd.validate()?;
        self.policy_label.validate()?;
        self.policy_train.validate()?;
        Ok(())
    }

    fn label_view(&self) -> View<'_> {
        if self.label_aug_enabled {
            View::Augmented(&self.policy_label)
        } else {
            View::CenterEval
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Fft,
}

/// Metrics of one epoch, describing the labels that epoch produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_loss: f64,
    /// NMI between the labels produced by this epoch and the labels it
    /// trained on.
    pub nmi_vs_prev: f64,
    pub nmi_vs_truth: Option<f64>,
    pub partition_entropy: f64,
    pub empty_class_fixes: usize,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub trace: Vec<EpochTrace>,
    /// Labels after the last epoch (post-repair).
    pub labels: LabelAssignment,
    pub encoder: EncoderState,
}

impl TrainingRun {
    pub fn final_trace(&self) -> &EpochTrace {
        self.trace.last().expect("at least one epoch")
    }

    /// Mean wall time of the main-phase epochs.
    pub fn mean_epoch_seconds(&self) -> f64 {
        let main: Vec<f64> = self
            .trace
            .iter()
            .filter(|t| t.phase == Phase::Main)
            .map(|t| t.wall_seconds)
            .collect();
        main.iter().sum::<f64>() / main.len().max(1) as f64
    }
}

/// Network inputs for `indices`, one view per position. `rng_for(pos)`
/// supplies the stream of the view at batch position `pos`.
pub fn render_views(
    dataset: &Dataset,
    indices: &[usize],
    view: View<'_>,
    rng_for: impl Fn(usize) -> Rng,
) -> Tensor {
    let shape = dataset.image_shape();
    let mut batch = Tensor::zeros(&[indices.len(), shape.channels, shape.height, shape.width]);
    for (pos, &i) in indices.iter().enumerate() {
        match view {
            View::Augmented(policy) => {
                let mut r = rng_for(pos);
                augment_into(dataset.image(i), shape, policy, &mut r, batch.row_mut(pos));
            }
            View::CenterEval => center_eval_into(dataset.image(i), shape, batch.row_mut(pos)),
        }
    }
    batch
}

/// Argmax labels of every sample under `view`. Sample `i` is augmented with
/// the stream `rng.derive(&[i])`.
pub fn generate_pseudo_labels(
    dataset: &Dataset,
    encoder: &EncoderState,
    view: View<'_>,
    rng: &Rng,
    epoch: usize,
    par: &Parallelism,
) -> Result<LabelAssignment> {
    let k = encoder.config().num_classes;
    let n = dataset.len();
    let chunks = n.div_ceil(INFERENCE_CHUNK);
    let parts = par.map(chunks, |c| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (c * INFERENCE_CHUNK..((c + 1) * INFERENCE_CHUNK).min(n)).collect();
        let batch = render_views(dataset, &idx, view, |pos| rng.derive(&[idx[pos] as u64]));
        let logits = encoder.logits(&batch)?;
        Ok((0..logits.rows())
            .map(|r| tensor::argmax(logits.row(r)))
            .collect())
    });
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend(p?);
    }
    LabelAssignment::new(labels, k, epoch)
}

/// Repair empty classes: while some class is empty, split the largest class
/// (ties: lowest index) into two random halves and move the smaller half
/// (`floor(size / 2)` samples) to the lowest-index empty class. Returns the
/// repaired assignment and the number of splits.
pub fn fix_empty_classes(
    mut assignment: LabelAssignment,
    rng: &mut Rng,
) -> Result<(LabelAssignment, usize)> {
    let k = assignment.k();
    if k < 2 {
        return Err(Error::invalid("empty-class repair needs k >= 2"));
    }
    if assignment.len() < k {
        return Err(Error::invalid(format!(
            "cannot fill {k} classes with {} samples",
            assignment.len()
        )));
    }
    let mut fixes = 0;
    loop {
        let counts = assignment.counts();
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let largest = (0..k).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
        let mut members: Vec<usize> = assignment
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == largest)
            .map(|(i, _)| i)
            .collect();
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), rng);
        let moved = members.len() / 2;
        let labels = assignment.labels_mut();
        for &i in &members[..moved] {
            labels[i] = empty;
        }
        fixes += 1;
    }
    Ok((assignment, fixes))
}

/// Summed gradients of `scale × loss` over one batch, computed in
/// [`MICRO_BATCH`] chunks combined in order.
pub fn batch_gradients(
    encoder: &EncoderState,
    targets: &[usize],
    views: &Tensor,
    scale: f64,
    par: &Parallelism,
) -> Result<BatchGrads> {
    let n = targets.len();
    if views.rows() != n {
        return Err(Error::Shape(format!(
            "{} views for {n} targets",
            views.rows()
        )));
    }
    let chunks = n.div_ceil(MICRO_BATCH);
    let row = views.row_len();
    let parts = par.map(chunks, |c| {
        let lo = c * MICRO_BATCH;
        let hi = ((c + 1) * MICRO_BATCH).min(n);
        let mut shape = views.shape().to_vec();
        shape[0] = hi - lo;
        let chunk = Tensor::from_vec(&shape, views.data()[lo * row..hi * row].to_vec())?;
        encoder.loss_and_grads(&chunk, &targets[lo..hi], scale)
    });
    let mut total: Option<BatchGrads> = None;
    for part in parts {
        let part = part?;
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => {
                t.loss_sum += part.loss_sum;
                for (acc, g) in t.grads.iter_mut().zip(&part.grads) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
                t.argmax.extend(part.argmax);
                t.fingerprint ^= part.fingerprint.rotate_left(7);
            }
        }
    }
    total.ok_or_else(|| Error::invalid("empty batch"))
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub mean_loss: f64,
    /// Argmax of every sample's most recent training forward pass; samples
    /// not drawn this epoch keep their previous label.
    pub next_labels: LabelAssignment,
    pub batches: usize,
}

/// One class-balanced supervised epoch on `policy_train` views. The view at
/// position `j` of batch `b` uses the stream `rng.derive(&[TRAIN_AUG, b, j])`.
pub fn train_epoch(
    dataset: &Dataset,
    assignment: &LabelAssignment,
    encoder: &mut EncoderState,
    policy_train: &AugmentPolicy,
    batch_size: usize,
    sgd: &SgdConfig,
    rng: &Rng,
    par: &Parallelism,
) -> Result<EpochOutcome> {
    if assignment.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} samples",
            assignment.len(),
            dataset.len()
        )));
    }
    let sampler = class_balanced_batches(assignment, batch_size, rng.derive(&[tags::SAMPLER]))?;
    let mut next = assignment.labels().to_vec();
    let mut loss_total = 0.0;
    let mut draws = 0usize;
    let mut batches = 0usize;
    for (b, indices) in sampler.enumerate() {
        let targets: Vec<usize> = indices.iter().map(|&i| assignment.labels()[i]).collect();
        let views = render_views(dataset, &indices, View::Augmented(policy_train), |pos| {
            rng.derive(&[tags::TRAIN_AUG, b as u64, pos as u64])
        });
        let scale = 1.0 / indices.len() as f64;
        let out = batch_gradients(encoder, &targets, &views, scale, par)?;
        if !out.loss_sum.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: b,
                lr: sgd.lr,
            });
        }
        for (&i, &l) in indices.iter().zip(&out.argmax) {
            next[i] = l;
        }
        let params = encoder.params_mut();
        for (p, g) in params.iter_mut().zip(&out.grads) {
            p.grad.data_mut().copy_from_slice(g.data());
        }
        sgd_step(params, sgd)?;
        loss_total += out.loss_sum;
        draws += indices.len();
        batches += 1;
    }
    Ok(EpochOutcome {
        mean_loss: loss_total / draws.max(1) as f64,
        next_labels: LabelAssignment::new(next, assignment.k(), assignment.epoch_of_origin() + 1)?,
        batches,
    })
}

/// Gradients of one batch in fused form: labels are the argmax on the `t1`
/// views, the loss is taken on the `t2` views, all with the same parameters.
pub fn fused_contrastive_gradients(
    encoder: &EncoderState,
    t1_views: &Tensor,
    t2_views: &Tensor,
    par: &Parallelism,
) -> Result<BatchGrads> {
    let logits = encoder.logits(t1_views)?;
    let targets: Vec<usize> = (0..logits.rows())
        .map(|r| tensor::argmax(logits.row(r)))
        .collect();
    let scale = 1.0 / targets.len().max(1) as f64;
    batch_gradients(encoder, &targets, t2_views, scale, par)
}

pub(crate) fn epoch_metrics(
    labels: &LabelAssignment,
    previous: &LabelAssignment,
    truth: Option<&[usize]>,
) -> Result<(f64, Option<f64>, f64)> {
    let vs_prev = nmi(labels.labels(), previous.labels())?;
    let vs_truth = truth.map(|t| nmi(labels.labels(), t)).transpose()?;
    let entropy = partition_stats(labels)?.normalized_entropy;
    Ok((vs_prev, vs_truth, entropy))
}

fn check_encoder(encoder: &EncoderState, dataset: &Dataset, k: usize) -> Result<()> {
    if encoder.config().num_classes != k {
        return Err(Error::Config(format!(
            "encoder emits {} classes but k = {k}",
            encoder.config().num_classes
        )));
    }
    if encoder.config().input_shape != dataset.image_shape() {
        return Err(Error::Config(format!(
            "encoder input {:?} does not match dataset images {:?}",
            encoder.config().input_shape,
            dataset.image_shape()
        )));
    }
    Ok(())
}

/// Run the full alternation on `dataset`, starting from `encoder`.
///
/// Epoch 0 labels come from a labeling pass over the initial network. Each
/// epoch trains on the current (repaired) labels and produces the next
/// labels, which are repaired immediately. Afterwards, `fft_epochs` further
/// epochs train on labels frozen from one center-crop labeling pass.
pub fn run_uic(
    dataset: &Dataset,
    mut encoder: EncoderState,
    config: &UicConfig,
    par: &Parallelism,
) -> Result<TrainingRun> {
    config.validate()?;
    check_encoder(&encoder, dataset, config.k)?;
    let root = Rng::new(config.seed);
    let truth = dataset.truth();

    let bootstrap = generate_pseudo_labels(
        dataset,
        &encoder,
        config.label_view(),
        &root.derive(&[tags::LABEL_AUG, 0]),
        0,
        par,
    )?;
    let (mut labels, mut pending_fixes) =
        fix_empty_classes(bootstrap, &mut root.derive(&[tags::REPAIR, 0]))?;
    let reuse = config.label_reuse && config.label_aug_enabled;
    let mut trace = Vec::with_capacity(config.epochs + config.fft_epochs);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = linear_decay_lr(config.sgd.lr, epoch, config.epochs);
        let outcome = train_epoch(
            dataset,
            &labels,
            &mut encoder,
            &config.policy_train,
            config.batch_size,
            &config.sgd.with_lr(lr),
            &root.derive(&[tags::TRAIN_AUG, epoch as u64]),
            par,
        )?;
        let raw_next = if reuse {
            outcome.next_labels
        } else {
            generate_pseudo_labels(
                dataset,
                &encoder,
                config.label_view(),
                &root.derive(&[tags::LABEL_AUG, epoch as u64 + 1]),
                epoch + 1,
                par,
            )?
        };
        let (mut next, fixes) = fix_empty_classes(
            raw_next,
            &mut root.derive(&[tags::REPAIR, epoch as u64 + 1]),
        )?;
        next.set_epoch_of_origin(epoch + 1);
        let (nmi_vs_prev, nmi_vs_truth, partition_entropy) = epoch_metrics(&next, &labels, truth)?;
        let row = EpochTrace {
            epoch,
            phase: Phase::Main,
            mean_loss: outcome.mean_loss,
            nmi_vs_prev,
            nmi_vs_truth,
            partition_entropy,
            empty_class_fixes: fixes + pending_fixes,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "uic epoch {epoch}: loss {:.4} nmi/prev {:.3} nmi/truth {} entropy {:.3} fixes {}",
            row.mean_loss,
            row.nmi_vs_prev,
            row.nmi_vs_truth.map_or("-".into(), |v| format!("{v:.3}")),
            row.partition_entropy,
            row.empty_class_fixes
        );
        trace.push(row);
        pending_fixes = 0;
        labels = next;
    }

    if config.fft_epochs > 0 {
        run_fft(
            dataset,
            &mut encoder,
            &mut labels,
            &mut trace,
            config,
            &root,
            par,
        )?;
    }

    Ok(TrainingRun {
        trace,
        labels,
        encoder,
    })
}

/// Further fine-tuning on labels frozen from one center-crop labeling pass.
pub(crate) fn run_fft(
    dataset: &Dataset,
    encoder: &mut EncoderState,
    labels: &mut LabelAssignment,
    trace: &mut Vec<EpochTrace>,
    config: &UicConfig,
    root: &Rng,
    par: &Parallelism,
) -> Result<()> {
    let started = Instant::now();
    let frozen_raw = generate_pseudo_labels(
        dataset,
        encoder,
        View::CenterEval,
        &root.derive(&[tags::LABEL_AUG, u64::MAX]),
        config.epochs,
        par,
    )?;
    let (frozen, mut pending_fixes) =
        fix_empty_classes(frozen_raw, &mut root.derive(&[tags::REPAIR, u64::MAX]))?;
    let mut freeze_seconds = started.elapsed().as_secs_f64();
    let (vs_prev, vs_truth, entropy) = epoch_metrics(&frozen, labels, dataset.truth())?;
    let mut nmi_vs_prev = vs_prev;
    for f in 0..config.fft_epochs {
        let started = Instant::now();
        let epoch = config.epochs + f;
        let lr = linear_decay_lr(config.sgd.lr, f, config.fft_epochs);
        let outcome = train_epoch(
            dataset,
            &frozen,
            encoder,
            &config.policy_train,
            config.batch_size,
            &config.sgd.with_lr(lr),
            &root.derive(&[tags::TRAIN_AUG, epoch as u64]),
            par,
        )?;
        trace.push(EpochTrace {
            epoch,
            phase: Phase::Fft,
            mean_loss: outcome.mean_loss,
            nmi_vs_prev,
            nmi_vs_truth: vs_truth,
            partition_entropy: entropy,
            empty_class_fixes: pending_fixes,
            lr,
            wall_seconds: started.elapsed().as_secs_f64() + freeze_seconds,
        });
        nmi_vs_prev = 1.0;
        pending_fixes = 0;
        freeze_seconds = 0.0;
    }
    *labels = frozen;
    Ok(())
}
