//! Label-smoothed loss, SGD with momentum, synthetic gesture data,
//! accuracy metrics and a generic mini-batch training loop.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::graph::{reduced_indices, REDUCED_NODE_COUNT, REFERENCE_POSE};
use crate::keypoints::{DepthMap, KeypointSequence, WHOLE_BODY_LANDMARKS};
use crate::nn::{apply_norm_updates, Ctx, NORM_MOMENTUM};
use crate::numeric::kernels::log_softmax;
use crate::numeric::{NdArray, ParamStore, Tape, Var};

/// `(1 - eps) * onehot(y) + eps / K`.
pub fn smooth_labels(y: usize, classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if y >= classes {
        return Err(SlrError::Input(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(SlrError::Config(format!(
            "smoothing {epsilon} outside [0, 1)"
        )));
    }
    let u = epsilon / classes as f64;
    let mut d = vec![u; classes];
    d[y] = 1.0 - epsilon + u;
    Ok(d)
}

/// Smoothed target rows `[N, K]` for a batch of labels.
pub fn smoothed_targets(labels: &[usize], classes: usize, epsilon: f64) -> Result<NdArray> {
    let mut data = Vec::with_capacity(labels.len() * classes);
    for &y in labels {
        data.extend(smooth_labels(y, classes, epsilon)?);
    }
    NdArray::new(&[labels.len(), classes], data)
}

/// Cross-entropy of `softmax(logits)` against the smoothed label of `y`.
pub fn smoothed_ce(logits: &[f64], y: usize, epsilon: f64) -> Result<f64> {
    let q = smooth_labels(y, logits.len(), epsilon)?;
    let ls = log_softmax(logits);
    Ok(-q.iter().zip(&ls).map(|(q, l)| q * l).sum::<f64>())
}

/// Label-smoothed cross-entropy with `0 < epsilon < 1` and `K >= 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothedLoss {
    pub epsilon: f64,
    pub classes: usize,
}

impl SmoothedLoss {
    pub fn new(epsilon: f64, classes: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(SlrError::Config(format!(
                "label smoothing {epsilon} outside (0, 1)"
            )));
        }
        if classes < 2 {
            return Err(SlrError::Config("at least two classes are needed".into()));
        }
        Ok(SmoothedLoss { epsilon, classes })
    }

    /// Mean loss over the rows of `logits: [N, K]`.
    pub fn forward(&self, tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = tape.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[1] != self.classes {
            return Err(SlrError::dim(
                "smoothed_ce",
                s,
                &[labels.len(), self.classes],
            ));
        }
        let target = smoothed_targets(labels, self.classes, self.epsilon)?;
        tape.cross_entropy(logits, target)
    }
}

/// SGD with momentum and L2 weight decay:
/// `v <- m v + g + wd p`, `p <- p - lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<NdArray>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Velocity buffers indexed by parameter position (`None` = never stepped).
    pub fn velocities(&self) -> &[Option<NdArray>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, v: Vec<Option<NdArray>>) {
        self.velocity = v;
    }

    /// Update every trainable parameter from its gradient buffer.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable_ids().collect();
        for &id in &ids {
            let p = store.get(id);
            if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(SlrError::Numeric(format!(
                    "non-finite gradient in {} at element {i}",
                    p.name
                )));
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in ids {
            let p = store.get_mut(id);
            let v =
                self.velocity[id.index()].get_or_insert_with(|| NdArray::zeros(p.value.shape()));
            for ((v, &g), &w) in v
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(p.value.data())
            {
                *v = self.momentum * *v + g + self.weight_decay * w;
            }
            p.value.axpy(-lr, v);
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * frac).cos())
}

/// Parameters of the synthetic gesture generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticGestureSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    /// Gaussian noise on (x, y) in normalized `[-1, 1]` units.
    pub noise: f64,
    /// Peak hand displacement in normalized units.
    pub amplitude: f64,
    /// Square frame side in pixels.
    pub frame_size: f64,
    /// Also emit per-frame depth maps.
    pub depth: bool,
}

impl Default for SyntheticGestureSpec {
    fn default() -> Self {
        SyntheticGestureSpec {
            classes: 8,
            samples_per_class: 20,
            frames: 32,
            noise: 0.02,
            amplitude: 0.12,
            frame_size: 256.0,
            depth: false,
        }
    }
}

impl SyntheticGestureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.samples_per_class == 0 || self.frames < 2 {
            return Err(SlrError::Config(
                "synthetic data needs >= 2 classes, >= 1 sample per class and >= 2 frames".into(),
            ));
        }
        if !(self.noise >= 0.0
            && self.amplitude > 0.0
            && self.amplitude < 0.3
            && self.frame_size >= 8.0)
        {
            return Err(SlrError::Config(
                "noise must be >= 0, amplitude in (0, 0.3) and frame size >= 8".into(),
            ));
        }
        Ok(())
    }

    /// Class archetype: cycles per clip, phase, and dominant hand (0 left, 1 right).
    /// No two classes share the (frequency, hand) pair.
    pub fn archetype(&self, class: usize) -> (f64, f64, usize) {
        (
            1.0 + 0.5 * (class / 2) as f64,
            0.9 * class as f64,
            class % 2,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub label: usize,
    pub signer: u32,
    pub sequence: KeypointSequence,
}

const SYNTH_SIGNERS: u32 = 4;
const BACKGROUND_CONFIDENCE: f64 = 0.3;
const REDUCED_CONFIDENCE: f64 = 0.95;

/// Whole-body sequences whose hand nodes trace class-specific sinusoids.
/// Body nodes rest at the reference pose; the remaining landmarks sit at the
/// nose with low confidence. Samples are ordered class-major.
pub fn generate_synthetic<R: Rng + ?Sized>(
    spec: &SyntheticGestureSpec,
    rng: &mut R,
) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| SlrError::Config(format!("noise: {e}")))?;
    let size = spec.frame_size;
    let to_px = |v: f64| (v + 1.0) * 0.5 * size;
    let idx = reduced_indices();
    let mut out = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for class in 0..spec.classes {
        let (freq, phase, dominant) = spec.archetype(class);
        for k in 0..spec.samples_per_class {
            let mut data = vec![0.0; spec.frames * WHOLE_BODY_LANDMARKS * 3];
            for t in 0..spec.frames {
                let frame =
                    &mut data[t * WHOLE_BODY_LANDMARKS * 3..(t + 1) * WHOLE_BODY_LANDMARKS * 3];
                for l in 0..WHOLE_BODY_LANDMARKS {
                    frame[l * 3] = to_px(REFERENCE_POSE[0][0]);
                    frame[l * 3 + 1] = to_px(REFERENCE_POSE[0][1]);
                    frame[l * 3 + 2] = BACKGROUND_CONFIDENCE;
                }
                let base = 2.0 * PI * freq * t as f64 / spec.frames as f64 + phase;
                for (node, &l) in idx.iter().enumerate() {
                    let [mut x, mut y] = REFERENCE_POSE[node];
                    if node >= 7 {
                        let hand = (node - 7) / 10;
                        let within = ((node - 7) % 10) as f64;
                        let amp = if hand == dominant {
                            spec.amplitude
                        } else {
                            0.3 * spec.amplitude
                        };
                        let theta = base + 0.45 * within;
                        x += amp * theta.sin();
                        y += amp * 0.7 * (theta + 0.5 * phase).cos();
                    }
                    if spec.noise > 0.0 {
                        x += noise.sample(rng);
                        y += noise.sample(rng);
                    }
                    frame[l * 3] = to_px(x.clamp(-1.0, 1.0));
                    frame[l * 3 + 1] = to_px(y.clamp(-1.0, 1.0));
                    frame[l * 3 + 2] = REDUCED_CONFIDENCE;
                }
            }
            let mut seq =
                KeypointSequence::new(spec.frames, WHOLE_BODY_LANDMARKS, 3, data, (size, size))?;
            if spec.depth {
                let maps = synthetic_depth(spec, &seq);
                seq = seq.with_depth(maps)?;
            }
            out.push(SyntheticSample {
                id: format!("c{class:03}_s{k:03}"),
                label: class,
                signer: (k as u32) % SYNTH_SIGNERS,
                sequence: seq,
            });
        }
    }
    Ok(out)
}

/// A background plane receding with image height, with the hands as raised
/// discs.
fn synthetic_depth(spec: &SyntheticGestureSpec, seq: &KeypointSequence) -> Vec<DepthMap> {
    let side = spec.frame_size as usize;
    let idx = reduced_indices();
    (0..seq.frames())
        .map(|t| {
            let mut data: Vec<f64> = (0..side * side)
                .map(|o| 2000.0 - 400.0 * (o / side) as f64 / side as f64)
                .collect();
            for &l in &idx[7..REDUCED_NODE_COUNT] {
                let (cx, cy) = (seq.get(t, l, 0), seq.get(t, l, 1));
                let r = 2.0f64;
                let (x0, x1) = (
                    (cx - r).max(0.0) as usize,
                    ((cx + r) as usize).min(side - 1),
                );
                let (y0, y1) = (
                    (cy - r).max(0.0) as usize,
                    ((cy + r) as usize).min(side - 1),
                );
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        data[yy * side + xx] = 1200.0;
                    }
                }
            }
            DepthMap::new(side, side, data).expect("depth map size")
        })
        .collect()
}

/// Top-k accuracies, per instance and per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub per_class_top1: f64,
    pub per_class_top5: f64,
    pub samples: usize,
}

/// Number of classes ranked ahead of `label` in `row`; ties go to the lower
/// class index.
pub fn rank_of(row: &[f64], label: usize) -> usize {
    let z = row[label];
    row.iter()
        .enumerate()
        .filter(|&(c, &v)| v > z || (v == z && c < label))
        .count()
}

pub fn evaluate(logits: &NdArray, labels: &[usize]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(SlrError::Input("cannot evaluate an empty set".into()));
    }
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(SlrError::Input(format!(
            "{} labels for logits of shape {s:?}",
            labels.len()
        )));
    }
    let classes = s[1];
    let mut hits = vec![[0usize; 2]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(SlrError::Input(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let r = rank_of(logits.row(i), y);
        counts[y] += 1;
        hits[y][0] += usize::from(r < 1);
        hits[y][1] += usize::from(r < 5);
    }
    let n = labels.len() as f64;
    let total = |k: usize| hits.iter().map(|h| h[k]).sum::<usize>() as f64 / n;
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let per_class = |k: usize| {
        present
            .iter()
            .map(|&c| hits[c][k] as f64 / counts[c] as f64)
            .sum::<f64>()
            / present.len() as f64
    };
    Ok(Metrics {
        top1: total(0),
        top5: total(1),
        per_class_top1: per_class(0),
        per_class_top5: per_class(1),
        samples: labels.len(),
    })
}

/// Anything that maps a batch `[N, ...]` to logits `[N, K]`.
pub trait Classifier {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var>;
    fn classes(&self) -> usize;
}

/// Samples stacked along axis 0 with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: NdArray,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: NdArray, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() < 2 || inputs.shape()[0] != labels.len() {
            return Err(SlrError::Input(format!(
                "{} labels for inputs of shape {:?}",
                labels.len(),
                inputs.shape()
            )));
        }
        Ok(Dataset { inputs, labels })
    }

    /// Stack equally shaped samples.
    pub fn stack(samples: &[NdArray], labels: Vec<usize>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| SlrError::Input("empty dataset".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(SlrError::dim("stack", s.shape(), first.shape()));
            }
            data.extend_from_slice(s.data());
        }
        Dataset::new(NdArray::new(&shape, data)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs of the given rows, stacked.
    pub fn batch(&self, rows: &[usize]) -> NdArray {
        let per = self.inputs.len() / self.len();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.inputs.data()[r * per..(r + 1) * per]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.sample_shape());
        NdArray::new(&shape, data).expect("batch shape")
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            inputs: self.batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Measure train accuracy every this many steps (0 = only at the end).
    pub eval_every: usize,
    /// Stop once train top-1 reaches this value.
    pub target_train_top1: Option<f64>,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            eval_every: 25,
            target_train_top1: None,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SlrError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SlrError::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(SlrError::Config(
                "momentum must be in [0, 1) and weight decay >= 0".into(),
            ));
        }
        SmoothedLoss::new(self.label_smoothing, 2)?;
        Ok(())
    }
}

/// Optimizer state that survives checkpointing.
#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: Sgd,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_top1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    pub train_metrics: Metrics,
}

/// Scale all trainable gradients so their global L2 norm is at most
/// `limit`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, limit: f64) -> f64 {
    let ids: Vec<_> = store.trainable_ids().collect();
    let norm = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > limit && norm.is_finite() {
        store.scale_grads(limit / norm);
    }
    norm
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Eval-mode logits `[S, K]`, computed in chunks of `batch` samples.
pub fn predict_logits<M: Classifier>(
    model: &M,
    store: &ParamStore,
    data: &NdArray,
    batch: usize,
) -> Result<NdArray> {
    let s = data.shape()[0];
    let per = data.len() / s;
    let k = model.classes();
    let mut out = Vec::with_capacity(s * k);
    let mut start = 0;
    while start < s {
        let end = (start + batch.max(1)).min(s);
        let mut shape = data.shape().to_vec();
        shape[0] = end - start;
        let chunk = NdArray::new(&shape, data.data()[start * per..end * per].to_vec())?;
        let mut tape = Tape::new();
        let x = tape.input(chunk);
        let y = model.forward(&mut tape, store, x, &mut Ctx::eval())?;
        out.extend_from_slice(tape.value(y).data());
        start = end;
    }
    NdArray::new(&[s, k], out)
}

/// Mini-batch training with smoothed cross-entropy, SGD momentum and a
/// cosine schedule over `cfg.steps`. Continues from `state.step`; batches
/// and stochastic layers are seeded per step, so a resumed run matches an
/// uninterrupted one.
pub fn train<M: Classifier>(
    model: &M,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    seed: u64,
    on_log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    train_until(model, store, data, cfg, state, seed, cfg.steps, on_log)
}

/// As [`train`], but pause once `state.step` reaches `stop_at`.
#[allow(clippy::too_many_arguments)]
pub fn train_until<M: Classifier>(
    model: &M,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    seed: u64,
    stop_at: usize,
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SlrError::Data("empty training set".into()));
    }
    let loss_fn = SmoothedLoss::new(cfg.label_smoothing, model.classes())?;
    if let Some(&y) = data.labels.iter().find(|&&y| y >= model.classes()) {
        return Err(SlrError::Config(format!(
            "label {y} does not fit a {}-class model",
            model.classes()
        )));
    }
    let bs = cfg.batch_size.min(data.len());
    let mut history = Vec::new();
    while state.step < cfg.steps.min(stop_at) {
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed(seed, state.step));
        let rows = rand::seq::index::sample(&mut rng, data.len(), bs).into_vec();
        let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
        let mut tape = Tape::new();
        let x = tape.input(data.batch(&rows));
        let mut ctx = Ctx::train(rng.random());
        let logits = model.forward(&mut tape, store, x, &mut ctx)?;
        let loss = loss_fn.forward(&mut tape, logits, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        store.zero_grads();
        store.accumulate(&grads);
        if let Some(limit) = cfg.grad_clip {
            clip_grad_norm(store, limit);
        }
        let lr = cosine_lr(cfg.lr, state.step, cfg.steps);
        state.optimizer.step(store, lr)?;
        apply_norm_updates(store, &ctx.norm_updates, NORM_MOMENTUM);
        state.step += 1;

        let check = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every);
        let train_top1 = if check {
            Some(
                evaluate(
                    &predict_logits(model, store, &data.inputs, 32)?,
                    &data.labels,
                )?
                .top1,
            )
        } else {
            None
        };
        let log = StepLog {
            step: state.step,
            loss: loss_value,
            lr,
            train_top1,
        };
        on_log(&log);
        history.push(log);
        if let (Some(target), Some(acc)) = (cfg.target_train_top1, train_top1) {
            if acc >= target {
                break;
            }
        }
    }
    let train_metrics = evaluate(
        &predict_logits(model, store, &data.inputs, 32)?,
        &data.labels,
    )?;
    Ok(TrainReport {
        history,
        train_metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::numeric::{grad_check, GradCheckOptions};

    fn entropy_term(q: &[f64], logits: &[f64]) -> f64 {
        let ls = log_softmax(logits);
        -q.iter().zip(&ls).map(|(q, l)| q * l).sum::<f64>()
    }

    #[test]
    fn smoothing_matches_substitution() {
        let d = smooth_labels(1, 4, 0.1).unwrap();
        let want = [0.025, 0.925, 0.025, 0.025];
        for (a, b) in d.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let one_hot = smooth_labels(2, 5, 1e-9).unwrap();
        for (k, v) in one_hot.iter().enumerate() {
            assert!((v - if k == 2 { 1.0 } else { 0.0 }).abs() < 1e-8);
        }
        assert!(matches!(smooth_labels(4, 4, 0.1), Err(SlrError::Input(_))));
    }

    #[test]
    fn smoothed_distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let k = rng.random_range(2..50);
            let e = rng.random_range(0.0..0.99);
            let y = rng.random_range(0..k);
            let s: f64 = smooth_labels(y, k, e).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_decomposes_and_respects_gibbs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let k = rng.random_range(2..20);
            let e = rng.random_range(0.01..0.99);
            let y = rng.random_range(0..k);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut onehot = vec![0.0; k];
            onehot[y] = 1.0;
            let uniform = vec![1.0 / k as f64; k];
            let two_term = (1.0 - e) * entropy_term(&onehot, &z) + e * entropy_term(&uniform, &z);
            let loss = smoothed_ce(&z, y, e).unwrap();
            assert!((loss - two_term).abs() < 1e-9);
            let q = smooth_labels(y, k, e).unwrap();
            let h: f64 = -q.iter().map(|p| p * p.ln()).sum::<f64>();
            assert!(loss >= h - 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2, 5, 226] {
            let l = smoothed_ce(&vec![0.3; k], 1, 0.1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_example() {
        let l = smoothed_ce(&[10.0, -10.0], 0, 0.1).unwrap();
        let lse = (10.0f64.exp() + (-10.0f64).exp()).ln();
        let oracle = 0.9 * (lse - 10.0) + 0.1 * 0.5 * ((lse - 10.0) + (lse + 10.0));
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 1.0).abs() < 1e-3);
    }

    #[test]
    fn smoothed_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let z = store.add("z", NdArray::randn(&[3, 5], 1.0, &mut rng));
        let loss = SmoothedLoss::new(0.1, 5).unwrap();
        let r = grad_check(
            &mut store,
            |t, s| {
                let zv = t.param(s, z);
                loss.forward(t, zv, &[0, 3, 4])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn quadratic_store(w0: f64) -> (ParamStore, crate::numeric::ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", NdArray::new(&[1], vec![w0]).unwrap());
        (store, id)
    }

    fn set_quadratic_grad(store: &mut ParamStore, id: crate::numeric::ParamId) {
        let w = store.value(id).data()[0];
        store.zero_grads();
        let g = crate::numeric::ParamGrads(vec![(id, NdArray::new(&[1], vec![2.0 * w]).unwrap())]);
        store.accumulate(&g);
    }

    #[test]
    fn sgd_definitions() {
        let (mut store, id) = quadratic_store(1.0);
        set_quadratic_grad(&mut store, id);
        let mut opt = Sgd::new(0.9, 0.01);
        opt.step(&mut store, 0.0).unwrap();
        assert_eq!(store.value(id).data()[0], 1.0);

        let (mut store, id) = quadratic_store(1.0);
        set_quadratic_grad(&mut store, id);
        Sgd::new(0.0, 0.0).step(&mut store, 0.1).unwrap();
        assert!((store.value(id).data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_converges_on_bowl() {
        let (mut store, id) = quadratic_store(1.0);
        let mut opt = Sgd::new(0.0, 0.0);
        for _ in 0..50 {
            set_quadratic_grad(&mut store, id);
            opt.step(&mut store, 0.1).unwrap();
        }
        assert!(store.value(id).data()[0].abs() < 1e-3);
    }

    #[test]
    fn sgd_rejects_nan_gradients() {
        let (mut store, id) = quadratic_store(1.0);
        store.zero_grads();
        let g = crate::numeric::ParamGrads(vec![(id, NdArray::new(&[1], vec![f64::NAN]).unwrap())]);
        store.accumulate(&g);
        let err = Sgd::new(0.9, 0.0).step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, SlrError::Numeric(m) if m.contains('w')));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn metrics_examples() {
        let labels = [0, 1, 2, 2];
        let perfect = NdArray::from_fn(&[4, 6], |o| if o % 6 == labels[o / 6] { 1.0 } else { 0.0 });
        let m = evaluate(&perfect, &labels).unwrap();
        assert_eq!((m.top1, m.top5), (1.0, 1.0));

        let uniform = NdArray::zeros(&[4, 6]);
        let m = evaluate(&uniform, &labels).unwrap();
        assert_eq!(m.top1, 0.25);
        assert!(m.top1 <= m.top5);
        assert!(matches!(evaluate(&uniform, &[]), Err(SlrError::Input(_))));
    }

    #[test]
    fn balanced_per_class_equals_per_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<usize> = (0..40).map(|i| i % 8).collect();
        let z = NdArray::randn(&[40, 8], 1.0, &mut rng);
        let m = evaluate(&z, &labels).unwrap();
        assert!((m.top1 - m.per_class_top1).abs() < 1e-12);
        assert!((m.top5 - m.per_class_top5).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_row_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..7)).collect();
        let z = NdArray::randn(&[30, 7], 1.0, &mut rng);
        let mut shifted = z.clone();
        for r in 0..30 {
            let c = rng.random_range(-10.0..10.0);
            for k in 0..7 {
                let v = shifted.get(&[r, k]);
                shifted.set(&[r, k], v + c);
            }
        }
        let (a, b) = (
            evaluate(&z, &labels).unwrap(),
            evaluate(&shifted, &labels).unwrap(),
        );
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.top5, b.top5);
    }

    #[test]
    fn synthetic_is_reproducible_and_distinct() {
        let spec = SyntheticGestureSpec {
            classes: 3,
            samples_per_class: 2,
            frames: 12,
            noise: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = generate_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set[0].sequence, set[1].sequence);
        assert_ne!(set[0].sequence, set[2].sequence);
        assert_ne!(set[2].sequence, set[4].sequence);

        let noisy = SyntheticGestureSpec {
            noise: 0.02,
            ..spec
        };
        let a = generate_synthetic(&noisy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic(&noisy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].sequence, a[1].sequence);
    }

    struct LinearProbe(Linear, usize);

    impl Classifier for LinearProbe {
        fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, _: &mut Ctx) -> Result<Var> {
            let n = tape.shape(x)[0];
            let flat = tape.reshape(x, &[n, self.0.inputs])?;
            self.0.forward(tape, store, flat)
        }
        fn classes(&self) -> usize {
            self.1
        }
    }

    #[test]
    fn linear_probe_separates_two_synthetic_classes() {
        let spec = SyntheticGestureSpec {
            classes: 2,
            samples_per_class: 12,
            frames: 16,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = generate_synthetic(&spec, &mut rng).unwrap();
        let feats: Vec<NdArray> = set
            .iter()
            .map(|s| {
                let r = crate::graph::reduce_graph(&s.sequence).unwrap();
                let n = crate::streams::normalize_coords(&r, r.frame_size).unwrap();
                NdArray::new(&[n.data().len()], n.data().to_vec()).unwrap()
            })
            .collect();
        let labels: Vec<usize> = set.iter().map(|s| s.label).collect();
        let data = Dataset::stack(&feats, labels).unwrap();
        let mut store = ParamStore::new();
        let dim = data.sample_shape()[0];
        let probe = LinearProbe(Linear::new(&mut store, "probe", dim, 2, &mut rng), 2);
        store.value_mut(probe.0.weight).fill(0.0);
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 8,
            lr: 0.05,
            weight_decay: 0.0,
            eval_every: 0,
            ..Default::default()
        };
        let rep = train(
            &probe,
            &mut store,
            &data,
            &cfg,
            &mut TrainState::new(&cfg),
            0,
            |_| {},
        )
        .unwrap();
        assert!(rep.train_metrics.top1 > 0.5, "{:?}", rep.train_metrics);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = NdArray::randn(&[10, 4], 1.0, &mut rng);
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let data = Dataset::new(x, labels).unwrap();
        let mut base = ParamStore::new();
        let probe = LinearProbe(Linear::new(&mut base, "p", 4, 3, &mut rng), 3);
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 4,
            eval_every: 0,
            ..Default::default()
        };
        let mut a = base.clone();
        let mut sa = TrainState::new(&cfg);
        train(&probe, &mut a, &data, &cfg, &mut sa, 3, |_| {}).unwrap();
        assert_eq!(sa.step, 20);

        let mut b = base.clone();
        let mut sb = TrainState::new(&cfg);
        train_until(&probe, &mut b, &data, &cfg, &mut sb, 3, 10, |_| {}).unwrap();
        assert_eq!(sb.step, 10);
        let mut resumed = TrainState::new(&cfg);
        resumed.step = sb.step;
        resumed
            .optimizer
            .set_velocities(sb.optimizer.velocities().to_vec());
        train(&probe, &mut b, &data, &cfg, &mut resumed, 3, |_| {}).unwrap();
        assert_eq!(resumed.step, 20);
        for id in a.ids() {
            assert_eq!(a.value(id).data(), b.value(id).data());
        }
    }
}
