//! Late fusion of per-modality logits: fixed weighted sums, the learned
//! global ensemble model, and one-at-a-time weight sensitivity sweeps.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::numeric::{Conv2dSpec, NdArray, ParamId, ParamStore, Tape, Var};
use crate::train::{evaluate, train_until, Classifier, Dataset, TrainConfig, TrainState};

/// Weights for the four-modality RGB ensemble: skeleton, RGB, flow, features.
pub const RGB_TRACK_WEIGHTS: [f64; 4] = [1.0, 0.9, 0.4, 0.4];
/// Weights for the six-modality RGB-D ensemble: skeleton (3D), RGB, flow,
/// features, HHA, depth flow.
pub const RGBD_TRACK_WEIGHTS: [f64; 6] = [1.0, 0.9, 0.4, 0.4, 0.4, 0.1];

/// Pre-softmax scores `[S, C]` of one modality with the sample ids of each
/// row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix {
    pub modality: String,
    pub ids: Vec<String>,
    pub scores: NdArray,
}

impl LogitMatrix {
    pub fn new(modality: impl Into<String>, ids: Vec<String>, scores: NdArray) -> Result<Self> {
        let modality = modality.into();
        if scores.ndim() != 2 || scores.shape()[0] != ids.len() {
            return Err(SlrError::Input(format!(
                "{modality}: {} ids for scores of shape {:?}",
                ids.len(),
                scores.shape()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(SlrError::Input(format!(
                "{modality}: duplicate sample id {dup}"
            )));
        }
        Ok(LogitMatrix {
            modality,
            ids,
            scores,
        })
    }

    /// Rows named `0..S` for in-memory use.
    pub fn with_index_ids(modality: impl Into<String>, scores: NdArray) -> Result<Self> {
        let n = scores.shape().first().copied().unwrap_or(0);
        Self::new(modality, (0..n).map(|i| i.to_string()).collect(), scores)
    }

    pub fn samples(&self) -> usize {
        self.ids.len()
    }

    pub fn classes(&self) -> usize {
        self.scores.shape()[1]
    }
}

/// One weight per modality; finite and not all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite()) {
            return Err(SlrError::Config(format!(
                "fusion weights must be finite and non-empty: {alpha:?}"
            )));
        }
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(SlrError::Config(
                "at least one fusion weight must be non-zero".into(),
            ));
        }
        Ok(FusionWeights(alpha))
    }

    pub fn equal(m: usize) -> Self {
        FusionWeights(vec![1.0; m.max(1)])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// All modalities must share the first one's shape and row ids.
pub fn check_aligned(mods: &[LogitMatrix]) -> Result<()> {
    let first = mods
        .first()
        .ok_or_else(|| SlrError::Fusion("no modalities to fuse".into()))?;
    let bad: Vec<&str> = mods[1..]
        .iter()
        .filter(|m| m.scores.shape() != first.scores.shape() || m.ids != first.ids)
        .map(|m| m.modality.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(SlrError::Fusion(format!(
            "modalities not aligned with {} ({} x {}): {}",
            first.modality,
            first.samples(),
            first.classes(),
            bad.join(", ")
        )));
    }
    Ok(())
}

/// `sum_i alpha_i q_i` without validating the weights.
fn weighted_sum(mods: &[LogitMatrix], alpha: &[f64]) -> NdArray {
    let mut out = NdArray::zeros(mods[0].scores.shape());
    for (m, &a) in mods.iter().zip(alpha) {
        if a != 0.0 {
            out.axpy(a, &m.scores);
        }
    }
    out
}

pub fn fuse_fixed(mods: &[LogitMatrix], alpha: &FusionWeights) -> Result<LogitMatrix> {
    check_aligned(mods)?;
    if alpha.len() != mods.len() {
        return Err(SlrError::Fusion(format!(
            "{} weights for {} modalities",
            alpha.len(),
            mods.len()
        )));
    }
    Ok(LogitMatrix {
        modality: "fused".into(),
        ids: mods[0].ids.clone(),
        scores: weighted_sum(mods, alpha.values()),
    })
}

/// Stack aligned modalities into `[S, C, M]`.
pub fn stack_modalities(mods: &[LogitMatrix]) -> Result<NdArray> {
    check_aligned(mods)?;
    let (s, c, m) = (mods[0].samples(), mods[0].classes(), mods.len());
    Ok(NdArray::from_fn(&[s, c, m], |o| {
        let (row, k, i) = (o / (c * m), (o / m) % c, o % m);
        mods[i].scores.data()[row * c + k]
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemConfig {
    /// Filters of the first, class-collapsing convolution.
    pub filters: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Average the per-sample weights over a calibration set and fuse with
    /// those fixed weights.
    pub global_weights: bool,
}

impl Default for GemConfig {
    fn default() -> Self {
        GemConfig {
            filters: 16,
            hidden: 64,
            depth: 2,
            global_weights: false,
        }
    }
}

/// Global ensemble model: a `C x 1` convolution collapses each modality's
/// class scores into `filters` features, hidden fully connected layers with
/// layer normalization and Swish map them to one raw weight per modality,
/// and the fused logits are the weighted sum of the inputs.
#[derive(Clone, Debug)]
pub struct Gem {
    pub config: GemConfig,
    pub classes: usize,
    pub modalities: usize,
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub hidden: Vec<(Linear, LayerNorm)>,
    pub output: Linear,
}

impl Gem {
    pub fn new(
        config: &GemConfig,
        classes: usize,
        modalities: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if modalities < 2 || classes < 2 || config.filters == 0 || config.hidden == 0 {
            return Err(SlrError::Config(format!(
                "GEM needs >= 2 modalities and classes and positive widths (got M={modalities}, C={classes})"
            )));
        }
        let f = config.filters;
        let conv = store.add(
            "gem.conv.weight",
            NdArray::randn(&[f, 1, classes, 1], (1.0 / classes as f64).sqrt(), rng),
        );
        let conv_bias = store.add("gem.conv.bias", NdArray::zeros(&[1, f, 1, 1]));
        let mut hidden = Vec::with_capacity(config.depth);
        let mut width = f * modalities;
        for i in 0..config.depth {
            let lin = Linear::new(store, &format!("gem.hidden{i}"), width, config.hidden, rng);
            let norm = LayerNorm::new(store, &format!("gem.norm{i}"), config.hidden);
            hidden.push((lin, norm));
            width = config.hidden;
        }
        let output = Linear::new(store, "gem.output", width, modalities, rng);
        // start close to equal-weight fusion
        let w = store.value_mut(output.weight);
        *w = w.map(|v| v * 0.01);
        store.value_mut(output.bias).fill(1.0);
        Ok(Gem {
            config: config.clone(),
            classes,
            modalities,
            conv,
            conv_bias,
            hidden,
            output,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[1] != self.classes || shape[2] != self.modalities {
            return Err(SlrError::Config(format!(
                "GEM built for {} classes x {} modalities, got input {shape:?}",
                self.classes, self.modalities
            )));
        }
        Ok(())
    }

    /// `q: [N, C, M]` -> per-sample weights `[N, M]`.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<Var> {
        let s = tape.shape(q).to_vec();
        self.check_input(&s)?;
        let (n, c, m) = (s[0], s[1], s[2]);
        let x = tape.reshape(q, &[n, 1, c, m])?;
        let k = tape.param(store, self.conv);
        let h = tape.conv2d(x, k, Conv2dSpec::new((1, 1), (0, 0), 1))?;
        let b = tape.param(store, self.conv_bias);
        let h = tape.add(h, b)?;
        let mut h = tape.reshape(h, &[n, self.config.filters * m])?;
        for (lin, norm) in &self.hidden {
            h = lin.forward(tape, store, h)?;
            h = norm.forward(tape, store, h)?;
            h = tape.swish(h);
        }
        self.output.forward(tape, store, h)
    }

    /// Weighted sum of the modalities with the given `[N, M]` weights.
    fn mix(&self, tape: &mut Tape, q: Var, w: Var) -> Result<Var> {
        let s = tape.shape(q).to_vec();
        let (n, c, m) = (s[0], s[1], s[2]);
        let w = tape.reshape(w, &[n, 1, m])?;
        let prod = tape.mul(q, w)?;
        let mean = tape.mean_to(prod, &[n, c, 1])?;
        let sum = tape.scale(mean, m as f64);
        tape.reshape(sum, &[n, c])
    }

    /// `q: [N, C, M]` -> (weights `[N, M]`, fused logits `[N, C]`).
    pub fn forward_parts(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<(Var, Var)> {
        let w = self.weights(tape, store, q)?;
        let fused = self.mix(tape, q, w)?;
        Ok((w, fused))
    }

    /// Weights averaged over a calibration set, for fixed-weight fusion.
    pub fn global_weights(
        &self,
        store: &ParamStore,
        calibration: &[LogitMatrix],
    ) -> Result<FusionWeights> {
        let local = GemConfig {
            global_weights: false,
            ..self.config.clone()
        };
        let per_sample = Gem {
            config: local,
            ..self.clone()
        };
        let (w, _) = per_sample.apply(store, calibration)?;
        FusionWeights::new(mean_rows(&w))
    }

    /// Per-sample weights and fused logits for aligned modalities. In
    /// global-weight mode every row gets the mean weights.
    pub fn apply(
        &self,
        store: &ParamStore,
        mods: &[LogitMatrix],
    ) -> Result<(NdArray, LogitMatrix)> {
        if mods.len() != self.modalities {
            return Err(SlrError::Config(format!(
                "GEM built for {} modalities, got {}",
                self.modalities,
                mods.len()
            )));
        }
        let q = stack_modalities(mods)?;
        let mut tape = Tape::new();
        let qv = tape.input(q);
        let (w, fused) = self.forward_parts(&mut tape, store, qv)?;
        let weights = tape.value(w).clone();
        let fused = LogitMatrix {
            modality: "gem".into(),
            ids: mods[0].ids.clone(),
            scores: tape.value(fused).clone(),
        };
        if self.config.global_weights {
            // the inputs double as the calibration set
            let g = mean_rows(&weights);
            let tiled = NdArray::from_fn(weights.shape(), |o| g[o % g.len()]);
            let scores = weighted_sum(mods, &g);
            return Ok((tiled, LogitMatrix { scores, ..fused }));
        }
        Ok((weights, fused))
    }
}

fn mean_rows(w: &NdArray) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|j| (0..n).map(|i| w.data()[i * m + j]).sum::<f64>() / n as f64)
        .collect()
}

impl Classifier for Gem {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, _: &mut Ctx) -> Result<Var> {
        let (_, fused) = self.forward_parts(tape, store, x)?;
        Ok(fused)
    }

    fn classes(&self) -> usize {
        self.classes
    }
}

/// Settings for fitting the ensemble model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GemTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Fraction of each class held out for checkpoint selection.
    pub holdout_fraction: f64,
}

impl Default for GemTrainConfig {
    fn default() -> Self {
        GemTrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GemEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub holdout_top1: f64,
}

#[derive(Clone, Debug)]
pub struct GemTrainReport {
    pub curve: Vec<GemEpoch>,
    pub best_epoch: usize,
    pub best_holdout_top1: f64,
    pub train_rows: Vec<usize>,
    pub holdout_rows: Vec<usize>,
}

/// Per class, hold out `round(fraction * count)` samples (at least one,
/// leaving at least one for training). Classes with fewer than two samples
/// are a data error.
pub fn stratified_split(
    labels: &[usize],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SlrError::Config(format!(
            "holdout fraction {fraction} outside (0, 1)"
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut hold) = (Vec::new(), Vec::new());
    for (c, rows) in by_class.iter_mut().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            return Err(SlrError::Data(format!(
                "class {c} has {} sample(s); at least 2 are needed",
                rows.len()
            )));
        }
        rand::seq::SliceRandom::shuffle(rows.as_mut_slice(), rng);
        let k = ((fraction * rows.len() as f64).round() as usize).clamp(1, rows.len() - 1);
        hold.extend_from_slice(&rows[..k]);
        train.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    hold.sort_unstable();
    Ok((train, hold))
}

/// Fit the ensemble model on frozen modality logits with smoothed
/// cross-entropy, keeping the parameters with the best held-out top-1.
pub fn gem_train(
    gem: &Gem,
    store: &mut ParamStore,
    mods: &[LogitMatrix],
    labels: &[usize],
    cfg: &GemTrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&GemEpoch),
) -> Result<GemTrainReport> {
    if mods.len() != gem.modalities {
        return Err(SlrError::Config(format!(
            "GEM built for {} modalities, got {}",
            gem.modalities,
            mods.len()
        )));
    }
    let q = stack_modalities(mods)?;
    gem.check_input(q.shape())?;
    let data = Dataset::new(q, labels.to_vec())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_rows, hold_rows) = stratified_split(labels, cfg.holdout_fraction, &mut rng)?;
    let train_set = data.subset(&train_rows);
    let hold_set = data.subset(&hold_rows);

    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size.max(1));
    let tc = TrainConfig {
        steps: cfg.epochs * steps_per_epoch,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        label_smoothing: cfg.label_smoothing,
        eval_every: 0,
        target_train_top1: None,
        grad_clip: Some(5.0),
    };
    let holdout_top1 = |store: &ParamStore| -> Result<f64> {
        let logits = crate::train::predict_logits(gem, store, &hold_set.inputs, 256)?;
        Ok(evaluate(&logits, &hold_set.labels)?.top1)
    };
    let mut best = (0, holdout_top1(store)?, store.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut state = TrainState::new(&tc);
    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::new();
        train_until(
            gem,
            store,
            &train_set,
            &tc,
            &mut state,
            seed,
            epoch * steps_per_epoch,
            |l| losses.push(l.loss),
        )?;
        let acc = holdout_top1(store)?;
        let e = GemEpoch {
            epoch,
            loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            holdout_top1: acc,
        };
        on_epoch(&e);
        curve.push(e);
        if acc > best.1 {
            best = (epoch, acc, store.clone());
        }
    }
    let (best_epoch, best_holdout_top1, best_store) = best;
    store.load_from(&best_store)?;
    Ok(GemTrainReport {
        curve,
        best_epoch,
        best_holdout_top1,
        train_rows,
        holdout_rows: hold_rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub modality: usize,
    pub weight: f64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Per modality, the grid value with the highest top-1 (first on ties).
    pub best: Vec<(f64, f64)>,
}

impl SweepTable {
    pub const HEADER: &'static str = "modality\tweight\ttop1";

    /// Tab-separated table with a header line.
    pub fn to_tsv(&self, names: &[String]) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let name = names
                .get(r.modality)
                .map_or_else(|| r.modality.to_string(), Clone::clone);
            s.push_str(&format!("{name}\t{:.4}\t{:.6}\n", r.weight, r.top1));
        }
        s
    }
}

/// Vary one modality weight at a time over `grid`, the others held at
/// `base`, and record fused top-1.
pub fn sensitivity_sweep(
    mods: &[LogitMatrix],
    labels: &[usize],
    base: &FusionWeights,
    grid: &[f64],
) -> Result<SweepTable> {
    check_aligned(mods)?;
    if grid.is_empty() {
        return Err(SlrError::Config("sweep grid is empty".into()));
    }
    if base.len() != mods.len() {
        return Err(SlrError::Fusion(format!(
            "{} base weights for {} modalities",
            base.len(),
            mods.len()
        )));
    }
    let mut rows = Vec::with_capacity(mods.len() * grid.len());
    let mut best = Vec::with_capacity(mods.len());
    for i in 0..mods.len() {
        let mut top: Option<(f64, f64)> = None;
        for &g in grid {
            let mut alpha = base.values().to_vec();
            alpha[i] = g;
            let top1 = evaluate(&weighted_sum(mods, &alpha), labels)?.top1;
            rows.push(SweepRow {
                modality: i,
                weight: g,
                top1,
            });
            if top.is_none_or(|(_, t)| top1 > t) {
                top = Some((g, top1));
            }
        }
        best.extend(top);
    }
    Ok(SweepTable { rows, best })
}

/// Parse `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || {
        SlrError::Config(format!(
            "bad grid spec {spec:?}; use start:stop:step or a,b,c"
        ))
    };
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, c] => {
            let (lo, hi, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0 && hi >= lo) {
                return Err(bad());
            }
            let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
            (0..n).map(|i| lo + i as f64 * step).collect()
        }
        [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(bad()),
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

/// Two modalities that are each right on half of the classes. Modality A
/// puts a peak on the true class when it lies in the lower half and on a
/// wrong upper-half class otherwise; modality B mirrors this. Each alone
/// scores about 50%, equal-weight fusion cannot tell the two peaks apart,
/// and a model that reads which half the peaks fall in can be right almost
/// always.
pub fn complementary_benchmark(
    samples: usize,
    classes: usize,
    seed: u64,
) -> Result<(Vec<LogitMatrix>, Vec<usize>)> {
    if classes < 4 {
        return Err(SlrError::Config(
            "the complementary benchmark needs >= 4 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = classes / 2;
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    let mut a = NdArray::randn(&[samples, classes], 0.3, &mut rng);
    let mut b = NdArray::randn(&[samples, classes], 0.3, &mut rng);
    for (i, &y) in labels.iter().enumerate() {
        let lower = y < half;
        // a wrong class in the other modality's competence region
        let decoy = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| loop {
            let c = rng.random_range(lo..hi);
            if c != y {
                break c;
            }
        };
        let (ka, kb) = if lower {
            (y, decoy(&mut rng, 0, half))
        } else {
            (decoy(&mut rng, half, classes), y)
        };
        let (ha, hb) = (rng.random_range(2.0..4.0), rng.random_range(2.0..4.0));
        a.set(&[i, ka], a.get(&[i, ka]) + ha);
        b.set(&[i, kb], b.get(&[i, kb]) + hb);
    }
    Ok((
        vec![
            LogitMatrix::with_index_ids("a", a)?,
            LogitMatrix::with_index_ids("b", b)?,
        ],
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{grad_check, GradCheckOptions};
    use crate::train::SmoothedLoss;

    fn random_mods(m: usize, s: usize, c: usize, seed: u64) -> Vec<LogitMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|i| {
                LogitMatrix::with_index_ids(format!("m{i}"), NdArray::randn(&[s, c], 1.0, &mut rng))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn fixed_fusion_matches_loop_oracle() {
        for alpha in [RGB_TRACK_WEIGHTS.to_vec(), RGBD_TRACK_WEIGHTS.to_vec()] {
            let mods = random_mods(alpha.len(), 5, 7, 1);
            let f = fuse_fixed(&mods, &FusionWeights::new(alpha.clone()).unwrap()).unwrap();
            for o in 0..35 {
                let want: f64 = mods
                    .iter()
                    .zip(&alpha)
                    .map(|(m, a)| a * m.scores.data()[o])
                    .sum();
                assert!((f.scores.data()[o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_unit_weight_is_identity() {
        let mods = random_mods(1, 4, 3, 2);
        let f = fuse_fixed(&mods, &FusionWeights::new(vec![1.0]).unwrap()).unwrap();
        assert_eq!(f.scores, mods[0].scores);
    }

    #[test]
    fn fusion_is_linear_and_argmax_scale_invariant() {
        let mods = random_mods(3, 6, 5, 3);
        let a = vec![0.3, -1.2, 2.0];
        let b = vec![1.1, 0.5, 0.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let fa = fuse_fixed(&mods, &FusionWeights::new(a.clone()).unwrap()).unwrap();
        let fb = fuse_fixed(&mods, &FusionWeights::new(b).unwrap()).unwrap();
        let fab = fuse_fixed(&mods, &FusionWeights::new(ab).unwrap()).unwrap();
        let mut sum = fa.scores.clone();
        sum.axpy(1.0, &fb.scores);
        assert!(sum.max_abs_diff(&fab.scores) < 1e-6);
        let scaled = fuse_fixed(
            &mods,
            &FusionWeights::new(a.iter().map(|x| x * 3.7).collect()).unwrap(),
        )
        .unwrap();
        for r in 0..6 {
            assert_eq!(
                crate::numeric::argmax(fa.scores.row(r)),
                crate::numeric::argmax(scaled.scores.row(r))
            );
        }
    }

    #[test]
    fn misaligned_modalities_are_named() {
        let mut mods = random_mods(3, 4, 3, 4);
        mods[2].ids[0] = "other".into();
        let err = fuse_fixed(&mods, &FusionWeights::equal(3)).unwrap_err();
        assert!(matches!(&err, SlrError::Fusion(m) if m.contains("m2") && !m.contains("m1")));
        assert!(FusionWeights::new(vec![0.0, 0.0]).is_err());
        assert!(
            LogitMatrix::new("x", vec!["a".into(), "a".into()], NdArray::zeros(&[2, 2])).is_err()
        );
    }

    #[test]
    fn gem_shapes_and_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gem = Gem::new(&GemConfig::default(), 6, 2, &mut store, &mut rng).unwrap();
        let one = random_mods(1, 9, 6, 6).remove(0);
        let mods = vec![
            one.clone(),
            LogitMatrix {
                modality: "copy".into(),
                ..one.clone()
            },
        ];
        let (w, fused) = gem.apply(&store, &mods).unwrap();
        assert_eq!(w.shape(), &[9, 2]);
        assert_eq!(fused.scores.shape(), &[9, 6]);
        for r in 0..9 {
            let wsum = w.get(&[r, 0]) + w.get(&[r, 1]);
            if wsum > 0.0 {
                assert_eq!(
                    crate::numeric::argmax(fused.scores.row(r)),
                    crate::numeric::argmax(one.scores.row(r))
                );
            }
        }
        let (w2, fused2) = gem.apply(&store, &mods).unwrap();
        assert_eq!(w, w2);
        assert_eq!(fused, fused2);
        assert!(matches!(
            gem.apply(&store, &mods[..1]),
            Err(SlrError::Config(_))
        ));
    }

    #[test]
    fn gem_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = GemConfig {
            filters: 3,
            hidden: 5,
            ..Default::default()
        };
        let gem = Gem::new(&cfg, 4, 3, &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let v = store.value_mut(id);
            let noise = NdArray::randn(v.shape(), 0.3, &mut rng);
            v.axpy(1.0, &noise);
        }
        let q = NdArray::randn(&[5, 4, 3], 1.0, &mut rng);
        let loss = SmoothedLoss::new(0.1, 4).unwrap();
        let r = grad_check(
            &mut store,
            |t, s| {
                let qv = t.input(q.clone());
                let (_, f) = gem.forward_parts(t, s, qv)?;
                loss.forward(t, f, &[0, 1, 2, 3, 1])
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let gem = Gem::new(&GemConfig::default(), 3, 2, &mut store, &mut rng).unwrap();
        let before = store.clone();
        let mods = random_mods(2, 12, 3, 9);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let cfg = GemTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let rep = gem_train(&gem, &mut store, &mods, &labels, &cfg, 0, |_| {}).unwrap();
        assert!(rep.curve.is_empty());
        for id in store.ids() {
            assert_eq!(store.value(id), before.value(id));
        }
    }

    #[test]
    fn singleton_class_is_a_data_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            stratified_split(&[0, 0, 1], 0.5, &mut rng),
            Err(SlrError::Data(_))
        ));
        let (tr, ho) = stratified_split(&[0, 0, 1, 1, 1, 1], 0.25, &mut rng).unwrap();
        assert_eq!(tr.len() + ho.len(), 6);
        assert_eq!(ho.len(), 2);
    }

    #[test]
    fn sweep_examples() {
        let mods = random_mods(3, 30, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
        let base = FusionWeights::new(vec![1.0, 0.5, 0.25]).unwrap();
        let base_top1 = evaluate(&fuse_fixed(&mods, &base).unwrap().scores, &labels)
            .unwrap()
            .top1;
        let t = sensitivity_sweep(&mods, &labels, &base, &[0.5]).unwrap();
        assert_eq!(t.rows[1].top1, base_top1);

        let t =
            sensitivity_sweep(&mods, &labels, &base, &parse_grid("0.0:2.0:0.1").unwrap()).unwrap();
        assert_eq!(t.rows.len(), 63);
        for i in 0..3 {
            let row = t
                .rows
                .iter()
                .find(|r| r.modality == i && r.weight == 0.0)
                .unwrap();
            let rest: Vec<LogitMatrix> = (0..3)
                .filter(|&j| j != i)
                .map(|j| mods[j].clone())
                .collect();
            let w: Vec<f64> = (0..3)
                .filter(|&j| j != i)
                .map(|j| base.values()[j])
                .collect();
            let loo = evaluate(
                &fuse_fixed(&rest, &FusionWeights::new(w).unwrap())
                    .unwrap()
                    .scores,
                &labels,
            )
            .unwrap()
            .top1;
            assert_eq!(row.top1, loo);
        }
        assert!(t.to_tsv(&[]).starts_with(SweepTable::HEADER));
    }

    #[test]
    fn gem_learns_complementary_modalities() {
        let (mods, labels) = complementary_benchmark(400, 8, 12).unwrap();
        let single: Vec<f64> = mods
            .iter()
            .map(|m| evaluate(&m.scores, &labels).unwrap().top1)
            .collect();
        let equal = evaluate(
            &fuse_fixed(&mods, &FusionWeights::equal(2)).unwrap().scores,
            &labels,
        )
        .unwrap()
        .top1;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let gem = Gem::new(&GemConfig::default(), 8, 2, &mut store, &mut rng).unwrap();
        let cfg = GemTrainConfig {
            epochs: 40,
            ..Default::default()
        };
        let rep = gem_train(&gem, &mut store, &mods, &labels, &cfg, 1, |_| {}).unwrap();
        let hold: Vec<usize> = rep.holdout_rows.clone();
        let sub = |m: &LogitMatrix| {
            LogitMatrix::with_index_ids(
                &m.modality,
                NdArray::from_fn(&[hold.len(), 8], |o| m.scores.get(&[hold[o / 8], o % 8])),
            )
            .unwrap()
        };
        let hold_mods: Vec<LogitMatrix> = mods.iter().map(sub).collect();
        let hold_labels: Vec<usize> = hold.iter().map(|&r| labels[r]).collect();
        let (_, fused) = gem.apply(&store, &hold_mods).unwrap();
        let gem_top1 = evaluate(&fused.scores, &hold_labels).unwrap().top1;
        eprintln!(
            "single {single:?} equal {equal} gem {gem_top1} best epoch {}",
            rep.best_epoch
        );
        assert!(gem_top1 > single.iter().cloned().fold(0.0, f64::max));
        assert!(gem_top1 > equal);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.0:2.0:0.1").unwrap().len(), 21);
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_grid("1,2.5").unwrap(), vec![1.0, 2.5]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("a").is_err());
    }
}
