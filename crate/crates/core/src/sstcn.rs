//! Separable spatial-temporal convolution network over per-keypoint heatmap
//! features `[frames, joints, H, W]`.
//!
//! Stage 0 convolves each frame-joint map separably (depthwise 3×3, then a
//! per-frame pointwise mix of joints). Stage 1 views the block as
//! `[frames, joints·H, W]` and mixes frames with a 1×1 convolution. Stage 2
//! returns to frame-major channels and runs a 3×3 convolution grouped by
//! frame; a residual path from the stage-0 input joins here. Stage 3
//! shuffles channels to joint-major order and runs a 3×3 convolution grouped
//! by joint. Stage 4 pools globally and classifies with two fully connected
//! layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::keypoints::{KeypointSequence, WHOLE_BODY_LANDMARKS};
use crate::nn::{dropout, ChannelNorm, Conv, Ctx, Linear};
use crate::numeric::{Conv2dSpec, NdArray, ParamStore, Tape, Var};
use crate::streams::sample_indices;
use crate::train::Classifier;

pub const FEATURE_FRAMES: usize = 60;
pub const FEATURE_SIZE: usize = 24;
pub const FEATURE_JOINT_COUNT: usize = 33;

/// Whole-body landmark indices of the feature joints: nose; the two mouth
/// corners and the upper and lower lip midpoints; shoulders, elbows and
/// wrists; and per hand the wrist plus the base and tip of every finger.
pub const FEATURE_JOINTS: [usize; FEATURE_JOINT_COUNT] = [
    0, // nose
    71, 74, 77, 80, // mouth
    5, 6, 7, 8, 9, 10, // upper body
    91, 93, 95, 96, 99, 100, 103, 104, 107, 108, 111, // left hand
    112, 114, 116, 117, 120, 121, 124, 125, 128, 129, 132, // right hand
];

/// Uniform frame indices: evenly spaced over long clips, cyclic tiling for
/// short ones.
pub fn uniform_indices(len: usize, target: usize) -> Result<Vec<usize>> {
    if len < target {
        return sample_indices::<rand_chacha::ChaCha8Rng>(len, target, None);
    }
    if target == 0 {
        return Err(SlrError::Config("sample length must be positive".into()));
    }
    Ok((0..target).map(|i| i * len / target).collect())
}

/// Adaptive max pooling of one `h0 × w0` map down to `size × size`; cell `i`
/// covers rows `floor(i h0 / size) .. ceil((i + 1) h0 / size)`.
fn max_pool_to(map: &[f64], h0: usize, w0: usize, size: usize, out: &mut [f64]) {
    for oy in 0..size {
        let (y0, y1) = (oy * h0 / size, ((oy + 1) * h0).div_ceil(size));
        for ox in 0..size {
            let (x0, x1) = (ox * w0 / size, ((ox + 1) * w0).div_ceil(size));
            let mut m = f64::NEG_INFINITY;
            for y in y0..y1 {
                for &v in &map[y * w0 + x0..y * w0 + x1] {
                    m = m.max(v);
                }
            }
            out[oy * size + ox] = m;
        }
    }
}

/// Raw heatmaps `[frames, 133, H0, W0]` -> features `[60, 33, 24, 24]`.
pub fn prepare_features(raw: &NdArray) -> Result<NdArray> {
    prepare_features_with(raw, &FEATURE_JOINTS, FEATURE_FRAMES, FEATURE_SIZE)
}

/// As [`prepare_features`] with explicit joint list, frame count and size.
pub fn prepare_features_with(
    raw: &NdArray,
    joints: &[usize],
    frames: usize,
    size: usize,
) -> Result<NdArray> {
    let s = raw.shape();
    if s.len() != 4 || s[1] != WHOLE_BODY_LANDMARKS {
        return Err(SlrError::format(
            0,
            format!("heatmaps must be [frames, {WHOLE_BODY_LANDMARKS}, H, W], got {s:?}"),
        ));
    }
    let (t0, h0, w0) = (s[0], s[2], s[3]);
    if h0 < size || w0 < size {
        return Err(SlrError::format(
            0,
            format!("heatmaps {h0}x{w0} smaller than {size}x{size}"),
        ));
    }
    let idx = uniform_indices(t0, frames)?;
    let plane = h0 * w0;
    let mut out = vec![0.0; frames * joints.len() * size * size];
    for (t, &src_t) in idx.iter().enumerate() {
        for (j, &src_j) in joints.iter().enumerate() {
            let off = (src_t * WHOLE_BODY_LANDMARKS + src_j) * plane;
            let dst = (t * joints.len() + j) * size * size;
            max_pool_to(
                &raw.data()[off..off + plane],
                h0,
                w0,
                size,
                &mut out[dst..dst + size * size],
            );
        }
    }
    NdArray::new(&[frames, joints.len(), size, size], out)
}

/// Gaussian heatmap features rendered directly from keypoints, for when no
/// pose-estimator heatmaps are available. Each map peaks at the landmark's
/// position scaled by its confidence.
pub fn render_features(
    seq: &KeypointSequence,
    frames: usize,
    size: usize,
    sigma: f64,
) -> Result<NdArray> {
    if seq.landmarks() != WHOLE_BODY_LANDMARKS {
        return Err(SlrError::format(
            0,
            format!(
                "expected {WHOLE_BODY_LANDMARKS} landmarks, got {}",
                seq.landmarks()
            ),
        ));
    }
    let (w, h) = seq.frame_size;
    let idx = uniform_indices(seq.frames(), frames)?;
    let jn = FEATURE_JOINTS.len();
    let sc = seq.score_channel();
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = vec![0.0; frames * jn * size * size];
    for (t, &src) in idx.iter().enumerate() {
        for (j, &l) in FEATURE_JOINTS.iter().enumerate() {
            let cx = seq.get(src, l, 0) / w * size as f64;
            let cy = seq.get(src, l, 1) / h * size as f64;
            let s = seq.get(src, l, sc);
            let dst = &mut out[(t * jn + j) * size * size..(t * jn + j + 1) * size * size];
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dst[y * size + x] = s * (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
    }
    NdArray::new(&[frames, jn, size, size], out)
}

/// Interleave `groups` channel groups: `[N, G·K, H, W]` viewed as
/// `[N, G, K, H, W]` becomes `[N, K·G, H, W]` with channel `k·G + g`.
pub fn channel_shuffle(tape: &mut Tape, x: Var, groups: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || groups == 0 || !s[1].is_multiple_of(groups) {
        return Err(SlrError::dim("channel_shuffle", &s, &[groups]));
    }
    let k = s[1] / groups;
    let v = tape.reshape(x, &[s[0], groups, k, s[2] * s[3]])?;
    let p = tape.permute(v, &[0, 2, 1, 3])?;
    tape.reshape(p, &s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SstcnConfig {
    pub frames: usize,
    pub joints: usize,
    pub size: usize,
    /// Output channels per joint in stage 3.
    pub joint_channels: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl Default for SstcnConfig {
    fn default() -> Self {
        SstcnConfig {
            frames: FEATURE_FRAMES,
            joints: FEATURE_JOINT_COUNT,
            size: FEATURE_SIZE,
            joint_channels: 16,
            hidden: 256,
            dropout: 0.25,
            classes: 226,
        }
    }
}

impl SstcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0
            || self.joints == 0
            || self.size < 3
            || self.joint_channels == 0
            || self.hidden == 0
        {
            return Err(SlrError::Config(format!(
                "invalid SSTCN geometry: {self:?}"
            )));
        }
        if self.classes < 2 {
            return Err(SlrError::Config("at least two classes are needed".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SlrError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sstcn {
    pub config: SstcnConfig,
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub norm0: ChannelNorm,
    pub temporal: Conv,
    pub norm1: ChannelNorm,
    pub frame_conv: Conv,
    pub norm2: ChannelNorm,
    pub joint_conv: Conv,
    pub norm3: ChannelNorm,
    pub fc_hidden: Linear,
    pub fc_out: Linear,
}

fn staged<T>(stage: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ SlrError::Stage { .. } => e,
        e => SlrError::Stage {
            stage,
            msg: e.to_string(),
        },
    })
}

impl Sstcn {
    pub fn new(config: &SstcnConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (t, j, k) = (config.frames, config.joints, config.joint_channels);
        let tj = t * j;
        let same3 = |groups| Conv2dSpec::new((1, 1), (1, 1), groups);
        let point = |groups| Conv2dSpec::new((1, 1), (0, 0), groups);
        Ok(Sstcn {
            config: config.clone(),
            depthwise: Conv::new(store, "s0.depthwise", tj, tj, (3, 3), same3(tj), true, rng)?,
            pointwise: Conv::new(store, "s0.pointwise", tj, tj, (1, 1), point(t), true, rng)?,
            norm0: ChannelNorm::new(store, "s0.norm", tj),
            temporal: Conv::new(store, "s1.temporal", t, t, (1, 1), point(1), true, rng)?,
            norm1: ChannelNorm::new(store, "s1.norm", t),
            frame_conv: Conv::new(store, "s2.frame", tj, tj, (3, 3), same3(t), true, rng)?,
            norm2: ChannelNorm::new(store, "s2.norm", tj),
            joint_conv: Conv::new(store, "s3.joint", tj, j * k, (3, 3), same3(j), true, rng)?,
            norm3: ChannelNorm::new(store, "s3.norm", j * k),
            fc_hidden: Linear::new(store, "s4.hidden", j * k, config.hidden, rng),
            fc_out: {
                let l = Linear::new(store, "s4.out", config.hidden, config.classes, rng);
                store.value_mut(l.weight).fill(0.0);
                l
            },
        })
    }

    fn act(&self, tape: &mut Tape, x: Var, ctx: &mut Ctx) -> Result<Var> {
        let y = tape.swish(x);
        dropout(tape, y, self.config.dropout, ctx)
    }

    /// `x: [N, T, J, H, W]` -> logits `[N, classes]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let c = &self.config;
        let s = tape.shape(x).to_vec();
        let (t, j, hw) = (c.frames, c.joints, c.size);
        if s.len() != 5 || s[1..] != [t, j, hw, hw] {
            return Err(SlrError::Stage {
                stage: 0,
                msg: format!("input {s:?} does not match [N, {t}, {j}, {hw}, {hw}]"),
            });
        }
        let n = s[0];

        let x0 = staged(0, tape.reshape(x, &[n, t * j, hw, hw]))?;
        let h = staged(
            0,
            (|| {
                let h = self.depthwise.forward(tape, store, x0)?;
                let h = self.pointwise.forward(tape, store, h)?;
                let h = self.norm0.forward(tape, store, h, ctx)?;
                self.act(tape, h, ctx)
            })(),
        )?;

        let h = staged(
            1,
            (|| {
                let h = tape.reshape(h, &[n, t, j * hw, hw])?;
                let h = self.temporal.forward(tape, store, h)?;
                let h = self.norm1.forward(tape, store, h, ctx)?;
                self.act(tape, h, ctx)
            })(),
        )?;

        let h = staged(
            2,
            (|| {
                let h = tape.reshape(h, &[n, t * j, hw, hw])?;
                let h = self.frame_conv.forward(tape, store, h)?;
                let h = self.norm2.forward(tape, store, h, ctx)?;
                let h = tape.swish(h);
                let h = tape.add(h, x0)?;
                dropout(tape, h, c.dropout, ctx)
            })(),
        )?;

        let h = staged(
            3,
            (|| {
                let h = channel_shuffle(tape, h, t)?;
                let h = self.joint_conv.forward(tape, store, h)?;
                let h = self.norm3.forward(tape, store, h, ctx)?;
                self.act(tape, h, ctx)
            })(),
        )?;

        staged(
            4,
            (|| {
                let k = j * c.joint_channels;
                let p = tape.mean_to(h, &[n, k, 1, 1])?;
                let p = tape.reshape(p, &[n, k])?;
                let z = self.fc_hidden.forward(tape, store, p)?;
                let z = self.act(tape, z, ctx)?;
                self.fc_out.forward(tape, store, z)
            })(),
        )
    }

    pub fn predict(&self, store: &ParamStore, batch: &NdArray) -> Result<NdArray> {
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let y = self.forward(&mut tape, store, x, &mut Ctx::eval())?;
        Ok(tape.value(y).clone())
    }
}

impl Classifier for Sstcn {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, ctx: &mut Ctx) -> Result<Var> {
        Sstcn::forward(self, tape, store, x, ctx)
    }

    fn classes(&self) -> usize {
        self.config.classes
    }
}

/// Synthetic feature blocks `[T, J, S, S]`: each joint carries a Gaussian
/// blob that drifts along a class-specific direction.
pub fn synthetic_features(
    classes: usize,
    per_class: usize,
    cfg: &SstcnConfig,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<NdArray>, Vec<usize>)> {
    let (t, j, s) = (cfg.frames, cfg.joints, cfg.size);
    let normal = rand_distr::Normal::new(0.0, noise.max(f64::MIN_POSITIVE))
        .map_err(|e| SlrError::Config(format!("noise: {e}")))?;
    let mut xs = Vec::with_capacity(classes * per_class);
    let mut ys = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        for _ in 0..per_class {
            let x = NdArray::from_fn(&[t, j, s, s], |o| {
                let (ti, ji, y, xx) = (o / (j * s * s), (o / (s * s)) % j, (o / s) % s, o % s);
                let prog = ti as f64 / t.max(2).saturating_sub(1) as f64 - 0.5;
                let r = 0.3 * s as f64;
                let cx = s as f64 / 2.0 + r * prog * angle.cos() + 0.5 * ji as f64;
                let cy = s as f64 / 2.0 + r * prog * angle.sin();
                let d2 = (xx as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                (-d2 / 4.0).exp()
            });
            let mut x = x;
            if noise > 0.0 {
                for v in x.data_mut() {
                    *v += rand_distr::Distribution::sample(&normal, rng);
                }
            }
            xs.push(x);
            ys.push(class);
        }
    }
    Ok((xs, ys))
}
