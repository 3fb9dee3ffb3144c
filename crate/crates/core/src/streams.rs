//! Joint, bone and motion streams from reduced keypoint sequences, together
//! with coordinate normalization, temporal sampling and augmentation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlrError};
use crate::graph::SkeletonGraph;
use crate::keypoints::KeypointSequence;
use crate::numeric::NdArray;

pub const DEFAULT_SAMPLE_FRAMES: usize = 150;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl StreamKind {
    pub const ALL: [StreamKind; 4] = [
        StreamKind::Joint,
        StreamKind::Bone,
        StreamKind::JointMotion,
        StreamKind::BoneMotion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
            StreamKind::JointMotion => "joint_motion",
            StreamKind::BoneMotion => "bone_motion",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_motion(self) -> bool {
        matches!(self, StreamKind::JointMotion | StreamKind::BoneMotion)
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StreamKind {
    type Err = SlrError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| SlrError::Config(format!("unknown stream kind {s:?}")))
    }
}

/// One stream as a `[C, T, V]` array; the last channel is the confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamTensor {
    pub kind: StreamKind,
    pub data: NdArray,
}

impl StreamTensor {
    pub fn new(kind: StreamKind, data: NdArray) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || !(s[0] == 3 || s[0] == 4) {
            return Err(SlrError::dim("StreamTensor", s, &[3, 0, 0]));
        }
        Ok(StreamTensor { kind, data })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn nodes(&self) -> usize {
        self.data.shape()[2]
    }

    /// Channel-major joint stream from a `[T][V][C]` keypoint sequence.
    pub fn from_sequence(seq: &KeypointSequence) -> Self {
        let (t, v, c) = (seq.frames(), seq.landmarks(), seq.channels());
        let data = NdArray::from_fn(&[c, t, v], |o| {
            let ch = o / (t * v);
            let f = (o / v) % t;
            let n = o % v;
            seq.get(f, n, ch)
        });
        StreamTensor {
            kind: StreamKind::Joint,
            data,
        }
    }
}

/// All four streams of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSet {
    pub joint: StreamTensor,
    pub bone: StreamTensor,
    pub joint_motion: StreamTensor,
    pub bone_motion: StreamTensor,
}

impl StreamSet {
    pub fn get(&self, kind: StreamKind) -> &StreamTensor {
        match kind {
            StreamKind::Joint => &self.joint,
            StreamKind::Bone => &self.bone,
            StreamKind::JointMotion => &self.joint_motion,
            StreamKind::BoneMotion => &self.bone_motion,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &StreamTensor> {
        [
            &self.joint,
            &self.bone,
            &self.joint_motion,
            &self.bone_motion,
        ]
        .into_iter()
    }
}

/// Bone vectors over the tree rooted at the graph root: each node holds its
/// coordinates minus its parent's, with the node's own confidence; the root
/// bone is zero.
pub fn derive_bones(joints: &StreamTensor, graph: &SkeletonGraph) -> Result<StreamTensor> {
    if joints.kind != StreamKind::Joint {
        return Err(SlrError::Input(format!(
            "bones need a joint stream, got {}",
            joints.kind
        )));
    }
    if joints.nodes() != graph.node_count() {
        return Err(SlrError::dim(
            "derive_bones",
            joints.data.shape(),
            &[graph.node_count()],
        ));
    }
    let parents = graph.bone_parents()?;
    let (c, t, v) = (joints.channels(), joints.frames(), joints.nodes());
    let src = joints.data.data();
    let mut out = src.to_vec();
    for ch in 0..c - 1 {
        for f in 0..t {
            let row = (ch * t + f) * v;
            for (node, parent) in parents.iter().enumerate() {
                out[row + node] = match parent {
                    Some(p) => src[row + node] - src[row + p],
                    None => 0.0,
                };
            }
        }
    }
    StreamTensor::new(StreamKind::Bone, NdArray::new(joints.data.shape(), out)?)
}

/// Frame differences `x[t + 1] - x[t]`; the last frame is zero and the
/// confidence channel is copied from frame `t`.
pub fn derive_motion(x: &StreamTensor) -> Result<StreamTensor> {
    let kind = match x.kind {
        StreamKind::Joint => StreamKind::JointMotion,
        StreamKind::Bone => StreamKind::BoneMotion,
        other => return Err(SlrError::Input(format!("motion of a {other} stream"))),
    };
    let (c, t, v) = (x.channels(), x.frames(), x.nodes());
    if t < 2 {
        return Err(SlrError::Input(format!(
            "motion needs at least 2 frames, got {t}"
        )));
    }
    let src = x.data.data();
    let mut out = src.to_vec();
    for ch in 0..c - 1 {
        for f in 0..t {
            let row = (ch * t + f) * v;
            for n in 0..v {
                out[row + n] = if f + 1 < t {
                    src[row + v + n] - src[row + n]
                } else {
                    0.0
                };
            }
        }
    }
    StreamTensor::new(kind, NdArray::new(x.data.shape(), out)?)
}

pub fn build_streams(joints: StreamTensor, graph: &SkeletonGraph) -> Result<StreamSet> {
    let bone = derive_bones(&joints, graph)?;
    let joint_motion = derive_motion(&joints)?;
    let bone_motion = derive_motion(&bone)?;
    Ok(StreamSet {
        joint: joints,
        bone,
        joint_motion,
        bone_motion,
    })
}

/// Map pixel coordinates into `[-1, 1]`: `x -> 2x/W - 1`, `y -> 2y/H - 1`.
/// Depth and confidence are left alone.
pub fn normalize_coords(
    seq: &KeypointSequence,
    frame_size: (f64, f64),
) -> Result<KeypointSequence> {
    let (w, h) = frame_size;
    if !(w > 0.0 && h > 0.0) {
        return Err(SlrError::Input(format!(
            "frame size must be positive, got {w}x{h}"
        )));
    }
    let mut out = seq.clone();
    for f in 0..seq.frames() {
        for l in 0..seq.landmarks() {
            out.set(f, l, 0, 2.0 * seq.get(f, l, 0) / w - 1.0);
            out.set(f, l, 1, 2.0 * seq.get(f, l, 1) / h - 1.0);
        }
    }
    Ok(out)
}

/// How a clip longer than the target length is windowed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalSampling {
    /// Centered window; deterministic.
    #[default]
    RepeatTile,
    /// Uniformly random window offset.
    RandomWindow,
}

/// Frame indices for a clip of `len` frames resampled to `target`.
///
/// Short clips are tiled cyclically; long clips take a `target`-frame window,
/// centered unless `rng` is given.
pub fn sample_indices<R: Rng + ?Sized>(
    len: usize,
    target: usize,
    rng: Option<&mut R>,
) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(SlrError::Input("cannot sample from an empty clip".into()));
    }
    if target == 0 {
        return Err(SlrError::Config("sample length must be positive".into()));
    }
    if len < target {
        return Ok((0..target).map(|i| i % len).collect());
    }
    let slack = len - target;
    let start = match rng {
        Some(r) => r.random_range(0..=slack),
        None => slack / 2,
    };
    Ok((start..start + target).collect())
}

pub fn sample_frames<R: Rng + ?Sized>(
    seq: &KeypointSequence,
    target: usize,
    rng: Option<&mut R>,
) -> Result<KeypointSequence> {
    let idx = sample_indices(seq.frames(), target, rng)?;
    Ok(seq.select_frames(&idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub mirror_prob: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_range: f64,
    /// Scale factor drawn from `[1 - scale_range, 1 + scale_range]`.
    pub scale_range: f64,
    pub jitter_std: f64,
    /// Per-sequence offset drawn from `[-shift_range, shift_range]` per axis.
    pub shift_range: f64,
    pub temporal_sampling: TemporalSampling,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            mirror_prob: 0.5,
            rotation_range: 13.0,
            scale_range: 0.1,
            jitter_std: 0.01,
            shift_range: 0.1,
            temporal_sampling: TemporalSampling::RandomWindow,
        }
    }
}

impl AugmentationConfig {
    /// Every augmentation switched off.
    pub fn identity() -> Self {
        AugmentationConfig {
            mirror_prob: 0.0,
            rotation_range: 0.0,
            scale_range: 0.0,
            jitter_std: 0.0,
            shift_range: 0.0,
            temporal_sampling: TemporalSampling::RepeatTile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mirror_prob) {
            return Err(SlrError::Config(format!(
                "mirror_prob {} outside [0,1]",
                self.mirror_prob
            )));
        }
        let ranges = [
            ("rotation_range", self.rotation_range),
            ("scale_range", self.scale_range),
            ("jitter_std", self.jitter_std),
            ("shift_range", self.shift_range),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SlrError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if self.scale_range >= 1.0 {
            return Err(SlrError::Config("scale_range must be below 1".into()));
        }
        Ok(())
    }
}

/// Negate x and swap the paired left/right nodes.
pub fn mirror(seq: &KeypointSequence, permutation: &[usize]) -> Result<KeypointSequence> {
    if permutation.len() != seq.landmarks() {
        return Err(SlrError::dim(
            "mirror",
            &[seq.landmarks()],
            &[permutation.len()],
        ));
    }
    let mut out = seq.clone();
    for f in 0..seq.frames() {
        for (l, &src) in permutation.iter().enumerate() {
            for ch in 0..seq.channels() {
                let v = seq.get(f, src, ch);
                out.set(f, l, ch, if ch == 0 { -v } else { v });
            }
        }
    }
    Ok(out)
}

/// Counter-clockwise rotation by `degrees` in the (x, y) plane about the
/// origin: `(1, 0)` rotated by 90° becomes `(0, 1)`.
pub fn rotate(seq: &mut KeypointSequence, degrees: f64) {
    if degrees == 0.0 {
        return;
    }
    let (s, c) = degrees.to_radians().sin_cos();
    for f in 0..seq.frames() {
        for l in 0..seq.landmarks() {
            let (x, y) = (seq.get(f, l, 0), seq.get(f, l, 1));
            seq.set(f, l, 0, c * x - s * y);
            seq.set(f, l, 1, s * x + c * y);
        }
    }
}

fn map_xy(seq: &mut KeypointSequence, mut f: impl FnMut(usize, f64) -> f64) {
    for fr in 0..seq.frames() {
        for l in 0..seq.landmarks() {
            for ch in 0..2 {
                let v = seq.get(fr, l, ch);
                seq.set(fr, l, ch, f(ch, v));
            }
        }
    }
}

/// Apply, in order, mirror, rotation, scaling, shift and jitter to the (x, y)
/// channels of a normalized sequence. Confidence is never modified.
pub fn augment<R: Rng + ?Sized>(
    seq: &KeypointSequence,
    cfg: &AugmentationConfig,
    mirror_permutation: &[usize],
    rng: &mut R,
) -> Result<KeypointSequence> {
    cfg.validate()?;
    let mut out = if cfg.mirror_prob > 0.0 && rng.random::<f64>() < cfg.mirror_prob {
        mirror(seq, mirror_permutation)?
    } else {
        seq.clone()
    };
    if cfg.rotation_range > 0.0 {
        let deg = rng.random_range(-cfg.rotation_range..=cfg.rotation_range);
        rotate(&mut out, deg);
    }
    if cfg.scale_range > 0.0 {
        let k = rng.random_range(1.0 - cfg.scale_range..=1.0 + cfg.scale_range);
        map_xy(&mut out, |_, v| v * k);
    }
    if cfg.shift_range > 0.0 {
        let d = [
            rng.random_range(-cfg.shift_range..=cfg.shift_range),
            rng.random_range(-cfg.shift_range..=cfg.shift_range),
        ];
        map_xy(&mut out, |ch, v| v + d[ch]);
    }
    if cfg.jitter_std > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_std)
            .map_err(|e| SlrError::Config(format!("jitter: {e}")))?;
        map_xy(&mut out, |_, v| v + normal.sample(rng));
    }
    Ok(out)
}

/// Settings for turning one whole-body keypoint sequence into streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Frames per sample after temporal sampling.
    pub frames: usize,
    pub augmentation: AugmentationConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            frames: DEFAULT_SAMPLE_FRAMES,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(SlrError::Config(format!(
                "frames must be at least 2, got {}",
                self.frames
            )));
        }
        self.augmentation.validate()
    }
}

/// Full per-sample preparation: reduce to 27 nodes, attach depth (3d),
/// normalize coordinates, sample frames, augment, derive the four streams.
///
/// With `rng = None` the result is deterministic (centered window, no
/// augmentation); with an rng the training-time sampling and augmentation
/// apply.
pub fn prepare_streams<R: Rng + ?Sized>(
    seq: &KeypointSequence,
    cfg: &StreamConfig,
    three_d: bool,
    rng: Option<&mut R>,
) -> Result<StreamSet> {
    cfg.validate()?;
    let mut reduced = crate::graph::reduce_graph(seq)?;
    if three_d {
        reduced = crate::graph::attach_depth(&reduced)?;
    }
    let normalized = normalize_coords(&reduced, seq.frame_size)?;
    let sampled = match rng {
        None => sample_frames::<R>(&normalized, cfg.frames, None)?,
        Some(rng) => {
            let windowed = if cfg.augmentation.temporal_sampling == TemporalSampling::RandomWindow {
                sample_frames(&normalized, cfg.frames, Some(&mut *rng))?
            } else {
                sample_frames::<R>(&normalized, cfg.frames, None)?
            };
            augment(
                &windowed,
                &cfg.augmentation,
                &crate::graph::mirror_permutation(),
                rng,
            )?
        }
    };
    build_streams(
        StreamTensor::from_sequence(&sampled),
        &SkeletonGraph::reduced(),
    )
}
