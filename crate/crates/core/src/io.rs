//! On-disk formats, run configuration and checkpoints.
//!
//! Binary files are little-endian: a four-byte magic, a `u16` version, a
//! format-specific header, then an `f32` body. Sample ids, labels and signer
//! ids live in a tab-separated `<file>.manifest` sidecar; depth maps for a
//! keypoint file in a `<file>.depth` sidecar. Every read error reports the
//! byte offset where decoding failed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SlrError};
use crate::fusion::{GemConfig, GemTrainConfig, LogitMatrix, RGB_TRACK_WEIGHTS};
use crate::keypoints::{DepthMap, KeypointSequence};
use crate::numeric::{NdArray, ParamStore};
use crate::slgcn::SlgcnConfig;
use crate::sstcn::SstcnConfig;
use crate::streams::{StreamConfig, StreamKind};
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u16 = 1;
pub const KEYPOINT_MAGIC: [u8; 4] = *b"SLRK";
pub const DEPTH_MAGIC: [u8; 4] = *b"SLRD";
pub const STREAM_MAGIC: [u8; 4] = *b"SLRT";
pub const FEATURE_MAGIC: [u8; 4] = *b"SLRF";
pub const LOGIT_MAGIC: [u8; 4] = *b"SLRL";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLRC";

// ---------------------------------------------------------------- bytes

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(SlrError::format(
                self.offset(),
                format!(
                    "truncated: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn extent(&mut self, what: &str) -> Result<usize> {
        let at = self.offset();
        match self.u32()? {
            0 => Err(SlrError::format(at, format!("{what} must be positive"))),
            n => Ok(n as usize),
        }
    }

    fn string(&mut self, len: usize) -> Result<String> {
        let at = self.offset();
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| SlrError::format(at, "invalid UTF-8"))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(SlrError::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(&magic)
                ),
            ));
        }
        let v = self.u16()?;
        if v != FORMAT_VERSION {
            return Err(SlrError::format(4, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| SlrError::format(start, "body too large"))?,
        )?;
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, b)| {
                let v = f32::from_le_bytes(b.try_into().unwrap());
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(SlrError::format(start + 4 * i as u64, "non-finite value"))
                }
            })
            .collect()
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| SlrError::format(start, "body too large"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(SlrError::format(
                self.offset(),
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_header(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| SlrError::Input(format!("extent {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    out.reserve(values.len() * 4);
    for (i, &v) in values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(SlrError::Numeric(format!(
                "value {v} at element {i} not representable as f32"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

/// Write via a temporary file in the same directory and rename over the
/// target, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| SlrError::Input(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn manifest_path(path: &Path) -> PathBuf {
    sidecar(path, ".manifest")
}

pub fn depth_path(path: &Path) -> PathBuf {
    sidecar(path, ".depth")
}

// ---------------------------------------------------------------- manifest

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub label: Option<usize>,
    pub signer: Option<String>,
}

impl ManifestRow {
    pub fn new(id: impl Into<String>, label: Option<usize>, signer: Option<String>) -> Self {
        ManifestRow {
            id: id.into(),
            label,
            signer,
        }
    }
}

/// Per-row sample metadata; `-` marks a missing label or signer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub const HEADER: &'static str = "# id\tlabel\tsigner";

    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &rows {
            if r.id.is_empty() || r.id.contains(['\t', '\n']) {
                return Err(SlrError::Input(format!("invalid sample id {:?}", r.id)));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(SlrError::Input(format!("duplicate sample id {}", r.id)));
            }
        }
        Ok(Manifest { rows })
    }

    pub fn from_ids(ids: &[String], labels: Option<&[usize]>) -> Result<Self> {
        Manifest::new(
            ids.iter()
                .enumerate()
                .map(|(i, id)| ManifestRow::new(id.clone(), labels.map(|l| l[i]), None))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.id.clone()).collect()
    }

    /// All labels, or `None` if any row lacks one.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn encode(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let label = r.label.map_or("-".to_string(), |l| l.to_string());
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                r.id,
                label,
                r.signer.as_deref().unwrap_or("-")
            ));
        }
        s
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let at = offset;
            offset += line.len() as u64;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(SlrError::format(
                    at,
                    format!("expected 3 tab-separated fields, got {}", f.len()),
                ));
            }
            let label = match f[1] {
                "-" => None,
                l => Some(
                    l.parse()
                        .map_err(|_| SlrError::format(at, format!("bad label {l:?}")))?,
                ),
            };
            let signer = (f[2] != "-").then(|| f[2].to_string());
            rows.push(ManifestRow::new(f[0], label, signer));
        }
        Manifest::new(rows).map_err(|e| SlrError::format(0, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.encode().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Manifest::decode(&fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------- keypoints

/// Header: magic, version, channels `u16`, frames `u32`, landmarks `u32`,
/// frame width and height `f32`; body `[T][landmarks][channels]`.
pub fn encode_keypoints(seq: &KeypointSequence) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + seq.data().len() * 4);
    put_header(&mut out, KEYPOINT_MAGIC);
    out.extend_from_slice(&(seq.channels() as u16).to_le_bytes());
    put_u32(&mut out, seq.frames())?;
    put_u32(&mut out, seq.landmarks())?;
    put_f32s(&mut out, &[seq.frame_size.0, seq.frame_size.1])?;
    put_f32s(&mut out, seq.data())?;
    Ok(out)
}

pub fn decode_keypoints(bytes: &[u8]) -> Result<KeypointSequence> {
    let mut r = Reader::new(bytes);
    r.header(KEYPOINT_MAGIC)?;
    let at = r.offset();
    let channels = r.u16()? as usize;
    if channels != 3 && channels != 4 {
        return Err(SlrError::format(
            at,
            format!("channel count must be 3 or 4, got {channels}"),
        ));
    }
    let frames = r.extent("frame count")?;
    let landmarks = r.extent("landmark count")?;
    let at = r.offset();
    let size = r.f32s(2)?;
    if size.iter().any(|&v| v <= 0.0) {
        return Err(SlrError::format(at, "frame size must be positive"));
    }
    let body = r.offset();
    let data = r.f32s(frames * landmarks * channels)?;
    r.finish()?;
    KeypointSequence::new(frames, landmarks, channels, data, (size[0], size[1]))
        .map_err(|e| SlrError::format(body, e.to_string()))
}

/// Header: magic, version, reserved `u16`, frames, width, height (`u32`);
/// body `[T][H][W]`.
pub fn encode_depth(maps: &[DepthMap]) -> Result<Vec<u8>> {
    let first = maps
        .first()
        .ok_or_else(|| SlrError::Input("no depth maps".into()))?;
    let mut out = Vec::new();
    put_header(&mut out, DEPTH_MAGIC);
    out.extend_from_slice(&0u16.to_le_bytes());
    put_u32(&mut out, maps.len())?;
    put_u32(&mut out, first.width)?;
    put_u32(&mut out, first.height)?;
    for m in maps {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(SlrError::Input("depth maps differ in size".into()));
        }
        put_f32s(&mut out, &m.data)?;
    }
    Ok(out)
}

pub fn decode_depth(bytes: &[u8]) -> Result<Vec<DepthMap>> {
    let mut r = Reader::new(bytes);
    r.header(DEPTH_MAGIC)?;
    r.u16()?;
    let frames = r.extent("frame count")?;
    let w = r.extent("width")?;
    let h = r.extent("height")?;
    let maps = (0..frames)
        .map(|_| Ok(DepthMap::new(w, h, r.f32s(w * h)?).unwrap()))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(maps)
}

/// Keypoint file plus its manifest and depth sidecars when present.
pub fn write_keypoints(
    path: &Path,
    seq: &KeypointSequence,
    row: Option<&ManifestRow>,
) -> Result<()> {
    write_atomic(path, &encode_keypoints(seq)?)?;
    if let Some(depth) = &seq.depth {
        write_atomic(&depth_path(path), &encode_depth(depth)?)?;
    }
    if let Some(row) = row {
        Manifest::new(vec![row.clone()])?.write(&manifest_path(path))?;
    }
    Ok(())
}

pub fn read_keypoints(path: &Path) -> Result<(KeypointSequence, Option<ManifestRow>)> {
    let mut seq = decode_keypoints(&fs::read(path)?)?;
    let dp = depth_path(path);
    if dp.exists() {
        seq = seq.with_depth(decode_depth(&fs::read(dp)?)?)?;
    }
    let mp = manifest_path(path);
    let row = if mp.exists() {
        let m = Manifest::read(&mp)?;
        if m.len() != 1 {
            return Err(SlrError::format(
                0,
                format!("keypoint manifest has {} rows, expected 1", m.len()),
            ));
        }
        m.rows.into_iter().next()
    } else {
        None
    };
    Ok((seq, row))
}

// ---------------------------------------------------------------- tensors

/// Header: magic, version, tag `u16`, rank `u32`, extents `u32`; body
/// row-major.
pub fn encode_tensor(magic: [u8; 4], tag: u16, x: &NdArray) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * x.ndim() + 4 * x.len());
    put_header(&mut out, magic);
    out.extend_from_slice(&tag.to_le_bytes());
    put_u32(&mut out, x.ndim())?;
    for &d in x.shape() {
        put_u32(&mut out, d)?;
    }
    put_f32s(&mut out, x.data())?;
    Ok(out)
}

pub fn decode_tensor(magic: [u8; 4], bytes: &[u8]) -> Result<(u16, NdArray)> {
    let mut r = Reader::new(bytes);
    r.header(magic)?;
    let tag = r.u16()?;
    let at = r.offset();
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(SlrError::format(at, format!("unsupported rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| r.extent("extent"))
        .collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = n.ok_or_else(|| SlrError::format(at, "extent product overflows"))?;
    let data = r.f32s(n)?;
    r.finish()?;
    Ok((tag, NdArray::new(&shape, data)?))
}

/// A batch of one stream, `[S, C, T, V]`, with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamFile {
    pub kind: StreamKind,
    pub data: NdArray,
    pub manifest: Manifest,
}

impl StreamFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.data.ndim() != 4 || self.data.shape()[0] != self.manifest.len() {
            return Err(SlrError::Input(format!(
                "stream batch {:?} does not match {} manifest rows",
                self.data.shape(),
                self.manifest.len()
            )));
        }
        write_atomic(
            path,
            &encode_tensor(STREAM_MAGIC, self.kind.code() as u16, &self.data)?,
        )?;
        self.manifest.write(&manifest_path(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (tag, data) = decode_tensor(STREAM_MAGIC, &fs::read(path)?)?;
        let kind = u8::try_from(tag)
            .ok()
            .and_then(StreamKind::from_code)
            .ok_or_else(|| SlrError::format(6, format!("unknown stream kind {tag}")))?;
        if data.ndim() != 4 {
            return Err(SlrError::format(
                8,
                format!("stream batch must have rank 4, got {:?}", data.shape()),
            ));
        }
        let manifest = read_manifest_for(path, data.shape()[0])?;
        Ok(StreamFile {
            kind,
            data,
            manifest,
        })
    }
}

/// A batch of heatmap features, `[S, T, J, H, W]`, with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub data: NdArray,
    pub manifest: Manifest,
}

impl FeatureFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.data.ndim() != 5 || self.data.shape()[0] != self.manifest.len() {
            return Err(SlrError::Input(format!(
                "feature batch {:?} does not match {} manifest rows",
                self.data.shape(),
                self.manifest.len()
            )));
        }
        write_atomic(path, &encode_tensor(FEATURE_MAGIC, 0, &self.data)?)?;
        self.manifest.write(&manifest_path(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (_, data) = decode_tensor(FEATURE_MAGIC, &fs::read(path)?)?;
        if data.ndim() != 5 {
            return Err(SlrError::format(
                8,
                format!("feature batch must have rank 5, got {:?}", data.shape()),
            ));
        }
        let manifest = read_manifest_for(path, data.shape()[0])?;
        Ok(FeatureFile { data, manifest })
    }
}

fn read_manifest_for(path: &Path, rows: usize) -> Result<Manifest> {
    let mp = manifest_path(path);
    if !mp.exists() {
        return Err(SlrError::Input(format!(
            "missing manifest {}",
            mp.display()
        )));
    }
    let m = Manifest::read(&mp)?;
    if m.len() != rows {
        return Err(SlrError::format(
            0,
            format!("{} has {} rows for {rows} samples", mp.display(), m.len()),
        ));
    }
    Ok(m)
}

// ---------------------------------------------------------------- logits

/// Header: magic, version, name length `u16`, UTF-8 modality name, S and C
/// (`u32`); body `[S][C]`.
pub fn encode_logits(m: &LogitMatrix) -> Result<Vec<u8>> {
    let name = m.modality.as_bytes();
    let len =
        u16::try_from(name.len()).map_err(|_| SlrError::Input("modality name too long".into()))?;
    let mut out = Vec::with_capacity(16 + name.len() + 4 * m.scores.len());
    put_header(&mut out, LOGIT_MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name);
    put_u32(&mut out, m.samples())?;
    put_u32(&mut out, m.classes())?;
    put_f32s(&mut out, m.scores.data())?;
    Ok(out)
}

/// Decoded modality name and `[S, C]` scores.
pub fn decode_logits(bytes: &[u8]) -> Result<(String, NdArray)> {
    let mut r = Reader::new(bytes);
    r.header(LOGIT_MAGIC)?;
    let len = r.u16()? as usize;
    let name = r.string(len)?;
    let s = r.extent("sample count")?;
    let c = r.extent("class count")?;
    let data = r.f32s(s * c)?;
    r.finish()?;
    Ok((name, NdArray::new(&[s, c], data)?))
}

/// Logits with sample ids (and labels, when known) from the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitFile {
    pub logits: LogitMatrix,
    pub labels: Option<Vec<usize>>,
}

impl LogitFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode_logits(&self.logits)?)?;
        Manifest::from_ids(&self.logits.ids, self.labels.as_deref())?.write(&manifest_path(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (name, scores) = decode_logits(&fs::read(path)?)?;
        let m = read_manifest_for(path, scores.shape()[0])?;
        let labels = m.labels();
        if let Some(l) = &labels {
            if let Some(&bad) = l.iter().find(|&&y| y >= scores.shape()[1]) {
                return Err(SlrError::Input(format!(
                    "label {bad} out of range for {} classes",
                    scores.shape()[1]
                )));
            }
        }
        Ok(LogitFile {
            logits: LogitMatrix::new(name, m.ids(), scores)?,
            labels,
        })
    }
}

// ---------------------------------------------------------------- import

/// One frame per line: either an array of `[x, y, s]` triples, a flat
/// array of `3 · landmarks` numbers, or an object with such an array under
/// `"keypoints"`. Blank lines are skipped.
pub fn import_jsonl(
    text: &str,
    landmarks: usize,
    frame_size: (f64, f64),
) -> Result<KeypointSequence> {
    let mut data = Vec::new();
    let mut frames = 0;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| SlrError::format(at, format!("invalid JSON: {e}")))?;
        let arr = match &v {
            serde_json::Value::Object(o) => o.get("keypoints"),
            other => Some(other),
        }
        .and_then(|a| a.as_array())
        .ok_or_else(|| SlrError::format(at, "expected an array of keypoints"))?;
        let mut flat = Vec::with_capacity(3 * landmarks);
        for item in arr {
            match item {
                serde_json::Value::Array(t) if t.len() == 3 => {
                    flat.extend(t.iter().map(|x| x.as_f64()))
                }
                other => flat.push(other.as_f64()),
            }
        }
        let flat: Option<Vec<f64>> = flat.into_iter().collect();
        let flat = flat.ok_or_else(|| {
            SlrError::format(at, "keypoint entries must be numbers or [x, y, s] triples")
        })?;
        if flat.len() != 3 * landmarks {
            return Err(SlrError::format(
                at,
                format!(
                    "frame {frames} has {} values, expected {}",
                    flat.len(),
                    3 * landmarks
                ),
            ));
        }
        data.extend(flat);
        frames += 1;
    }
    if frames == 0 {
        return Err(SlrError::format(0, "no frames"));
    }
    KeypointSequence::new(frames, landmarks, 3, data, frame_size)
        .map_err(|e| SlrError::format(0, e.to_string()))
}

// ---------------------------------------------------------------- config

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    #[default]
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

impl InputMode {
    pub fn is_3d(self) -> bool {
        self == InputMode::ThreeD
    }

    pub fn channels(self) -> usize {
        if self.is_3d() {
            4
        } else {
            3
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// `2d` uses `(x, y, s)`; `3d` adds depth sampled from depth maps.
    pub mode: InputMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Fixed per-modality weights, in input order.
    pub weights: Vec<f64>,
    /// Sensitivity sweep grid, `start:stop:step` or a comma list.
    pub grid: String,
    pub gem: GemConfig,
    pub gem_train: GemTrainConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            weights: RGB_TRACK_WEIGHTS.to_vec(),
            grid: "0:2:0.1".into(),
            gem: GemConfig::default(),
            gem_train: GemTrainConfig::default(),
        }
    }
}

/// Every tunable of a run. Omitted keys take their defaults; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub graph: GraphConfig,
    pub streams: StreamConfig,
    pub sl_gcn: SlgcnConfig,
    pub sstcn: SstcnConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| SlrError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SlrError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.streams.validate()?;
        self.sl_gcn.validate()?;
        self.sstcn.validate()?;
        self.train.validate()?;
        crate::fusion::parse_grid(&self.fusion.grid)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------- checkpoints

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Slgcn,
    Sstcn,
    Gem,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Slgcn => "slgcn",
            ModelKind::Sstcn => "sstcn",
            ModelKind::Gem => "gem",
        }
    }
}

/// What a checkpoint holds beyond the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub classes: usize,
    /// Stream an SL-GCN was trained on.
    #[serde(default)]
    pub stream: Option<StreamKind>,
    /// Modality names a GEM was trained on, in input order.
    #[serde(default)]
    pub modalities: Vec<String>,
}

/// Parameters, optimizer velocities and step counter, with the run
/// configuration and its hash. Values are stored as `f64` so resuming is
/// exact.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: ModelMeta,
    pub config: RunConfig,
    pub step: usize,
    pub params: ParamStore,
    pub velocities: Vec<Option<NdArray>>,
}

fn put_f64_array(out: &mut Vec<u8>, x: &NdArray) -> Result<()> {
    out.push(x.ndim() as u8);
    for &d in x.shape() {
        put_u32(out, d)?;
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn read_f64_array(r: &mut Reader) -> Result<NdArray> {
    let rank = r.u8()? as usize;
    let shape = (0..rank)
        .map(|_| r.extent("extent"))
        .collect::<Result<Vec<_>>>()?;
    let at = r.offset();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| SlrError::format(at, "extent product overflows"))?;
    NdArray::new(&shape, r.f64s(n)?)
}

impl Checkpoint {
    /// Layout: magic, version, step `u64`, JSON metadata and TOML config
    /// (each `u32` length + bytes), SHA-256 of the config text, parameter
    /// count `u32`, then per parameter: name, trainable flag, value, and an
    /// optional velocity.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        put_header(&mut out, CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.step as u64).to_le_bytes());
        let meta =
            serde_json::to_string(&self.meta).map_err(|e| SlrError::Config(e.to_string()))?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        let cfg = self.config.to_toml()?;
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&Sha256::digest(cfg.as_bytes()));
        put_u32(&mut out, self.params.len())?;
        for (i, p) in self.params.iter().enumerate() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(p.trainable as u8);
            put_f64_array(&mut out, &p.value)?;
            match self.velocities.get(i).and_then(|v| v.as_ref()) {
                Some(v) => {
                    out.push(1);
                    put_f64_array(&mut out, v)?;
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC)?;
        let step = r.u64()? as usize;
        let at = r.offset();
        let len = r.u32()? as usize;
        let meta: ModelMeta = serde_json::from_str(&r.string(len)?)
            .map_err(|e| SlrError::format(at, format!("bad metadata: {e}")))?;
        let at = r.offset();
        let len = r.u32()? as usize;
        let text = r.string(len)?;
        let hash_at = r.offset();
        let stored = r.take(32)?;
        if stored != Sha256::digest(text.as_bytes()).as_slice() {
            return Err(SlrError::format(hash_at, "configuration hash mismatch"));
        }
        let config =
            RunConfig::from_toml(&text).map_err(|e| SlrError::format(at, e.to_string()))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut velocities = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = r.string(len)?;
            let trainable = r.u8()? != 0;
            let value = read_f64_array(&mut r)?;
            if trainable {
                params.add(name, value);
            } else {
                params.add_buffer(name, value);
            }
            let at = r.offset();
            velocities.push(match r.u8()? {
                0 => None,
                1 => Some(read_f64_array(&mut r)?),
                f => return Err(SlrError::format(at, format!("bad velocity flag {f}"))),
            });
        }
        r.finish()?;
        Ok(Checkpoint {
            meta,
            config,
            step,
            params,
            velocities,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Checkpoint::decode(&fs::read(path)?)
    }
}
