//! Per-frame landmark sequences as produced by a whole-body pose estimator.

use crate::error::{Result, SlrError};

pub const WHOLE_BODY_LANDMARKS: usize = 133;

/// One depth image, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(SlrError::Input(format!(
                "depth map {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        DepthMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Landmarks for `frames` frames, stored frame-major as
/// `[frame][landmark][channel]`. Channels are `(x, y, s)` or `(x, y, z, s)`;
/// the confidence `s` is always last.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSequence {
    frames: usize,
    landmarks: usize,
    channels: usize,
    data: Vec<f64>,
    /// Frame size in pixels `(W, H)`.
    pub frame_size: (f64, f64),
    pub depth: Option<Vec<DepthMap>>,
}

impl KeypointSequence {
    pub fn new(
        frames: usize,
        landmarks: usize,
        channels: usize,
        data: Vec<f64>,
        frame_size: (f64, f64),
    ) -> Result<Self> {
        if channels != 3 && channels != 4 {
            return Err(SlrError::Input(format!(
                "channel count must be 3 or 4, got {channels}"
            )));
        }
        if frames == 0 || landmarks == 0 {
            return Err(SlrError::Input("empty keypoint sequence".into()));
        }
        if data.len() != frames * landmarks * channels {
            return Err(SlrError::Input(format!(
                "expected {} values for {frames}x{landmarks}x{channels}, got {}",
                frames * landmarks * channels,
                data.len()
            )));
        }
        let seq = KeypointSequence {
            frames,
            landmarks,
            channels,
            data,
            frame_size,
            depth: None,
        };
        if let Some((f, l)) = seq.first_bad_confidence() {
            return Err(SlrError::Input(format!(
                "confidence outside [0,1] at frame {f}, landmark {l}"
            )));
        }
        Ok(seq)
    }

    pub fn with_depth(mut self, depth: Vec<DepthMap>) -> Result<Self> {
        if depth.len() != self.frames {
            return Err(SlrError::Input(format!(
                "{} depth maps for {} frames",
                depth.len(),
                self.frames
            )));
        }
        self.depth = Some(depth);
        Ok(self)
    }

    fn first_bad_confidence(&self) -> Option<(usize, usize)> {
        for f in 0..self.frames {
            for l in 0..self.landmarks {
                let s = self.get(f, l, self.channels - 1);
                if !(0.0..=1.0).contains(&s) {
                    return Some((f, l));
                }
            }
        }
        None
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_3d(&self) -> bool {
        self.channels == 4
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, frame: usize, landmark: usize, channel: usize) -> usize {
        (frame * self.landmarks + landmark) * self.channels + channel
    }

    pub fn get(&self, frame: usize, landmark: usize, channel: usize) -> f64 {
        self.data[self.index(frame, landmark, channel)]
    }

    pub fn set(&mut self, frame: usize, landmark: usize, channel: usize, value: f64) {
        let i = self.index(frame, landmark, channel);
        self.data[i] = value;
    }

    pub fn landmark(&self, frame: usize, landmark: usize) -> &[f64] {
        let i = self.index(frame, landmark, 0);
        &self.data[i..i + self.channels]
    }

    /// Confidence channel index.
    pub fn score_channel(&self) -> usize {
        self.channels - 1
    }

    /// Number of coordinate channels (2 or 3).
    pub fn coord_channels(&self) -> usize {
        self.channels - 1
    }

    /// New sequence made of the given frames (indices may repeat).
    pub fn select_frames(&self, indices: &[usize]) -> KeypointSequence {
        let stride = self.landmarks * self.channels;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &f in indices {
            data.extend_from_slice(&self.data[f * stride..(f + 1) * stride]);
        }
        let depth = self
            .depth
            .as_ref()
            .map(|d| indices.iter().map(|&f| d[f].clone()).collect());
        KeypointSequence {
            frames: indices.len(),
            landmarks: self.landmarks,
            channels: self.channels,
            data,
            frame_size: self.frame_size,
            depth,
        }
    }

    /// New sequence made of the given landmarks, values copied unmodified.
    pub fn select_landmarks(&self, indices: &[usize]) -> KeypointSequence {
        let mut data = Vec::with_capacity(self.frames * indices.len() * self.channels);
        for f in 0..self.frames {
            for &l in indices {
                data.extend_from_slice(self.landmark(f, l));
            }
        }
        KeypointSequence {
            frames: self.frames,
            landmarks: indices.len(),
            channels: self.channels,
            data,
            frame_size: self.frame_size,
            depth: self.depth.clone(),
        }
    }

    /// Rebuild with a different channel layout; used when adding depth.
    pub(crate) fn from_parts(
        frames: usize,
        landmarks: usize,
        channels: usize,
        data: Vec<f64>,
        frame_size: (f64, f64),
    ) -> Self {
        debug_assert_eq!(data.len(), frames * landmarks * channels);
        KeypointSequence {
            frames,
            landmarks,
            channels,
            data,
            frame_size,
            depth: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_confidence() {
        let mut data = vec![0.5; 2 * 3];
        data[5] = 1.5;
        let err = KeypointSequence::new(1, 2, 3, data, (10.0, 10.0)).unwrap_err();
        assert!(err.to_string().contains("landmark 1"));
    }

    #[test]
    fn frame_selection_repeats() {
        let data: Vec<f64> = (0..3 * 2 * 3).map(|i| (i % 3) as f64 / 3.0).collect();
        let seq = KeypointSequence::new(3, 2, 3, data, (1.0, 1.0)).unwrap();
        let s = seq.select_frames(&[2, 0, 2]);
        assert_eq!(s.frames(), 3);
        assert_eq!(s.landmark(0, 1), seq.landmark(2, 1));
    }
}
