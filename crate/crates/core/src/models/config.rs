use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Hierarchical attention network.
    HVector,
    /// TDNN stack, statistics pooling, dense classifier.
    XVector,
    /// X-vector with one global attention before pooling.
    AttXVector,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::HVector => "h_vector",
            ModelKind::XVector => "x_vector",
            ModelKind::AttXVector => "att_x_vector",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h_vector" => Ok(ModelKind::HVector),
            "x_vector" => Ok(ModelKind::XVector),
            "att_x_vector" => Ok(ModelKind::AttXVector),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected h_vector, x_vector or att_x_vector)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Windows of `length` frames every `step` frames.
    Sliding,
    /// Non-overlapping windows; `step` must equal `length`.
    Static,
}

/// How an utterance is cut into fixed-length segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    /// Frames per segment (M).
    pub length: usize,
    /// Frames between segment starts (H).
    pub step: usize,
    pub mode: WindowMode,
}

impl WindowSpec {
    pub fn sliding(length: usize, step: usize) -> Self {
        WindowSpec {
            length,
            step,
            mode: WindowMode::Sliding,
        }
    }

    pub fn non_overlapping(length: usize) -> Self {
        WindowSpec {
            length,
            step: length,
            mode: WindowMode::Static,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.step == 0 {
            return Err(Error::Config("window length and step must be at least 1".into()));
        }
        if self.mode == WindowMode::Static && self.step != self.length {
            return Err(Error::Config(format!(
                "static windows need step == length, got step {} and length {}",
                self.step, self.length
            )));
        }
        Ok(())
    }

    /// Number of complete windows in `frames` frames: `floor((T − M) / H) + 1`.
    pub fn segment_count(&self, frames: usize) -> Result<usize> {
        self.validate()?;
        if frames < self.length {
            return Err(Error::Data(format!(
                "utterance of {frames} frames is shorter than the {}-frame window",
                self.length
            )));
        }
        Ok((frames - self.length) / self.step + 1)
    }
}

/// Split `x[T×L]` into windows starting at `0, H, 2H, …`. Frames after the
/// last complete window are dropped.
pub fn segment_frames(x: &Tensor, window: &WindowSpec) -> Result<Vec<Tensor>> {
    if x.shape().len() != 2 {
        return Err(Error::shape("segment_frames", format!("expected T×L, got {:?}", x.shape())));
    }
    let count = window.segment_count(x.rows())?;
    let cols = x.cols();
    (0..count)
        .map(|i| {
            let start = i * window.step * cols;
            let data = x.data()[start..start + window.length * cols].to_vec();
            Tensor::new(vec![window.length, cols], data)
        })
        .collect()
}

/// Architecture choice and layer widths. Missing fields take their
/// [`ModelConfig::desk`] values for a 20-speaker H-vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Acoustic feature width (L).
    pub feature_dim: usize,
    /// Frame-level TDNN width.
    pub frame_tdnn: usize,
    /// GRU hidden units per direction; frame encoder width is twice this.
    pub gru_hidden: usize,
    /// Segment-level TDNN widths; the baselines use the same stack over frames.
    pub segment_tdnn: Vec<usize>,
    /// Hidden width of the utterance-level classifier.
    pub dense: usize,
    /// Number of speakers (K).
    pub num_speakers: usize,
    pub window: WindowSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(ModelKind::HVector, 20)
    }
}

impl ModelConfig {
    /// Full-size layer widths: frame TDNN 256, Bi-GRU 2×256, segment TDNNs
    /// 512/512/1500, classifier 512, sliding windows of 20 frames every 10.
    pub fn full(kind: ModelKind, num_speakers: usize) -> Self {
        ModelConfig {
            kind,
            feature_dim: 20,
            frame_tdnn: 256,
            gru_hidden: 256,
            segment_tdnn: vec![512, 512, 1500],
            dense: 512,
            num_speakers,
            window: WindowSpec::sliding(20, 10),
        }
    }

    /// Reduced widths that train in minutes on one CPU core.
    pub fn desk(kind: ModelKind, num_speakers: usize) -> Self {
        ModelConfig {
            kind,
            feature_dim: 20,
            frame_tdnn: 32,
            gru_hidden: 16,
            segment_tdnn: vec![64, 64, 64],
            dense: 64,
            num_speakers,
            window: WindowSpec::sliding(20, 10),
        }
    }

    /// Frame encoder output width (E).
    pub fn encoder_width(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        let widths = [self.feature_dim, self.frame_tdnn, self.gru_hidden, self.dense, self.num_speakers];
        if widths.contains(&0) || self.segment_tdnn.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.segment_tdnn.is_empty() {
            return Err(Error::Config("at least one segment-level TDNN is required".into()));
        }
        Ok(())
    }
}

/// Per-speaker posterior scores in `(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerScores(Vec<f64>);

impl SpeakerScores {
    /// Wrap sigmoid outputs, nudging saturated values back inside the open
    /// interval.
    pub fn from_probabilities(mut values: Vec<f64>) -> Self {
        let hi = 1.0 - f64::EPSILON / 2.0;
        for v in &mut values {
            *v = v.clamp(f64::MIN_POSITIVE, hi);
        }
        SpeakerScores(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
