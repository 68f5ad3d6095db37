//! Clip features, their on-disk formats, and dataset plumbing.
//!
//! A clip is a pair of per-frame feature sequences (audio and video) that
//! share a clip id and a frame count. Sequences are stored one per file in
//! the CMF1 format ([`cmf`]) and listed in a tab-separated [`Manifest`].

mod batch;
pub mod cmf;
mod manifest;
mod split;
mod synth;

pub use batch::make_batches;
pub use cmf::{read_feature_file, write_feature_file};
pub use manifest::{Manifest, ManifestRecord};
pub use split::{split_by_song, DatasetSplit};
pub use synth::{synth_generate, write_dataset, SynthConfig, SynthDataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Audio => 0,
            Modality::Video => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Audio),
            1 => Some(Modality::Video),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

/// One clip's per-frame features for one modality, `values[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub clip_id: String,
    pub modality: Modality,
    values: Tensor<f32>,
}

impl FeatureSequence {
    pub fn new(clip_id: impl Into<String>, modality: Modality, values: Tensor<f32>) -> Result<Self> {
        values.dims2()?;
        Ok(Self {
            clip_id: clip_id.into(),
            modality,
            values,
        })
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    /// Sequences always hold at least one frame.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature width `D`.
    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }
}

/// Matched audio and video sequences of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipPair {
    pub clip_id: String,
    pub song_id: String,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
}

impl ClipPair {
    pub fn new(
        clip_id: impl Into<String>,
        song_id: impl Into<String>,
        audio: FeatureSequence,
        video: FeatureSequence,
    ) -> Result<Self> {
        if audio.modality != Modality::Audio || video.modality != Modality::Video {
            return Err(Error::Format(format!(
                "clip pair needs (audio, video) sequences, got ({}, {})",
                audio.modality, video.modality
            )));
        }
        if audio.len() != video.len() {
            return Err(Error::Shape(format!(
                "audio has {} frames but video has {}",
                audio.len(),
                video.len()
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            song_id: song_id.into(),
            audio,
            video,
        })
    }

    pub fn sequence(&self, modality: Modality) -> &FeatureSequence {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }
}
