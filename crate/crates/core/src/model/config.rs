use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::losses::LossConfig;

/// The seven named experimental configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "vm-m")]
    VmM,
    #[serde(rename = "vm-r")]
    VmR,
    #[serde(rename = "vm-ms")]
    VmMs,
    #[serde(rename = "ivm-m")]
    IvmM,
    #[serde(rename = "ivm-ms")]
    IvmMs,
    #[serde(rename = "livm")]
    Livm,
    #[serde(rename = "tivm")]
    Tivm,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::VmM,
        Preset::VmR,
        Preset::VmMs,
        Preset::IvmM,
        Preset::IvmMs,
        Preset::Livm,
        Preset::Tivm,
    ];

    /// CLI spelling, e.g. `ivm-ms`.
    pub fn name(self) -> &'static str {
        match self {
            Preset::VmM => "vm-m",
            Preset::VmR => "vm-r",
            Preset::VmMs => "vm-ms",
            Preset::IvmM => "ivm-m",
            Preset::IvmMs => "ivm-ms",
            Preset::Livm => "livm",
            Preset::Tivm => "tivm",
        }
    }

    /// Table heading spelling, e.g. `IVM-MS`.
    pub fn label(self) -> String {
        self.name().to_uppercase()
    }

    pub fn aggregation(self) -> Aggregation {
        match self {
            Preset::VmM | Preset::IvmM => Aggregation::Mean,
            Preset::VmMs | Preset::IvmMs => Aggregation::MeanStd,
            Preset::VmR | Preset::Livm | Preset::Tivm => Aggregation::Raw,
        }
    }

    pub fn encoder(self) -> EncoderKind {
        match self {
            Preset::Livm => EncoderKind::Lstm,
            Preset::Tivm => EncoderKind::Transformer,
            _ => EncoderKind::None,
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Preset::VmM | Preset::VmR | Preset::VmMs => LossKind::TripletStruct,
            _ => LossKind::InfoNce,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_lowercase();
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == wanted)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset {s:?}; valid presets are {}",
                    names.join(", ")
                ))
            })
    }
}

/// How a clip's `[T, D]` features are fed to a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Time mean, `[D]`.
    Mean,
    /// Time mean followed by population standard deviation, `[2D]`.
    MeanStd,
    /// The whole sequence.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    None,
    Lstm,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    TripletStruct,
    InfoNce,
}

/// Temporal encoder hyperparameters (ignored without an encoder).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Width of the input projection and, for transformers, the model width.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub lstm_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub aggregation: Aggregation,
    pub encoder: EncoderKind,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub encoder_params: EncoderConfig,
    /// Widths of the batch-normalized hidden layers of each branch, used
    /// when there is no temporal encoder.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub seq_len: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    /// Seed of the weight initialization.
    pub seed: u64,
}

/// Default configuration of a named preset.
pub fn build_preset(name: &str) -> Result<ModelConfig> {
    Ok(ModelConfig::preset(name.parse()?))
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let encoder_params = match preset.encoder() {
            EncoderKind::Lstm => EncoderConfig {
                width: 512,
                layers: 2,
                heads: 1,
                ff_width: 0,
                lstm_hidden: 384,
            },
            _ => EncoderConfig {
                width: 512,
                layers: 2,
                heads: 8,
                ff_width: 2048,
                lstm_hidden: 0,
            },
        };
        Self {
            preset,
            aggregation: preset.aggregation(),
            encoder: preset.encoder(),
            loss_kind: preset.loss_kind(),
            loss: LossConfig::default(),
            encoder_params,
            hidden: vec![2048, 1024],
            embed_dim: 512,
            audio_dim: 128,
            video_dim: 1000,
            seq_len: 15,
            dropout: 0.1,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    /// Tiny widths for finite-difference checks: 3 frames of 3-wide audio
    /// and 4-wide video, embeddings of width 4.
    pub fn micro(preset: Preset) -> Self {
        let mut cfg = Self::preset(preset);
        cfg.hidden = vec![6, 5];
        cfg.embed_dim = 4;
        cfg.audio_dim = 3;
        cfg.video_dim = 4;
        cfg.seq_len = 3;
        cfg.encoder_params = EncoderConfig {
            width: 4,
            layers: 2,
            heads: 2,
            ff_width: 6,
            lstm_hidden: 3,
        };
        cfg.loss.intra_k = 1;
        cfg
    }

    pub fn feature_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.audio_dim,
            Modality::Video => self.video_dim,
        }
    }

    /// Width of one branch input row after aggregation.
    pub fn input_width(&self, modality: Modality) -> usize {
        let d = self.feature_dim(modality);
        match self.aggregation {
            Aggregation::MeanStd => 2 * d,
            _ => d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.encoder != EncoderKind::None && self.aggregation != Aggregation::Raw {
            return fail("temporal encoders need raw sequence input".into());
        }
        if [self.embed_dim, self.audio_dim, self.video_dim, self.seq_len].contains(&0)
            || self.hidden.contains(&0)
        {
            return fail("all widths and the sequence length must be positive".into());
        }
        if self.aggregation == Aggregation::MeanStd && self.seq_len < 2 {
            return fail("mean_std aggregation needs at least 2 frames".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail(format!("bn_momentum must be in [0, 1], got {}", self.bn_momentum));
        }
        let e = &self.encoder_params;
        match self.encoder {
            EncoderKind::Transformer => {
                if e.width == 0 || !e.width.is_multiple_of(2) || e.heads == 0 || !e.width.is_multiple_of(e.heads) {
                    return fail(format!(
                        "transformer width {} must be even and divisible by {} heads",
                        e.width, e.heads
                    ));
                }
                if e.ff_width == 0 {
                    return fail("transformer feedforward width must be positive".into());
                }
            }
            EncoderKind::Lstm => {
                if e.width == 0 || e.lstm_hidden == 0 || e.layers == 0 {
                    return fail("LSTM widths and depth must be positive".into());
                }
            }
            EncoderKind::None => {}
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
