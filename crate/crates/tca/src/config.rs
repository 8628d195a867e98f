//! Run configuration. Every option can come from a command-line flag or from the
//! matching section of a JSON file passed with `--config`; flags win, then the file,
//! then the built-in default. Unknown keys in the file are rejected.

use std::path::Path;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use tca_core::encoder::EncoderConfig;
use tca_core::features::PoolingMode;
use tca_core::losses::{CircleParams, LossKind};
use tca_core::retrieval::SimilarityMeasure;
use tca_core::trainer::TrainingConfig;

use crate::error::{TcaError, TcaResult};
use crate::json::read_json;
use crate::synth::SyntheticSpec;

/// Default whitened frame-descriptor size.
pub const DEFAULT_WHITENED_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingArg {
    Imac,
    L3Irmac,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Imac => PoolingMode::Imac,
            PoolingArg::L3Irmac => PoolingMode::L3Irmac,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureArg {
    Cosine,
    Chamfer,
    SymmetricChamfer,
}

impl From<MeasureArg> for SimilarityMeasure {
    fn from(m: MeasureArg) -> Self {
        match m {
            MeasureArg::Cosine => SimilarityMeasure::Cosine,
            MeasureArg::Chamfer => SimilarityMeasure::Chamfer,
            MeasureArg::SymmetricChamfer => SimilarityMeasure::SymmetricChamfer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Infonce,
    Circle,
    Softmax,
}

/// Takes each field from `self` if set, otherwise from `fallback`.
macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(&self, fallback: &Self) -> Self {
                Self { $($field: self.$field.clone().or_else(|| fallback.$field.clone())),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOptions {
    /// Descriptor dimension; inferred from the data when omitted.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

overlay!(EncoderOptions { dim, heads, ffn_dim, dropout });

impl EncoderOptions {
    pub fn resolve(&self, data_dim: usize, seed: u64) -> TcaResult<EncoderConfig> {
        let defaults = EncoderConfig::default();
        let dim = self.dim.unwrap_or(data_dim);
        if dim != data_dim {
            return Err(TcaError::Usage(format!("--dim {dim} does not match the data's dimension {data_dim}")));
        }
        let config = EncoderConfig {
            dim,
            heads: self.heads.unwrap_or(defaults.heads),
            ffn_dim: self.ffn_dim.unwrap_or(defaults.ffn_dim),
            dropout_rate: self.dropout.unwrap_or(defaults.dropout_rate),
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOptions {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Fresh negatives encoded per step.
    #[arg(long)]
    pub negatives_per_step: Option<usize>,
    #[arg(long)]
    pub bank_capacity: Option<usize>,
    #[arg(long)]
    pub pad_length: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
}

overlay!(TrainingOptions {
    batch_size,
    epochs,
    negatives_per_step,
    bank_capacity,
    pad_length,
    base_lr,
    loss,
    tau,
    gamma,
    margin,
});

impl TrainingOptions {
    pub fn resolve(&self, seed: u64) -> TcaResult<TrainingConfig> {
        let d = TrainingConfig::default();
        let circle = CircleParams::default();
        let loss = match self.loss.unwrap_or(LossArg::Circle) {
            LossArg::Softmax => LossKind::Softmax,
            LossArg::Infonce => LossKind::InfoNce { tau: self.tau.unwrap_or(0.07) },
            LossArg::Circle => LossKind::Circle(CircleParams {
                gamma: self.gamma.unwrap_or(circle.gamma),
                margin: self.margin.unwrap_or(circle.margin),
            }),
        };
        let config = TrainingConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            negatives_per_step: self.negatives_per_step.unwrap_or(d.negatives_per_step),
            bank_capacity: self.bank_capacity.unwrap_or(d.bank_capacity),
            pad_length: self.pad_length.unwrap_or(d.pad_length),
            base_lr: self.base_lr.unwrap_or(d.base_lr),
            loss,
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthOptions {
    #[arg(long)]
    pub num_events: Option<usize>,
    #[arg(long)]
    pub positives_per_event: Option<usize>,
    #[arg(long)]
    pub num_distractors: Option<usize>,
    #[arg(long)]
    pub min_frames: Option<usize>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub synth_dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub crop_fraction: Option<f64>,
    #[arg(long)]
    pub style_strength: Option<f64>,
    #[arg(long)]
    pub style_rank: Option<usize>,
}

overlay!(SynthOptions {
    num_events,
    positives_per_event,
    num_distractors,
    min_frames,
    max_frames,
    synth_dim,
    noise_sigma,
    crop_fraction,
    style_strength,
    style_rank,
});

impl SynthOptions {
    pub fn resolve(&self, seed: u64) -> TcaResult<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let spec = SyntheticSpec {
            num_events: self.num_events.unwrap_or(d.num_events),
            positives_per_event: self.positives_per_event.unwrap_or(d.positives_per_event),
            num_distractors: self.num_distractors.unwrap_or(d.num_distractors),
            frames_range: (
                self.min_frames.unwrap_or(d.frames_range.0),
                self.max_frames.unwrap_or(d.frames_range.1),
            ),
            dim: self.synth_dim.unwrap_or(d.dim),
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            crop_fraction: self.crop_fraction.unwrap_or(d.crop_fraction),
            style_strength: self.style_strength.unwrap_or(d.style_strength),
            style_rank: self.style_rank.unwrap_or(d.style_rank),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractOptions {
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Output size of a fitted whitening model.
    #[arg(long)]
    pub whitened_dim: Option<usize>,
}

overlay!(ExtractOptions { pooling, whitened_dim });

impl ExtractOptions {
    pub fn pooling(&self) -> PoolingMode {
        self.pooling.unwrap_or(PoolingArg::Imac).into()
    }

    pub fn whitened_dim(&self) -> usize {
        self.whitened_dim.unwrap_or(DEFAULT_WHITENED_DIM)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateOptions {
    #[arg(long, value_enum)]
    pub measure: Option<MeasureArg>,
}

overlay!(EvaluateOptions { measure });

impl EvaluateOptions {
    pub fn measure(&self) -> SimilarityMeasure {
        self.measure.unwrap_or(MeasureArg::Chamfer).into()
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub encoder: EncoderOptions,
    pub training: TrainingOptions,
    pub synth: SynthOptions,
    pub extract: ExtractOptions,
    pub evaluate: EvaluateOptions,
}

impl RunConfig {
    pub fn load(path: &Path) -> TcaResult<Self> {
        read_json(path).map_err(|e| match e {
            TcaError::Json { path, source } => TcaError::Usage(format!("{}: {source}", path.display())),
            other => other,
        })
    }
}
