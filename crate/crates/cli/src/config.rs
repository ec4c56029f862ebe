//! Command flags and the TOML run file they override. Every flag is
//! optional here; defaults are applied after merging.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use stitchfusion::{DensityVariant, Error, Result};

/// Copies every `None` field of `self` from `file`.
macro_rules! fill_from {
    ($self:ident, $file:ident; $($field:ident),* $(,)?) => {
        $( if $self.$field.is_none() { $self.$field = $file.$field.clone(); } )*
    };
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Number of samples to generate
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// Class count including background
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of modalities
    #[arg(long = "modalities")]
    #[serde(rename = "modalities")]
    pub num_modalities: Option<usize>,
    /// Channels per modality
    #[arg(long)]
    pub channels: Option<usize>,
    /// Split tag; splits of one seed share class visibility
    #[arg(long)]
    pub split: Option<String>,
}

impl SynthArgs {
    pub fn fill(&mut self, file: &SynthArgs) {
        fill_from!(self, file; samples, height, width, classes, num_modalities, channels, split);
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    /// Backbone preset: tiny or b2-like
    #[arg(long)]
    pub preset: Option<String>,
    /// Comma-separated modality names taken from the dataset (default: all)
    #[arg(long, value_delimiter = ',')]
    pub modalities: Option<Vec<String>>,
    /// Adapter density: shared, pair-bi or pair-uni
    #[arg(long)]
    pub density: Option<DensityVariant>,
    /// Comma-separated 1-based stages that get adapters
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    /// Adapter bottleneck width
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub adapter_dropout: Option<f64>,
    /// Enable the post-encoder fusion module
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ffm: Option<bool>,
    /// Disable adapters and encode modalities independently
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_stitch: Option<bool>,
    #[arg(long)]
    pub decoder_dim: Option<usize>,
}

impl ModelArgs {
    pub fn fill(&mut self, file: &ModelArgs) {
        fill_from!(self, file; preset, modalities, density, stages, r, adapter_dropout, ffm, no_stitch, decoder_dim);
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate
    #[arg(long = "lr")]
    pub base_lr: Option<f64>,
    #[arg(long = "warmup")]
    pub warmup_epochs: Option<f64>,
    /// Final learning rate as a fraction of the peak
    #[arg(long = "decay")]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Evaluate every N epochs (0: only at the end)
    #[arg(long)]
    pub eval_every: Option<usize>,
}

impl TrainArgs {
    pub fn fill(&mut self, file: &TrainArgs) {
        fill_from!(self, file; epochs, batch_size, base_lr, warmup_epochs, decay_factor, weight_decay, eval_every);
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountArgs {
    /// Backbone preset: tiny or b2-like
    #[arg(long)]
    pub preset: Option<String>,
    /// Number of modalities
    #[arg(long)]
    pub modalities: Option<usize>,
    #[arg(long)]
    pub density: Option<DensityVariant>,
    #[arg(long, value_delimiter = ',')]
    pub stages: Option<Vec<usize>>,
    #[arg(long)]
    pub r: Option<usize>,
    /// Report the bias-inclusive count as the total
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub include_bias: Option<bool>,
}

impl CountArgs {
    pub fn fill(&mut self, file: &CountArgs) {
        fill_from!(self, file; preset, modalities, density, stages, r, include_bias);
    }
}

#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathArgs {
    /// Training dataset directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluation dataset directory
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Checkpoint directory to read
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl PathArgs {
    pub fn fill(&mut self, file: &PathArgs) {
        fill_from!(self, file; data, eval_data, checkpoint, out);
    }
}

/// Layout of the `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub paths: PathArgs,
    pub synth: SynthArgs,
    pub model: ModelArgs,
    pub train: TrainArgs,
    pub count: CountArgs,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> Result<RunFile> {
        let Some(path) = path else { return Ok(RunFile::default()) };
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string_pretty(value).expect("resolved config serializes")
}
