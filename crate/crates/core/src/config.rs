//! Run configuration.
//!
//! Everything a run depends on lives in [`TrainConfig`], which round-trips
//! through TOML. Partial documents are filled from defaults; unknown keys are
//! rejected so a typo in an override never silently falls back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

/// STFT / mel front-end parameters shared by the data pipeline, the
/// reconstruction loss and the evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub n_fft: usize,
    pub win_size: usize,
    pub hop_size: usize,
    pub n_mels: usize,
    pub sample_rate_hz: u32,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub segment_samples: usize,
    /// Right-pad clips shorter than `segment_samples` with zeros instead of
    /// rejecting them.
    pub pad_short_clips: bool,
    /// Magnitude floor applied before the natural log.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_fft: 1024,
            win_size: 1024,
            hop_size: 256,
            n_mels: 80,
            sample_rate_hz: 22050,
            fmin_hz: 0.0,
            fmax_hz: 11025.0,
            segment_samples: 8192,
            pad_short_clips: false,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Reflection padding applied on each side before framing. With this
    /// padding a signal of `L` samples yields exactly `L / hop` frames.
    pub fn pad_each_side(&self) -> usize {
        (self.n_fft - self.hop_size) / 2
    }

    pub fn segment_frames(&self) -> usize {
        self.segment_samples / self.hop_size
    }

    pub fn log_floor_value(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_size == 0 {
            return invalid("feature.hop_size must be > 0");
        }
        if !(self.n_fft >= self.win_size && self.win_size >= self.hop_size) {
            return invalid("feature: n_fft >= win_size >= hop_size must hold");
        }
        if (self.n_fft - self.hop_size) % 2 != 0 {
            return invalid("feature: n_fft - hop_size must be even for symmetric padding");
        }
        if self.n_mels == 0 {
            return invalid("feature.n_mels must be > 0");
        }
        if self.segment_samples == 0 || self.segment_samples % self.hop_size != 0 {
            return invalid("feature.segment_samples must be a positive multiple of hop_size");
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return invalid("feature: 0 <= fmin_hz < fmax_hz <= sample_rate_hz/2 must hold");
        }
        if !(self.log_floor > 0.0 && self.log_floor.is_finite()) {
            return invalid("feature.log_floor must be finite and > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFill {
    /// ln(log_floor): silence in the log-mel domain.
    LogFloor,
    /// The time-average of the masked band (frequency masks) or of each band
    /// (time masks), taken from the unmasked input.
    PerBandMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub n_time_masks: usize,
    /// Maximum time-mask width in frames; `None` means ⌈0.125·n_frames⌉.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_time_width: Option<usize>,
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub fill: MaskFill,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            n_time_masks: 2,
            max_time_width: None,
            n_freq_masks: 2,
            max_freq_width: 10,
            fill: MaskFill::LogFloor,
        }
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            n_time_masks: 0,
            n_freq_masks: 0,
            ..Self::default()
        }
    }

    pub fn time_width_for(&self, n_frames: usize) -> usize {
        self.max_time_width
            .unwrap_or_else(|| (0.125 * n_frames as f64).ceil() as usize)
    }

    pub fn validate_for(&self, n_mels: usize, n_frames: usize) -> Result<()> {
        if self.n_time_masks > 0 {
            let w = self.time_width_for(n_frames);
            if w == 0 || w > n_frames {
                return invalid(format!(
                    "mask_spec: time width {w} must be in [1, n_frames={n_frames}]"
                ));
            }
        }
        if self.n_freq_masks > 0 && (self.max_freq_width == 0 || self.max_freq_width > n_mels) {
            return invalid(format!(
                "mask_spec: freq width {} must be in [1, n_mels={n_mels}]",
                self.max_freq_width
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub upsample_rates: Vec<usize>,
    pub upsample_kernel_sizes: Vec<usize>,
    pub base_channels: usize,
    pub resblock_kernel_sizes: Vec<usize>,
    pub resblock_dilations: Vec<Vec<usize>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            upsample_rates: vec![8, 8, 4],
            upsample_kernel_sizes: vec![16, 16, 8],
            base_channels: 128,
            resblock_kernel_sizes: vec![3, 5, 7],
            resblock_dilations: vec![vec![1, 2], vec![2, 6], vec![3, 12]],
        }
    }
}

impl GeneratorConfig {
    pub fn total_upsampling(&self) -> usize {
        self.upsample_rates.iter().product()
    }

    pub fn validate(&self, hop_size: usize) -> Result<()> {
        if self.upsample_rates.is_empty() {
            return invalid("generator.upsample_rates must not be empty");
        }
        if self.upsample_rates.len() != self.upsample_kernel_sizes.len() {
            return invalid("generator: upsample_rates and upsample_kernel_sizes differ in length");
        }
        if self.total_upsampling() != hop_size {
            return invalid(format!(
                "generator: product(upsample_rates) = {} must equal hop_size = {hop_size}",
                self.total_upsampling()
            ));
        }
        if self.upsample_rates.contains(&0) || self.upsample_kernel_sizes.contains(&0) {
            return invalid("generator: upsample rates and kernel sizes must be > 0");
        }
        if self.base_channels >> self.upsample_rates.len() == 0 {
            return invalid("generator.base_channels too small for the number of upsampling stages");
        }
        if self.resblock_kernel_sizes.len() != self.resblock_dilations.len() {
            return invalid("generator: resblock_kernel_sizes and resblock_dilations differ in length");
        }
        if self.resblock_kernel_sizes.iter().any(|k| k % 2 == 0) {
            return invalid("generator: resblock kernel sizes must be odd");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorBankConfig {
    pub periods: Vec<usize>,
    pub n_scales: usize,
    pub channels: usize,
}

impl Default for DiscriminatorBankConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3],
            n_scales: 2,
            channels: 32,
        }
    }
}

impl DiscriminatorBankConfig {
    pub fn count(&self) -> usize {
        self.periods.len() + self.n_scales
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = self.periods.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.periods.len() || self.periods.contains(&0) {
            return invalid("discriminators.periods must be distinct and >= 1");
        }
        if self.n_scales == 0 {
            return invalid("discriminators.n_scales must be >= 1");
        }
        if self.channels == 0 || self.channels % 4 != 0 {
            return invalid("discriminators.channels must be a positive multiple of 4");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Multiplicative inverse temperature applied to dot products.
    pub tau: f64,
    pub latent_dim: usize,
    pub symmetric_cross_modal: bool,
    pub include_positive_in_denominator: bool,
    pub normalize_embeddings: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 5.0,
            latent_dim: 128,
            symmetric_cross_modal: false,
            include_positive_in_denominator: true,
            normalize_embeddings: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return invalid("contrastive.tau must be finite and > 0");
        }
        if self.latent_dim == 0 {
            return invalid("contrastive.latent_dim must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClMode {
    None,
    MelMel,
    MelWave,
}

impl ClMode {
    pub const ALL: [ClMode; 3] = [ClMode::None, ClMode::MelMel, ClMode::MelWave];

    pub fn as_str(self) -> &'static str {
        match self {
            ClMode::None => "none",
            ClMode::MelMel => "mel_mel",
            ClMode::MelWave => "mel_wave",
        }
    }
}

impl std::fmt::Display for ClMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_fm: f64,
    pub lambda_mel: f64,
    pub lambda_cl: f64,
    pub cl_mode: ClMode,
    /// Optional separate weight for the contrastive term in the
    /// discriminator objective. Defaults to `lambda_cl`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cl_disc: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_fm: 2.0,
            lambda_mel: 45.0,
            lambda_cl: 1.0,
            cl_mode: ClMode::MelWave,
            lambda_cl_disc: None,
        }
    }
}

impl LossWeights {
    /// The discriminator-side indicator: true only for mel–waveform matching.
    pub fn i_disc(&self) -> bool {
        self.cl_mode == ClMode::MelWave
    }

    /// Effective weight of L_cl in the generator objective (0 when disabled).
    pub fn generator_cl_weight(&self) -> f64 {
        match self.cl_mode {
            ClMode::None => 0.0,
            _ => self.lambda_cl,
        }
    }

    /// Effective weight of L_cl in the discriminator objective.
    pub fn discriminator_cl_weight(&self) -> f64 {
        if self.i_disc() {
            self.lambda_cl_disc.unwrap_or(self.lambda_cl)
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_fm", Some(self.lambda_fm)),
            ("lambda_mel", Some(self.lambda_mel)),
            ("lambda_cl", Some(self.lambda_cl)),
            ("lambda_cl_disc", self.lambda_cl_disc),
        ];
        for (name, v) in all {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return invalid(format!("loss_weights.{name} must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Newline-delimited validation clip ids. Absent: the last
    /// `validation_count` sorted clip ids are held out.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_file: Option<PathBuf>,
    pub validation_count: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_decay_per_epoch: f64,
    pub total_steps: u64,
    pub data_fraction: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub validate_every: u64,
    /// When false the `wallclock_s` metrics column is written as 0 so that
    /// metrics files are reproducible byte-for-byte.
    pub record_wallclock: bool,
    pub loss_weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    pub mask_spec: MaskSpec,
    pub feature: FeatureConfig,
    pub generator: GeneratorConfig,
    pub discriminators: DiscriminatorBankConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data/LJSpeech-1.1"),
            out_dir: PathBuf::from("runs/default"),
            split_file: None,
            validation_count: 150,
            batch_size: 16,
            learning_rate: 2e-4,
            adam_betas: [0.8, 0.99],
            adam_eps: 1e-8,
            weight_decay: 0.01,
            lr_decay_per_epoch: 0.999,
            total_steps: 20_000,
            data_fraction: 1.0,
            seed: 1234,
            checkpoint_every: 5_000,
            validate_every: 1_000,
            record_wallclock: true,
            loss_weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            mask_spec: MaskSpec::default(),
            feature: FeatureConfig::default(),
            generator: GeneratorConfig::default(),
            discriminators: DiscriminatorBankConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The desk-scale default configuration.
    pub fn desk() -> Self {
        Self::default()
    }

    /// A very small configuration for smoke tests and CI on a single CPU core.
    /// Same front end and architecture family, far fewer channels and shorter
    /// segments.
    pub fn tiny() -> Self {
        Self {
            validation_count: 2,
            batch_size: 2,
            total_steps: 2000,
            checkpoint_every: 1000,
            validate_every: 500,
            contrastive: ContrastiveConfig {
                latent_dim: 32,
                ..ContrastiveConfig::default()
            },
            feature: FeatureConfig {
                segment_samples: 4096,
                ..FeatureConfig::default()
            },
            generator: GeneratorConfig {
                upsample_rates: vec![8, 8, 4],
                upsample_kernel_sizes: vec![16, 16, 8],
                base_channels: 32,
                resblock_kernel_sizes: vec![3],
                resblock_dilations: vec![vec![1, 3]],
            },
            discriminators: DiscriminatorBankConfig {
                periods: vec![2, 3],
                n_scales: 2,
                channels: 8,
            },
            ..Self::default()
        }
    }

    /// Checks every invariant; the error names the violated one.
    pub fn validate(&self) -> Result<()> {
        self.feature.validate()?;
        self.generator.validate(self.feature.hop_size)?;
        self.discriminators.validate()?;
        self.contrastive.validate()?;
        self.loss_weights.validate()?;
        self.mask_spec
            .validate_for(self.feature.n_mels, self.feature.segment_frames())?;
        if self.loss_weights.cl_mode != ClMode::None && self.batch_size < 2 {
            return invalid(format!(
                "batch_size >= 2 is required when cl_mode = {} (InfoNCE needs negatives); got {}",
                self.loss_weights.cl_mode, self.batch_size
            ));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return invalid("data_fraction must be in (0, 1]");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate must be finite and > 0");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return invalid("adam_betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return invalid("adam_eps must be > 0 and weight_decay >= 0");
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return invalid("lr_decay_per_epoch must be in (0, 1]");
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return invalid("checkpoint_every and validate_every must be > 0");
        }
        Ok(())
    }

    /// Two configs may share a checkpoint when they differ only in
    /// scheduling and output fields.
    pub fn resume_compatible(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig {
            corpus_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            total_steps: 0,
            checkpoint_every: 1,
            validate_every: 1,
            record_wallclock: false,
            ..c.clone()
        };
        strip(self) == strip(other)
    }

    /// Architecture-only compatibility, as needed for inference.
    pub fn architecture_compatible(&self, other: &TrainConfig) -> bool {
        self.feature == other.feature
            && self.generator == other.generator
            && self.discriminators == other.discriminators
            && self.contrastive.latent_dim == other.contrastive.latent_dim
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("TrainConfig is always TOML-serializable")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads a TOML document and applies `key.path=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let s = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&s)
    }
}

/// Applies one dotted-path override such as `loss_weights.cl_mode=none`.
/// The right-hand side is parsed as a TOML value and falls back to a bare
/// string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
