//! GAN vocoder training with auxiliary contrastive tasks.
//!
//! A HiFi-GAN-family generator and discriminator bank are trained with the
//! usual least-squares adversarial, feature-matching and mel-reconstruction
//! losses, plus one of two contrastive objectives:
//!
//! * `mel_mel`: each mel spectrogram must be matched to its time/frequency
//!   masked view among the other mels and views in the batch. Only the
//!   generator (its input convolution, the "mel encoder") learns from it.
//! * `mel_wave`: each mel spectrogram must be matched to its own waveform
//!   among the batch's waveforms, as seen by every sub-discriminator. The
//!   generator and the discriminators both learn from it.

pub mod audio;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod trainer;

pub use config::{ClMode, TrainConfig};
pub use error::{Error, Result};
