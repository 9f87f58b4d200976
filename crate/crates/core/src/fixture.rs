//! Synthetic LJSpeech-layout corpora for smoke tests and harness runs.
//!
//! Each clip is a few harmonics over a drifting fundamental with its own
//! loudness, plus a little noise, so clips are distinguishable both from the
//! waveform and from the mel spectrogram.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, METADATA_FILE, WAV_DIR};
use crate::error::{IoContext, Result};

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    pub n_clips: usize,
    pub samples_per_clip: usize,
    pub sample_rate_hz: u32,
    pub seed: u64,
}

impl CorpusSpec {
    /// `n` half-second clips at 22.05 kHz.
    pub fn small(n: usize) -> Self {
        Self {
            n_clips: n,
            samples_per_clip: 12_000,
            sample_rate_hz: 22050,
            seed: 0,
        }
    }
}

pub fn clip_id(index: usize, n_clips: usize) -> String {
    let width = n_clips.saturating_sub(1).to_string().len().max(4);
    format!("clip_{index:0width$}")
}

/// Deterministic synthetic waveform for clip `index`.
pub fn synth_clip(spec: &CorpusSpec, index: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let sr = spec.sample_rate_hz as f64;
    let f0 = rng.random_range(90.0..420.0);
    let drift = rng.random_range(-0.3..0.3);
    let amp = rng.random_range(0.05..0.8);
    let n_harm = rng.random_range(1..=4);
    let harm_amps: Vec<f64> = (0..n_harm).map(|h| rng.random_range(0.2..1.0) / (h + 1) as f64).collect();
    let norm: f64 = harm_amps.iter().sum();
    let env_rate = rng.random_range(0.5..4.0);
    let noise = rng.random_range(0.0..0.03);
    let dur = spec.samples_per_clip as f64 / sr;

    let mut phase = 0.0f64;
    (0..spec.samples_per_clip)
        .map(|i| {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + drift * t / dur.max(1e-3));
            phase += 2.0 * std::f64::consts::PI * f / sr;
            let tone: f64 = harm_amps
                .iter()
                .enumerate()
                .map(|(h, a)| a * (phase * (h + 1) as f64).sin())
                .sum::<f64>()
                / norm;
            let env = 0.75 + 0.25 * (2.0 * std::f64::consts::PI * env_rate * t).sin();
            let n = rng.random_range(-1.0..1.0) * noise;
            ((amp * env * tone + n).clamp(-1.0, 1.0)) as f32
        })
        .collect()
}

/// Writes `metadata.csv` and `wavs/*.wav` under `root`.
pub fn write_synthetic_corpus(root: &Path, spec: &CorpusSpec) -> Result<Vec<String>> {
    let wav_dir = root.join(WAV_DIR);
    fs::create_dir_all(&wav_dir).at(&wav_dir)?;
    let mut meta = String::new();
    let mut ids = Vec::with_capacity(spec.n_clips);
    for i in 0..spec.n_clips {
        let id = clip_id(i, spec.n_clips);
        write_wav(&wav_dir.join(format!("{id}.wav")), &synth_clip(spec, i), spec.sample_rate_hz)?;
        meta.push_str(&format!("{id}|synthetic clip {i}|synthetic clip {i}\n"));
        ids.push(id);
    }
    let meta_path = root.join(METADATA_FILE);
    fs::write(&meta_path, meta).at(&meta_path)?;
    Ok(ids)
}
