//! Corpus ingestion, waveform/mel conversion, segment sampling and
//! data-limited subset selection.
//!
//! The on-disk layout is the LJSpeech one: `metadata.csv` with pipe-delimited
//! `clip_id|transcript|normalized` rows next to a `wavs/` directory of 16-bit
//! PCM mono files. Transcripts are ignored.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::config::FeatureConfig;
use crate::error::{Error, IoContext, Result};

pub const METADATA_FILE: &str = "metadata.csv";
pub const WAV_DIR: &str = "wavs";
pub const DEFAULT_VALIDATION_COUNT: usize = 150;

/// Added to |X|² before the square root so the magnitude stays
/// differentiable at zero.
pub const MAGNITUDE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioCorpus {
    pub train: Vec<ClipEntry>,
    pub validation: Vec<ClipEntry>,
    pub sample_rate_hz: u32,
}

impl AudioCorpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_ids(&self) -> Vec<&str> {
        self.train.iter().map(|e| e.clip_id.as_str()).collect()
    }
}

/// How validation clips are chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitSpec {
    /// The last `n` clip ids in sorted order.
    LastSorted(usize),
    /// A file of newline-delimited validation clip ids.
    File(PathBuf),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::LastSorted(DEFAULT_VALIDATION_COUNT)
    }
}

/// Reads a corpus directory. Entries come back sorted by clip id.
pub fn load_corpus(root: &Path, split: &SplitSpec) -> Result<AudioCorpus> {
    let meta_path = root.join(METADATA_FILE);
    if !meta_path.is_file() {
        return Err(Error::Load(format!(
            "{} not found; 0 entries loaded",
            meta_path.display()
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'|')
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_path(&meta_path)?;

    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or("").trim();
        if id.is_empty() {
            continue;
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::Load(format!("duplicate clip_id `{id}` in metadata")));
        }
        ids.push(id.to_string());
    }
    if ids.is_empty() {
        return Err(Error::Load(format!(
            "{} lists no clips; 0 entries loaded",
            meta_path.display()
        )));
    }
    ids.sort();

    let mut entries = Vec::with_capacity(ids.len());
    let mut sample_rate = None;
    for id in ids {
        let path = root.join(WAV_DIR).join(format!("{id}.wav"));
        if !path.is_file() {
            return Err(Error::MissingClip { clip_id: id, path });
        }
        let reader = hound::WavReader::open(&path).map_err(|e| Error::Decode {
            clip_id: id.clone(),
            reason: e.to_string(),
        })?;
        let spec = reader.spec();
        check_pcm16_mono(&id, spec)?;
        match sample_rate {
            None => sample_rate = Some(spec.sample_rate),
            Some(sr) if sr != spec.sample_rate => {
                return Err(Error::Decode {
                    clip_id: id,
                    reason: format!("sample rate {} differs from corpus rate {sr}", spec.sample_rate),
                })
            }
            _ => {}
        }
        let duration_s = reader.duration() as f64 / spec.sample_rate as f64;
        entries.push(ClipEntry {
            clip_id: id,
            path,
            duration_s,
        });
    }

    let validation_ids: HashSet<String> = match split {
        SplitSpec::LastSorted(n) => {
            if *n >= entries.len() {
                return Err(Error::Load(format!(
                    "validation count {n} leaves no training clips out of {}",
                    entries.len()
                )));
            }
            entries[entries.len() - n..]
                .iter()
                .map(|e| e.clip_id.clone())
                .collect()
        }
        SplitSpec::File(path) => {
            let text = fs::read_to_string(path).at(path)?;
            let ids: HashSet<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            for id in &ids {
                if !seen.contains(id) {
                    return Err(Error::Load(format!(
                        "split file names unknown clip_id `{id}`"
                    )));
                }
            }
            ids
        }
    };

    let (validation, train): (Vec<_>, Vec<_>) = entries
        .into_iter()
        .partition(|e| validation_ids.contains(&e.clip_id));
    Ok(AudioCorpus {
        train,
        validation,
        sample_rate_hz: sample_rate.expect("at least one entry"),
    })
}

fn check_pcm16_mono(clip_id: &str, spec: hound::WavSpec) -> Result<()> {
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Decode {
            clip_id: clip_id.to_string(),
            reason: format!(
                "expected 16-bit PCM mono, found {} ch / {} bit / {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    Ok(())
}

/// A mono audio segment with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub clip_id: String,
    pub offset_samples: usize,
}

impl WaveformClip {
    pub fn new(clip_id: impl Into<String>, samples: Vec<f32>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
            clip_id: clip_id.into(),
            offset_samples: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn read_wav(path: &Path, clip_id: &str) -> Result<WaveformClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) if io.kind() == std::io::ErrorKind::NotFound => Error::MissingClip {
            clip_id: clip_id.to_string(),
            path: path.to_path_buf(),
        },
        other => Error::Decode {
            clip_id: clip_id.to_string(),
            reason: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    check_pcm16_mono(clip_id, spec)?;
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Decode {
            clip_id: clip_id.to_string(),
            reason: e.to_string(),
        })?;
    Ok(WaveformClip::new(clip_id, samples, spec.sample_rate))
}

pub fn read_entry(entry: &ClipEntry) -> Result<WaveformClip> {
    read_wav(&entry.path, &entry.clip_id)
}

/// Writes 16-bit PCM mono. Returns how many samples had to be clipped.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate_hz: u32) -> Result<usize> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    let mut clipped = 0;
    for &s in samples {
        let scaled = (s as f64 * 32767.0).round();
        if !(-32768.0..=32767.0).contains(&scaled) {
            clipped += 1;
        }
        writer
            .write_sample(scaled.clamp(-32768.0, 32767.0) as i16)
            .map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)?;
    Ok(clipped)
}

/// Log-mel spectrogram, `[n_mels, n_frames]`, natural log of the clamped
/// mel magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub hop_size: usize,
    pub source_clip_id: String,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }

    /// Raw dump: `u32 n_mels, u32 n_frames` then row-major `f32`, all
    /// little-endian.
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.values.len());
        buf.extend_from_slice(&(self.n_mels() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.n_frames() as u32).to_le_bytes());
        for v in self.values.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).at(path)
    }

    pub fn read_raw(path: &Path, hop_size: usize) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        if bytes.len() < 8 {
            return Err(Error::Shape(format!("{}: truncated mel dump", path.display())));
        }
        let n_mels = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * n_mels * n_frames {
            return Err(Error::Shape(format!(
                "{}: expected {n_mels}x{n_frames} values",
                path.display()
            )));
        }
        let values: Vec<f32> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Self {
            values: Array2::from_shape_vec((n_mels, n_frames), values)
                .map_err(|e| Error::Shape(e.to_string()))?,
            hop_size,
            source_clip_id: id,
        })
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Band edge frequencies in Hz (`n_mels + 2` points); band `i` peaks at
/// `edges[i + 1]`.
pub fn mel_band_edges_hz(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz);
    let hi = hz_to_mel(cfg.fmax_hz);
    let n = cfg.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Triangular, area-normalized filters on the Slaney mel scale,
/// `[n_mels, n_fft/2 + 1]`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let n_bins = cfg.n_bins();
    let edges = mel_band_edges_hz(cfg);
    let nyquist = cfg.sample_rate_hz as f64 / 2.0;
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| nyquist * k as f64 / (n_bins - 1) as f64)
        .collect();
    let mut fb = Array2::<f64>::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for (k, &f) in bin_hz.iter().enumerate() {
            let lower = (f - left) / (center - left);
            let upper = (right - f) / (right - center);
            let w = lower.min(upper).max(0.0);
            fb[[m, k]] = w * norm;
        }
    }
    fb
}

/// Periodic Hann window of `win_size`, zero-padded and centred to `n_fft`.
pub fn analysis_window(cfg: &FeatureConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.n_fft];
    let offset = (cfg.n_fft - cfg.win_size) / 2;
    for i in 0..cfg.win_size {
        let phase = 2.0 * std::f64::consts::PI * i as f64 / cfg.win_size as f64;
        w[offset + i] = 0.5 - 0.5 * phase.cos();
    }
    w
}

/// Reflection padding without repeating the edge sample.
pub fn reflect_pad(samples: &[f32], pad: usize) -> Result<Vec<f32>> {
    let n = samples.len();
    if pad >= n {
        return Err(Error::Shape(format!(
            "signal of {n} samples is too short for reflection padding of {pad}"
        )));
    }
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((1..=pad).rev().map(|i| samples[i]));
    out.extend_from_slice(samples);
    out.extend((1..=pad).map(|i| samples[n - 1 - i]));
    Ok(out)
}

/// Frame count for a signal of `n_samples` under the padding convention.
pub fn frame_count(n_samples: usize, cfg: &FeatureConfig) -> usize {
    n_samples / cfg.hop_size
}

/// Minimum signal length accepted by [`MelExtractor`].
pub fn min_samples(cfg: &FeatureConfig) -> usize {
    cfg.hop_size.max(cfg.pad_each_side() + 1)
}

/// STFT + mel projection front end.
#[derive(Clone)]
pub struct MelExtractor {
    cfg: FeatureConfig,
    filterbank: Array2<f64>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("cfg", &self.cfg).finish()
    }
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            filterbank: mel_filterbank(cfg),
            window: analysis_window(cfg),
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Log-mel of raw samples, `[n_mels, len / hop]`.
    pub fn log_mel(&self, samples: &[f32]) -> Result<Array2<f32>> {
        let cfg = &self.cfg;
        if samples.len() < min_samples(cfg) {
            return Err(Error::Shape(format!(
                "signal of {} samples is shorter than the minimum {} for one frame",
                samples.len(),
                min_samples(cfg)
            )));
        }
        let padded = reflect_pad(samples, cfg.pad_each_side())?;
        let n_frames = frame_count(samples.len(), cfg);
        let n_bins = cfg.n_bins();
        let floor = cfg.log_floor;
        let mut out = Array2::<f32>::zeros((cfg.n_mels, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut mag = vec![0.0f64; n_bins];
        for t in 0..n_frames {
            let start = t * cfg.hop_size;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(padded[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, m) in mag.iter_mut().enumerate() {
                *m = (buf[k].norm_sqr() + MAGNITUDE_EPS).sqrt();
            }
            for m in 0..cfg.n_mels {
                let row = self.filterbank.slice(s![m, ..]);
                let energy: f64 = row.iter().zip(&mag).map(|(w, x)| w * x).sum();
                out[[m, t]] = energy.max(floor).ln() as f32;
            }
        }
        Ok(out)
    }

    /// Mel spectrogram of a clip; the clip's sample rate must match the config.
    pub fn mel_spectrogram(&self, clip: &WaveformClip) -> Result<MelSpectrogram> {
        if clip.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::Config(format!(
                "clip `{}` is {} Hz but the front end expects {} Hz (no resampling)",
                clip.clip_id, clip.sample_rate_hz, self.cfg.sample_rate_hz
            )));
        }
        Ok(MelSpectrogram {
            values: self.log_mel(&clip.samples)?,
            hop_size: self.cfg.hop_size,
            source_clip_id: clip.clip_id.clone(),
        })
    }
}

/// Convenience wrapper building a one-off extractor.
pub fn mel_spectrogram(clip: &WaveformClip, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.mel_spectrogram(clip)
}

/// Writes the filterbank as `n_mels × n_bins` little-endian f32 plus a JSON
/// sidecar holding the feature config. Returns both paths.
pub fn dump_filterbank(cfg: &FeatureConfig, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let fb = mel_filterbank(cfg);
    let bin_path = out_dir.join("mel_filterbank.f32");
    let json_path = out_dir.join("mel_filterbank.json");
    let mut f = fs::File::create(&bin_path).at(&bin_path)?;
    let mut buf = Vec::with_capacity(fb.len() * 4);
    for v in fb.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    f.write_all(&buf).at(&bin_path)?;
    fs::write(&json_path, serde_json::to_string_pretty(cfg)?).at(&json_path)?;
    Ok((bin_path, json_path))
}

/// An aligned (waveform, mel) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub wave: WaveformClip,
    pub mel: MelSpectrogram,
    /// Zero samples appended because the source clip was too short.
    pub padded_samples: usize,
}

/// Crops a hop-aligned window of `segment_samples` and computes its mel.
pub fn sample_segment<R: Rng + ?Sized>(
    clip: &WaveformClip,
    extractor: &MelExtractor,
    rng: &mut R,
) -> Result<Segment> {
    let cfg = extractor.config();
    let seg = cfg.segment_samples;
    let (samples, offset, padded) = if clip.len() >= seg {
        let choices = (clip.len() - seg) / cfg.hop_size + 1;
        let offset = cfg.hop_size * rng.random_range(0..choices);
        (clip.samples[offset..offset + seg].to_vec(), offset, 0)
    } else if cfg.pad_short_clips {
        let mut s = clip.samples.clone();
        let padded = seg - s.len();
        s.resize(seg, 0.0);
        (s, 0, padded)
    } else {
        return Err(Error::Shape(format!(
            "clip `{}` has {} samples, fewer than segment_samples = {seg} (padding disabled)",
            clip.clip_id,
            clip.len()
        )));
    };
    let wave = WaveformClip {
        samples,
        sample_rate_hz: clip.sample_rate_hz,
        clip_id: clip.clip_id.clone(),
        offset_samples: offset,
    };
    let mel = extractor.mel_spectrogram(&wave)?;
    Ok(Segment {
        wave,
        mel,
        padded_samples: padded,
    })
}

fn subset_count(n: usize, fraction: f64) -> usize {
    // Guard against 0.2 * 12950 = 2590.0000000000005.
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Training clip ids in the seeded selection order. Every subset for this
/// seed is a prefix of this order.
pub fn selection_order(corpus: &AudioCorpus, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = corpus.train.iter().map(|e| e.clip_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids
}

/// Keeps ⌈fraction·N⌉ training clips (a prefix of the seeded shuffle).
/// Validation is untouched and entries stay sorted by clip id.
pub fn select_subset(corpus: &AudioCorpus, fraction: f64, seed: u64) -> Result<AudioCorpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction {fraction} must be in (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(corpus.clone());
    }
    let order = selection_order(corpus, seed);
    let keep: HashSet<&String> = order[..subset_count(order.len(), fraction)].iter().collect();
    Ok(AudioCorpus {
        train: corpus
            .train
            .iter()
            .filter(|e| keep.contains(&e.clip_id))
            .cloned()
            .collect(),
        validation: corpus.validation.clone(),
        sample_rate_hz: corpus.sample_rate_hz,
    })
}

/// One clip id per line, sorted.
pub fn write_manifest(corpus: &AudioCorpus, path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in &corpus.train {
        text.push_str(&e.clip_id);
        text.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, text).at(path)
}
