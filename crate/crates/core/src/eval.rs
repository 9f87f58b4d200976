//! Objective metrics (log-mel MAE, mel-cepstral distortion) and batch
//! synthesis.
//!
//! Both metrics share the training front end. Mel cepstra are the
//! orthonormal DCT-II of each log-mel frame; MCD uses coefficients 1..=13 and
//! frame-aligned comparison.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::{read_entry, write_wav, ClipEntry, MelExtractor, MelSpectrogram, WaveformClip};
use crate::error::{Error, IoContext, Result};
use crate::nets::Generator;

pub const MCD_ORDER: usize = 13;

/// `10 / ln 10`, the dB scale factor of the distortion.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Trims two signals to their common length, rounded down to whole hops.
/// Returns the common length and the number of samples dropped in total.
pub fn aligned_length(a: usize, b: usize, hop: usize) -> (usize, usize) {
    let len = a.min(b) / hop * hop;
    (len, a + b - 2 * len)
}

fn aligned_mels(reference: &[f32], generated: &[f32], ex: &MelExtractor) -> Result<(Array2<f32>, Array2<f32>, usize)> {
    let (len, trimmed) = aligned_length(reference.len(), generated.len(), ex.config().hop_size);
    let r = ex.log_mel(&reference[..len])?;
    let g = ex.log_mel(&generated[..len])?;
    Ok((r, g, trimmed))
}

pub fn mae_from_mels(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(Error::Shape(format!("cannot compare mels of shape {:?} and {:?}", a.dim(), b.dim())));
    }
    let sum: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Mean absolute difference of the two log-mel spectrograms.
pub fn mae_mel(reference: &[f32], generated: &[f32], ex: &MelExtractor) -> Result<f64> {
    let (r, g, _) = aligned_mels(reference, generated, ex)?;
    mae_from_mels(&r, &g)
}

/// Orthonormal DCT-II along the band axis: `[n_mels, T] -> [T, order + 1]`
/// (column 0 is c_0).
pub fn mel_cepstrum(log_mel: &Array2<f32>, order: usize) -> Array2<f64> {
    let (m, frames) = log_mel.dim();
    let mut out = Array2::zeros((frames, order + 1));
    for d in 0..=order.min(m - 1) {
        let scale = if d == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
        let basis: Vec<f64> = (0..m)
            .map(|k| (std::f64::consts::PI * d as f64 * (k as f64 + 0.5) / m as f64).cos() * scale)
            .collect();
        for t in 0..frames {
            out[[t, d]] = (0..m).map(|k| basis[k] * log_mel[[k, t]] as f64).sum();
        }
    }
    out
}

/// Mean over frames of `(10 / ln 10) * sqrt(2 * sum_{d=1..} (c_d - c'_d)^2)`.
/// Column 0 of each input is c_0 and is ignored.
pub fn mcd_from_cepstra(c: &Array2<f64>, c2: &Array2<f64>) -> Result<f64> {
    if c.dim() != c2.dim() {
        return Err(Error::Shape(format!("cepstra differ in shape: {:?} vs {:?}", c.dim(), c2.dim())));
    }
    let frames = c.nrows();
    if frames == 0 {
        return Err(Error::Shape("MCD needs at least one frame".into()));
    }
    let total: f64 = c
        .rows()
        .into_iter()
        .zip(c2.rows())
        .map(|(a, b)| {
            let ss: f64 = a.iter().zip(b.iter()).skip(1).map(|(x, y)| (x - y).powi(2)).sum();
            MCD_SCALE * (2.0 * ss).sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}

pub fn mcd_from_mels(a: &Array2<f32>, b: &Array2<f32>) -> Result<f64> {
    mcd_from_cepstra(&mel_cepstrum(a, MCD_ORDER), &mel_cepstrum(b, MCD_ORDER))
}

/// Mel-cepstral distortion in dB.
pub fn mcd(reference: &[f32], generated: &[f32], ex: &MelExtractor) -> Result<f64> {
    let (r, g, _) = aligned_mels(reference, generated, ex)?;
    mcd_from_mels(&r, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub mae: f64,
    pub mcd_db: f64,
    pub n_frames: usize,
    pub trimmed_samples: usize,
}

/// Both metrics for one pair, plus the mels that produced them.
pub fn compare(
    clip_id: &str,
    reference: &[f32],
    generated: &[f32],
    ex: &MelExtractor,
) -> Result<(ClipMetrics, Array2<f32>, Array2<f32>)> {
    let (r, g, trimmed) = aligned_mels(reference, generated, ex)?;
    let metrics = ClipMetrics {
        clip_id: clip_id.to_string(),
        mae: mae_from_mels(&r, &g)?,
        mcd_db: mcd_from_mels(&r, &g)?,
        n_frames: r.ncols(),
        trimmed_samples: trimmed,
    };
    Ok((metrics, r, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Per-clip rows (sorted by clip id) and frame-weighted aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ClipMetrics>,
    pub total_frames: usize,
    pub mae: Aggregate,
    pub mcd_db: Aggregate,
}

fn weighted(rows: &[ClipMetrics], value: impl Fn(&ClipMetrics) -> f64) -> Aggregate {
    let total: f64 = rows.iter().map(|r| r.n_frames as f64).sum();
    if total == 0.0 {
        return Aggregate { mean: 0.0, std: 0.0 };
    }
    let mean = rows.iter().map(|r| r.n_frames as f64 * value(r)).sum::<f64>() / total;
    let var = rows
        .iter()
        .map(|r| r.n_frames as f64 * (value(r) - mean).powi(2))
        .sum::<f64>()
        / total;
    Aggregate { mean, std: var.sqrt() }
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<ClipMetrics>) -> Self {
        rows.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        Self {
            total_frames: rows.iter().map(|r| r.n_frames).sum(),
            mae: weighted(&rows, |r| r.mae),
            mcd_db: weighted(&rows, |r| r.mcd_db),
            rows,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        w.write_record(["clip_id", "mae", "mcd_db", "n_frames", "trimmed_samples"])?;
        for r in &self.rows {
            w.write_record([
                r.clip_id.clone(),
                format!("{:?}", r.mae),
                format!("{:?}", r.mcd_db),
                r.n_frames.to_string(),
                r.trimmed_samples.to_string(),
            ])?;
        }
        w.flush().at(path)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).at(path)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).at(path)?)?)
    }

    /// Writes `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        self.write_csv(&dir.join("report.csv"))?;
        self.write_json(&dir.join("report.json"))
    }
}

/// Vocodes `mel` with `generator`: `[n_mels, T] -> T * hop` samples.
pub fn vocode(generator: &Generator, mel: &MelSpectrogram) -> Result<Vec<f32>> {
    let (m, t) = mel.values.dim();
    let data: Vec<f32> = mel.values.iter().copied().collect();
    let x = Tensor::from_vec(data, (1, m, t), &Device::Cpu)?;
    Ok(generator.forward(&x)?.squeeze(0)?.to_vec1()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub path: PathBuf,
    pub n_samples: usize,
    pub clipped_samples: usize,
}

/// Vocodes `mel` and writes a 16-bit WAV to `path`.
pub fn synthesize(generator: &Generator, mel: &MelSpectrogram, sample_rate_hz: u32, path: &Path) -> Result<Synthesized> {
    let samples = vocode(generator, mel)?;
    let clipped_samples = write_wav(path, &samples, sample_rate_hz)?;
    Ok(Synthesized {
        path: path.to_path_buf(),
        n_samples: samples.len(),
        clipped_samples,
    })
}

/// What to compare each reference clip against.
pub enum Candidate<'a> {
    /// The reference itself.
    GroundTruth,
    /// A generator vocoding the reference's own mel.
    Vocoder(&'a Generator),
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Directory for synthesized WAVs; `None` skips writing audio.
    pub wav_dir: Option<PathBuf>,
    /// Directory for `<clip>.ref.mel` / `<clip>.gen.mel` raw matrices.
    pub mel_dir: Option<PathBuf>,
}

/// Evaluates every entry (in clip-id order) and returns the report plus the
/// total number of clipped samples written.
pub fn evaluate_entries(
    entries: &[ClipEntry],
    candidate: &Candidate<'_>,
    ex: &MelExtractor,
    opts: &EvalOptions,
) -> Result<(EvalReport, usize)> {
    let mut sorted: Vec<&ClipEntry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let mut rows = Vec::with_capacity(sorted.len());
    let mut clipped = 0;
    for entry in sorted {
        let clip = read_entry(entry)?;
        let generated = generate(&clip, candidate, ex, opts, &mut clipped)?;
        let (metrics, r, g) = compare(&clip.clip_id, &clip.samples, &generated, ex)?;
        if let Some(dir) = &opts.mel_dir {
            fs::create_dir_all(dir).at(dir)?;
            let hop = ex.config().hop_size;
            let dump = |values: Array2<f32>, tag: &str| {
                MelSpectrogram {
                    values,
                    hop_size: hop,
                    source_clip_id: clip.clip_id.clone(),
                }
                .write_raw(&dir.join(format!("{}.{tag}.mel", clip.clip_id)))
            };
            dump(r, "ref")?;
            dump(g, "gen")?;
        }
        rows.push(metrics);
    }
    Ok((EvalReport::from_rows(rows), clipped))
}

fn generate(
    clip: &WaveformClip,
    candidate: &Candidate<'_>,
    ex: &MelExtractor,
    opts: &EvalOptions,
    clipped: &mut usize,
) -> Result<Vec<f32>> {
    let samples = match candidate {
        Candidate::GroundTruth => clip.samples.clone(),
        Candidate::Vocoder(g) => vocode(g, &ex.mel_spectrogram(clip)?)?,
    };
    if let Some(dir) = &opts.wav_dir {
        fs::create_dir_all(dir).at(dir)?;
        *clipped += write_wav(&dir.join(format!("{}.wav", clip.clip_id)), &samples, clip.sample_rate_hz)?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FeatureConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(n: usize, hz: f64) -> Vec<f32> {
        (0..n)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 22050.0).sin()) as f32)
            .collect()
    }

    #[test]
    fn self_comparison_is_zero() {
        let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
        let x = sine(8192, 440.0);
        assert_eq!(mae_mel(&x, &x, &ex).unwrap(), 0.0);
        assert_eq!(mcd(&x, &x, &ex).unwrap(), 0.0);
    }

    #[test]
    fn mae_is_symmetric_and_matches_l1_of_mels() {
        let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
        let a = sine(8192, 440.0);
        let b = vec![0.0f32; 8192];
        let ab = mae_mel(&a, &b, &ex).unwrap();
        assert_eq!(ab, mae_mel(&b, &a, &ex).unwrap());
        let ma = ex.log_mel(&a).unwrap();
        let mb = ex.log_mel(&b).unwrap();
        let mut sum = 0.0;
        for (x, y) in ma.iter().zip(mb.iter()) {
            sum += (*x as f64 - *y as f64).abs();
        }
        assert!((ab - sum / ma.len() as f64).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn single_coefficient_offset_has_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Array2::from_shape_fn((20, MCD_ORDER + 1), |_| rng.random_range(-3.0..3.0));
        for delta in [0.25, 0.5] {
            let mut c2 = c.clone();
            c2.column_mut(1).mapv_inplace(|v| v + delta);
            let got = mcd_from_cepstra(&c, &c2).unwrap();
            assert!((got - MCD_SCALE * 2f64.sqrt() * delta).abs() < 1e-9);
        }
    }

    #[test]
    fn c0_is_ignored() {
        let c = Array2::zeros((4, MCD_ORDER + 1));
        let mut c2 = c.clone();
        c2.column_mut(0).fill(7.0);
        assert_eq!(mcd_from_cepstra(&c, &c2).unwrap(), 0.0);
    }

    #[test]
    fn dct_is_orthonormal() {
        // A full-order transform preserves the frame's L2 norm.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mel = Array2::from_shape_fn((16, 3), |_| rng.random_range(-5.0f32..1.0));
        let c = mel_cepstrum(&mel, 15);
        for t in 0..3 {
            let a: f64 = mel.column(t).iter().map(|&v| (v as f64).powi(2)).sum();
            let b: f64 = c.row(t).iter().map(|v| v * v).sum();
            assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }

    #[test]
    fn zero_frames_is_an_error() {
        let e = Array2::<f64>::zeros((0, MCD_ORDER + 1));
        assert!(mcd_from_cepstra(&e, &e).is_err());
    }

    #[test]
    fn report_aggregates_are_frame_weighted() {
        let rows = vec![
            ClipMetrics {
                clip_id: "b".into(),
                mae: 1.0,
                mcd_db: 4.0,
                n_frames: 30,
                trimmed_samples: 0,
            },
            ClipMetrics {
                clip_id: "a".into(),
                mae: 3.0,
                mcd_db: 2.0,
                n_frames: 10,
                trimmed_samples: 4,
            },
        ];
        let r = EvalReport::from_rows(rows);
        assert_eq!(r.rows[0].clip_id, "a");
        assert!((r.mae.mean - 1.5).abs() < 1e-12);
        assert!((r.mcd_db.mean - 3.5).abs() < 1e-12);
        assert!((r.mae.std - (0.75f64).sqrt()).abs() < 1e-12);
        assert_eq!(r.total_frames, 40);
    }

    #[test]
    fn alignment_trims_to_whole_hops() {
        assert_eq!(aligned_length(1000, 900, 256), (768, 232 + 132));
        assert_eq!(aligned_length(512, 512, 256), (512, 0));
    }
}
