//! Interval masking of log-mel spectrograms, used to build the positive view
//! for mel–mel contrastive learning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::config::{MaskFill, MaskSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskAxis {
    Time,
    Frequency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskInterval {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskReport {
    pub intervals: Vec<MaskInterval>,
}

impl MaskReport {
    pub fn covers(&self, band: usize, frame: usize) -> bool {
        self.intervals.iter().any(|iv| {
            let pos = match iv.axis {
                MaskAxis::Time => frame,
                MaskAxis::Frequency => band,
            };
            pos >= iv.start && pos < iv.start + iv.width
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mask report serializes")
    }
}

/// Masks random time and frequency intervals. Time masks are drawn first,
/// then frequency masks; every width is uniform in `[1, max]` and every
/// start uniform over the valid range.
///
/// `log_floor` is the fill value for [`MaskFill::LogFloor`].
pub fn mask_mel<R: Rng + ?Sized>(
    mel: &MelSpectrogram,
    spec: &MaskSpec,
    log_floor: f32,
    rng: &mut R,
) -> Result<(MelSpectrogram, MaskReport)> {
    let (n_mels, n_frames) = mel.values.dim();
    if n_mels == 0 || n_frames == 0 {
        return Err(Error::Shape("cannot mask an empty mel spectrogram".into()));
    }
    spec.validate_for(n_mels, n_frames)?;

    let mut report = MaskReport::default();
    let max_t = spec.time_width_for(n_frames);
    for _ in 0..spec.n_time_masks {
        let width = rng.random_range(1..=max_t);
        let start = rng.random_range(0..=n_frames - width);
        report.intervals.push(MaskInterval {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    for _ in 0..spec.n_freq_masks {
        let width = rng.random_range(1..=spec.max_freq_width);
        let start = rng.random_range(0..=n_mels - width);
        report.intervals.push(MaskInterval {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }

    let band_means: Vec<f32> = match spec.fill {
        MaskFill::LogFloor => vec![log_floor; n_mels],
        MaskFill::PerBandMean => mel
            .values
            .rows()
            .into_iter()
            .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / n_frames as f64) as f32)
            .collect(),
    };

    let mut out = mel.clone();
    for iv in &report.intervals {
        match iv.axis {
            MaskAxis::Time => {
                for band in 0..n_mels {
                    for t in iv.start..iv.start + iv.width {
                        out.values[[band, t]] = band_means[band];
                    }
                }
            }
            MaskAxis::Frequency => {
                for band in iv.start..iv.start + iv.width {
                    out.values.row_mut(band).fill(band_means[band]);
                }
            }
        }
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FLOOR: f32 = -11.512925;

    fn random_mel(n_mels: usize, n_frames: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelSpectrogram {
            values: Array2::from_shape_fn((n_mels, n_frames), |_| rng.random_range(-8.0f32..2.0)),
            hop_size: 256,
            source_clip_id: "x".into(),
        }
    }

    #[test]
    fn zero_masks_is_identity() {
        let mel = random_mel(80, 32, 1);
        let (out, report) = mask_mel(&mel, &MaskSpec::none(), FLOOR, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, mel);
        assert!(report.intervals.is_empty());
    }

    #[test]
    fn single_time_mask_changes_width_times_bands_entries() {
        let mel = random_mel(80, 32, 2);
        let spec = MaskSpec {
            n_time_masks: 1,
            max_time_width: Some(8),
            n_freq_masks: 0,
            ..MaskSpec::default()
        };
        // Find a seed that draws the full width of 8.
        let (out, report) = (0..200)
            .map(|s| mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .find(|(_, r)| r.intervals[0].width == 8)
            .expect("some seed draws width 8");
        let changed = out.values.iter().zip(mel.values.iter()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, 8 * 80);
        assert_eq!(report.intervals[0].axis, MaskAxis::Time);
    }

    #[test]
    fn seeded_masking_is_deterministic() {
        let mel = random_mel(80, 32, 3);
        let spec = MaskSpec::default();
        let a = mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_width_is_rejected() {
        let mel = random_mel(20, 8, 4);
        let spec = MaskSpec {
            max_freq_width: 21,
            ..MaskSpec::default()
        };
        assert!(mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn per_band_mean_fill_uses_row_means() {
        let mel = random_mel(10, 16, 6);
        let spec = MaskSpec {
            n_time_masks: 0,
            n_freq_masks: 1,
            max_freq_width: 3,
            fill: MaskFill::PerBandMean,
            ..MaskSpec::default()
        };
        let (out, report) = mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let iv = report.intervals[0];
        for band in iv.start..iv.start + iv.width {
            let mean = mel.values.row(band).iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            assert!(out.values.row(band).iter().all(|&v| (v as f64 - mean).abs() < 1e-5));
        }
    }

    #[test]
    fn report_serializes() {
        let mel = random_mel(80, 32, 7);
        let (_, report) = mask_mel(&mel, &MaskSpec::default(), FLOOR, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let back: MaskReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.intervals.len(), 4);
    }

    proptest! {
        #[test]
        fn masking_preserves_shape_locality_and_coverage(
            n_mels in 4usize..40,
            n_frames in 2usize..40,
            n_time in 0usize..4,
            n_freq in 0usize..4,
            seed in any::<u64>(),
        ) {
            let mel = random_mel(n_mels, n_frames, seed ^ 0x55);
            let spec = MaskSpec {
                n_time_masks: n_time,
                max_time_width: None,
                n_freq_masks: n_freq,
                max_freq_width: (n_mels / 4).max(1),
                fill: MaskFill::LogFloor,
            };
            let (out, report) = mask_mel(&mel, &spec, FLOOR, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.values.dim(), mel.values.dim());
            let mut masked = 0usize;
            for b in 0..n_mels {
                for t in 0..n_frames {
                    if report.covers(b, t) {
                        masked += 1;
                        prop_assert_eq!(out.values[[b, t]], FLOOR);
                    } else {
                        prop_assert_eq!(out.values[[b, t]].to_bits(), mel.values[[b, t]].to_bits());
                    }
                }
            }
            let tw: usize = report.intervals.iter().filter(|i| i.axis == MaskAxis::Time).map(|i| i.width).sum();
            let fw: usize = report.intervals.iter().filter(|i| i.axis == MaskAxis::Frequency).map(|i| i.width).sum();
            let bound = tw as f64 / n_frames as f64 + fw as f64 / n_mels as f64;
            prop_assert!(masked as f64 / (n_mels * n_frames) as f64 <= bound + 1e-12);
        }
    }
}
