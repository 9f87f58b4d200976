mod common;

use std::fs;

use candle_core::Device;
use ndarray::Array2;

use vocl_core::audio::{write_wav, MelExtractor, MelSpectrogram};
use vocl_core::config::FeatureConfig;
use vocl_core::eval::*;
use vocl_core::nets::Generator;
use vocl_core::TrainConfig;

// Same formulas as tests/oracles/mcd_oracle.py.
fn fixture(frames: usize, variant: u8) -> Array2<f32> {
    Array2::from_shape_fn((80, frames), |(m, t)| {
        let (m, t) = (m as f64, t as f64);
        let a = -5.0 + 3.0 * (0.37 * m + 0.11 * t * t).sin();
        let v = if variant == 0 {
            a
        } else {
            a + 0.5 * (1.3 * m * t + 0.2).cos() - 0.25 * (0.05 * m * m).sin()
        };
        v as f32
    })
}

#[test]
fn mcd_and_mae_match_the_scripted_oracle() {
    // (frames, mcd, mae) printed by mcd_oracle.py
    let frozen = [
        (1, 4.072661183897577, 0.5057521656155586),
        (7, 6.352433192814523, 0.35988395384379795),
        (32, 6.1639734367163275, 0.35484225442633033),
    ];
    for (frames, mcd, mae) in frozen {
        let (a, b) = (fixture(frames, 0), fixture(frames, 1));
        assert!((mcd_from_mels(&a, &b).unwrap() - mcd).abs() < 1e-6, "mcd, {frames} frames");
        assert!((mae_from_mels(&a, &b).unwrap() - mae).abs() < 1e-6, "mae, {frames} frames");
    }
}

#[test]
fn mcd_scales_linearly_with_a_single_coefficient_offset() {
    let c = mel_cepstrum(&fixture(5, 0), MCD_ORDER);
    for k in 1..=MCD_ORDER {
        let mut c1 = c.clone();
        c1.column_mut(k).mapv_inplace(|v| v + 0.3);
        let mut c2 = c.clone();
        c2.column_mut(k).mapv_inplace(|v| v + 0.6);
        let d1 = mcd_from_cepstra(&c, &c1).unwrap();
        let d2 = mcd_from_cepstra(&c, &c2).unwrap();
        assert!((d1 - MCD_SCALE * 2f64.sqrt() * 0.3).abs() < 1e-9);
        assert!((d2 - 2.0 * d1).abs() < 1e-9);
    }
}

fn sine(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.6 * (2.0 * std::f64::consts::PI * 330.0 * i as f64 / 22050.0).sin()) as f32)
        .collect()
}

#[test]
fn silence_versus_sine_equals_l1_of_dumped_mels() {
    let dir = tempfile::tempdir().unwrap();
    let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
    let reference = sine(8192);
    let silence = vec![0.0f32; 8192];
    let (metrics, r, g) = compare("s", &reference, &silence, &ex).unwrap();
    let hop = 256;
    for (m, tag) in [(r, "ref"), (g, "gen")] {
        MelSpectrogram {
            values: m,
            hop_size: hop,
            source_clip_id: "s".into(),
        }
        .write_raw(&dir.path().join(format!("{tag}.mel")))
        .unwrap();
    }
    let r = MelSpectrogram::read_raw(&dir.path().join("ref.mel"), hop).unwrap();
    let g = MelSpectrogram::read_raw(&dir.path().join("gen.mel"), hop).unwrap();
    let mut sum = 0.0;
    for (a, b) in r.values.iter().zip(g.values.iter()) {
        sum += (*a as f64 - *b as f64).abs();
    }
    assert!((metrics.mae - sum / r.values.len() as f64).abs() < 1e-9);
    assert_eq!(metrics.mae, mae_mel(&silence, &reference, &ex).unwrap());
    assert!(metrics.mcd_db > 0.0);
    assert_eq!(metrics.n_frames, 32);
}

#[test]
fn metrics_are_non_negative_and_zero_on_self() {
    let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
    let a = sine(6000);
    let b: Vec<f32> = a.iter().map(|x| x * 0.5 + 0.01).collect();
    assert_eq!(mae_mel(&a, &a, &ex).unwrap(), 0.0);
    assert_eq!(mcd(&b, &b, &ex).unwrap(), 0.0);
    assert!(mae_mel(&a, &b, &ex).unwrap() > 0.0);
    assert!(mcd(&a, &b, &ex).unwrap() > 0.0);
}

#[test]
fn length_mismatch_is_trimmed_to_whole_hops() {
    let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
    let a = sine(9000);
    let (m, _, _) = compare("x", &a, &a[..8500], &ex).unwrap();
    assert_eq!(m.n_frames, 8448 / 256);
    assert_eq!(m.trimmed_samples, (9000 - 8448) + (8500 - 8448));
    assert_eq!(m.mae, 0.0);
}

#[test]
fn report_files_round_trip_and_aggregates_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = common::fixture_corpus(&dir.path().join("c"), 3, 3);
    let ex = MelExtractor::new(&FeatureConfig::default()).unwrap();
    let opts = EvalOptions {
        wav_dir: None,
        mel_dir: Some(dir.path().join("mels")),
    };
    let (report, _) = evaluate_entries(&corpus.validation, &Candidate::GroundTruth, &ex, &opts).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.mae == 0.0 && r.mcd_db == 0.0));
    assert!(report.rows.windows(2).all(|w| w[0].clip_id < w[1].clip_id));
    report.write(&dir.path().join("out")).unwrap();
    let back = EvalReport::read_json(&dir.path().join("out/report.json")).unwrap();
    assert_eq!(back, report);
    let csv = fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(fs::read_dir(dir.path().join("mels")).unwrap().count(), 6);
}

#[test]
fn synthesis_is_deterministic_and_length_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::tiny();
    let g = Generator::new(&cfg.generator, &cfg.feature, &cfg.contrastive, 3, &Device::Cpu).unwrap();
    let ex = MelExtractor::new(&cfg.feature).unwrap();
    let mel = MelSpectrogram {
        values: ex.log_mel(&sine(5000)).unwrap(),
        hop_size: 256,
        source_clip_id: "s".into(),
    };
    let a = synthesize(&g, &mel, 22050, &dir.path().join("a.wav")).unwrap();
    let b = synthesize(&g, &mel, 22050, &dir.path().join("b.wav")).unwrap();
    assert_eq!(fs::read(&a.path).unwrap(), fs::read(&b.path).unwrap());
    assert_eq!(a.n_samples, mel.n_frames() * 256);
    let reader = hound::WavReader::open(&a.path).unwrap();
    assert_eq!(reader.duration() as usize, mel.n_frames() * 256);
    assert_eq!(reader.spec().sample_rate, 22050);
}

#[test]
fn wav_writer_counts_clipped_samples() {
    let dir = tempfile::tempdir().unwrap();
    let n = write_wav(&dir.path().join("c.wav"), &[0.0, 1.5, -2.0, 0.99], 22050).unwrap();
    assert_eq!(n, 2);
}
