//! Shared test helpers: brute-force loss oracles and fixture runs.
#![allow(dead_code)]

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vocl_core::audio::{load_corpus, AudioCorpus, SplitSpec};
use vocl_core::config::ClMode;
use vocl_core::fixture::{write_synthetic_corpus, CorpusSpec};
use vocl_core::TrainConfig;

pub type Matrix = Vec<Vec<f64>>;

pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, normalize: bool) -> Matrix {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            if normalize {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter().map(|x| x / norm).collect()
            } else {
                row
            }
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(m: &Matrix, dtype: DType) -> Tensor {
    let (n, d) = (m.len(), m[0].len());
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (n, d), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn matrix(t: &Tensor) -> Matrix {
    t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Literal double loop over anchors and candidates, no stabilization.
pub fn oracle_mel_mel(v: &Matrix, m: &Matrix, tau: f64, include_positive: bool) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (tau * dot(&v[i], &v[j])).exp();
            }
        }
        for j in 0..n {
            if include_positive || j != i {
                denom += (tau * dot(&v[i], &m[j])).exp();
            }
        }
        total += -((tau * dot(&v[i], &m[i])).exp() / denom).ln();
    }
    total / n as f64
}

fn oracle_one_way(a: &Matrix, b: &Matrix, tau: f64, include_positive: bool) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            if include_positive || j != i {
                denom += (tau * dot(&a[i], &b[j])).exp();
            }
        }
        total += -((tau * dot(&a[i], &b[i])).exp() / denom).ln();
    }
    total / n as f64
}

pub fn oracle_mel_wave(v: &Matrix, w: &Matrix, tau: f64, include_positive: bool, symmetric: bool) -> f64 {
    let f = oracle_one_way(v, w, tau, include_positive);
    if symmetric {
        0.5 * (f + oracle_one_way(w, v, tau, include_positive))
    } else {
        f
    }
}

/// Central finite differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = x.clone();
    for i in 0..x.len() {
        for j in 0..x[i].len() {
            let mut p = x.clone();
            p[i][j] += step;
            let mut q = x.clone();
            q[i][j] -= step;
            g[i][j] = (f(&p) - f(&q)) / (2.0 * step);
        }
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)` over all entries.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            diff += (x - y).powi(2);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-300)
}

/// Writes `n_train + n_validation` synthetic clips under `dir` and loads
/// them with the last `n_validation` as validation.
pub fn fixture_corpus(dir: &Path, n_train: usize, n_validation: usize) -> AudioCorpus {
    write_synthetic_corpus(dir, &CorpusSpec::small(n_train + n_validation)).unwrap();
    load_corpus(dir, &SplitSpec::LastSorted(n_validation)).unwrap()
}

/// The small preset pointed at `out_dir`, with reproducible metrics files.
pub fn tiny_config(mode: ClMode, out_dir: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::tiny();
    cfg.loss_weights.cl_mode = mode;
    cfg.out_dir = out_dir.to_path_buf();
    cfg.record_wallclock = false;
    cfg
}
