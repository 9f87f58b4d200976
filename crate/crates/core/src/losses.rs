//! Loss terms and their composition into the generator and discriminator
//! objectives.
//!
//! The contrastive losses use the inverse-temperature convention: logits are
//! `tau * (a · b)`. All tensor losses are dtype-agnostic; training runs them
//! in f32, gradient checks in f64.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::audio::{analysis_window, mel_filterbank, MAGNITUDE_EPS};
use crate::config::{ContrastiveConfig, FeatureConfig, LossWeights};
use crate::error::{Error, Result};

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    let (n, d) = a.dims2()?;
    let (n2, d2) = b.dims2()?;
    if n != n2 || d != d2 {
        return Err(Error::Shape(format!(
            "{what}: embedding batches differ in shape ({n}x{d} vs {n2}x{d2})"
        )));
    }
    if n < 2 {
        return Err(Error::Shape(format!(
            "{what}: batch of {n} has no negatives; N >= 2 required"
        )));
    }
    Ok((n, d))
}

/// Additive logit mask: 0 where a candidate counts, -inf where it is excluded.
fn exclusion_mask(rows: usize, cols: usize, excluded: impl Fn(usize, usize) -> bool, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|k| if excluded(k / cols, k % cols) { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Row-wise log-sum-exp with max subtraction. The max is detached; the
/// result's gradient is unaffected.
pub fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok((s + m)?.squeeze(D::Minus1)?)
}

/// Mean of a 1-D tensor taken about its (detached) first entry, so a vector
/// of equal values averages to that value without rounding.
fn shifted_mean(x: &Tensor) -> Result<Tensor> {
    let c = x.narrow(0, 0, 1)?.detach();
    Ok((x.broadcast_sub(&c)?.mean_all()? + c.squeeze(0)?)?)
}

fn row_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a * b)?.sum(D::Minus1)?)
}

/// Masked mel–mel InfoNCE.
///
/// Anchors are the `N` original embeddings. Each anchor's candidate pool is
/// all `2N` embeddings (originals then masked views) minus the anchor
/// itself, so it holds one positive (its own masked view) and `2(N-1)`
/// negatives. With `include_positive_in_denominator = false` the positive is
/// dropped from the pool as well.
pub fn mel_mel_infonce(originals: &Tensor, masked: &Tensor, cfg: &ContrastiveConfig) -> Result<Tensor> {
    let (n, _) = check_pair(originals, masked, "mel_mel_infonce")?;
    let pool = Tensor::cat(&[originals, masked], 0)?;
    let logits = (originals.matmul(&pool.t()?)? * cfg.tau)?;
    let keep_pos = cfg.include_positive_in_denominator;
    let mask = exclusion_mask(
        n,
        2 * n,
        |i, j| j == i || (!keep_pos && j == n + i),
        logits.dtype(),
        logits.device(),
    )?;
    let lse = logsumexp_rows(&(logits + mask)?)?;
    let pos = (row_dot(originals, masked)? * cfg.tau)?;
    shifted_mean(&(lse - pos)?)
}

fn cross_modal_one_way(anchors: &Tensor, targets: &Tensor, tau: f64, keep_pos: bool) -> Result<Tensor> {
    let (n, _) = anchors.dims2()?;
    let logits = (anchors.matmul(&targets.t()?)? * tau)?;
    let logits = if keep_pos {
        logits
    } else {
        let mask = exclusion_mask(n, n, |i, j| i == j, logits.dtype(), logits.device())?;
        (logits + mask)?
    };
    let lse = logsumexp_rows(&logits)?;
    let pos = (row_dot(anchors, targets)? * tau)?;
    shifted_mean(&(lse - pos)?)
}

/// Mel–waveform InfoNCE: each mel embedding `v_i` must pick its paired
/// waveform embedding `w_i` among all `N` waveform embeddings. When
/// `symmetric_cross_modal` is set the waveform-anchored direction is
/// averaged in.
pub fn mel_wave_infonce(mel_emb: &Tensor, wave_emb: &Tensor, cfg: &ContrastiveConfig) -> Result<Tensor> {
    check_pair(mel_emb, wave_emb, "mel_wave_infonce")?;
    let keep = cfg.include_positive_in_denominator;
    let forward = cross_modal_one_way(mel_emb, wave_emb, cfg.tau, keep)?;
    if cfg.symmetric_cross_modal {
        let backward = cross_modal_one_way(wave_emb, mel_emb, cfg.tau, keep)?;
        Ok(((forward + backward)? * 0.5)?)
    } else {
        Ok(forward)
    }
}

/// Sum of [`mel_wave_infonce`] over every discriminator's waveform
/// embeddings. Returns the total and the per-discriminator terms.
pub fn mel_wave_infonce_multi(mel_emb: &Tensor, wave_embs: &[Tensor], cfg: &ContrastiveConfig) -> Result<(Tensor, Vec<Tensor>)> {
    if wave_embs.is_empty() {
        return Err(Error::Shape("mel_wave_infonce_multi: no waveform embeddings".into()));
    }
    let parts = wave_embs
        .iter()
        .map(|w| mel_wave_infonce(mel_emb, w, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = (total + p)?;
    }
    Ok((total, parts))
}

fn check_scores(real: &[Tensor], fake: &[Tensor]) -> Result<()> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Shape("adversarial loss needs at least one score map".into()));
    }
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "{} real score maps vs {} fake",
            real.len(),
            fake.len()
        )));
    }
    Ok(())
}

fn sum_all(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let mut acc = it.next().ok_or_else(|| Error::Shape("empty loss sum".into()))?;
    for t in it {
        acc = (acc + t)?;
    }
    Ok(acc)
}

/// Least-squares discriminator loss: Σ_d mean((real−1)²) + mean(fake²).
pub fn discriminator_adversarial_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    check_scores(real, fake)?;
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| Ok(((r - 1.0)?.sqr()?.mean_all()? + f.sqr()?.mean_all()?)?))
        .collect::<Result<Vec<_>>>()?;
    sum_all(terms)
}

/// Least-squares generator loss: Σ_d mean((fake−1)²).
pub fn generator_adversarial_loss(fake: &[Tensor]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::Shape("adversarial loss needs at least one score map".into()));
    }
    let terms = fake
        .iter()
        .map(|f| Ok((f - 1.0)?.sqr()?.mean_all()?))
        .collect::<Result<Vec<_>>>()?;
    sum_all(terms)
}

/// Both adversarial terms on the same score maps: `(l_adv_g, l_adv_d)`.
pub fn adversarial_losses(real: &[Tensor], fake: &[Tensor]) -> Result<(Tensor, Tensor)> {
    check_scores(real, fake)?;
    Ok((generator_adversarial_loss(fake)?, discriminator_adversarial_loss(real, fake)?))
}

/// Σ over discriminators and layers of mean |real − fake|.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape("feature matching: discriminator count mismatch".into()));
    }
    let mut terms = Vec::new();
    for (r_layers, f_layers) in real.iter().zip(fake) {
        if r_layers.len() != f_layers.len() {
            return Err(Error::Shape("feature matching: layer count mismatch".into()));
        }
        for (r, f) in r_layers.iter().zip(f_layers) {
            terms.push((r - f)?.abs()?.mean_all()?);
        }
    }
    sum_all(terms)
}

/// Differentiable log-mel front end: reflect padding and framing as one
/// gather, the windowed DFT and the mel projection as matrix products, then
/// clamp and natural log. Matches [`crate::audio::MelExtractor`] up to
/// floating-point accumulation order.
#[derive(Debug, Clone)]
pub struct DiffMel {
    /// `[n_fft, 2 * n_bins]`: cosine columns, then sine columns.
    basis: Tensor,
    /// `[n_bins, n_mels]`.
    filterbank_t: Tensor,
    n_fft: usize,
    n_bins: usize,
    n_mels: usize,
    pad: usize,
    hop: usize,
    floor: f64,
}

impl DiffMel {
    pub fn new(cfg: &FeatureConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let n_fft = cfg.n_fft;
        let n_bins = cfg.n_bins();
        let window = analysis_window(cfg);
        let mut basis = vec![0.0f64; n_fft * 2 * n_bins];
        for t in 0..n_fft {
            for k in 0..n_bins {
                let angle = 2.0 * std::f64::consts::PI * ((k * t) % n_fft) as f64 / n_fft as f64;
                basis[t * 2 * n_bins + k] = window[t] * angle.cos();
                basis[t * 2 * n_bins + n_bins + k] = -window[t] * angle.sin();
            }
        }
        let basis = Tensor::from_vec(basis, (n_fft, 2 * n_bins), device)?.to_dtype(dtype)?;
        let fb = mel_filterbank(cfg);
        let filterbank_t = Tensor::from_vec(fb.t().iter().copied().collect::<Vec<_>>(), (n_bins, cfg.n_mels), device)?
            .to_dtype(dtype)?;
        Ok(Self {
            basis,
            filterbank_t,
            n_fft,
            n_bins,
            n_mels: cfg.n_mels,
            pad: cfg.pad_each_side(),
            hop: cfg.hop_size,
            floor: cfg.log_floor,
        })
    }

    /// Sample index (into the unpadded signal) of every frame entry.
    fn frame_index(&self, len: usize, frames: usize, device: &Device) -> Result<Tensor> {
        let idx: Vec<u32> = (0..frames)
            .flat_map(|t| (0..self.n_fft).map(move |k| t * self.hop + k))
            .map(|p| {
                // p indexes the padded signal; reflect back into [0, len).
                let i = p as i64 - self.pad as i64;
                let r = if i < 0 {
                    -i
                } else if i >= len as i64 {
                    2 * (len as i64 - 1) - i
                } else {
                    i
                };
                r as u32
            })
            .collect();
        Ok(Tensor::from_vec(idx, frames * self.n_fft, device)?)
    }

    /// `[N, L] -> [N, n_mels, L / hop]`.
    pub fn log_mel(&self, wave: &Tensor) -> Result<Tensor> {
        let (n, len) = wave.dims2()?;
        if len <= self.pad || len < self.hop {
            return Err(Error::Shape(format!("waveform of {len} samples too short for one frame")));
        }
        let frames = (len + 2 * self.pad - self.n_fft) / self.hop + 1;
        let idx = self.frame_index(len, frames, wave.device())?;
        let x = wave.index_select(&idx, 1)?.reshape((n * frames, self.n_fft))?;
        let spec = x.matmul(&self.basis)?;
        let re = spec.narrow(1, 0, self.n_bins)?;
        let im = spec.narrow(1, self.n_bins, self.n_bins)?;
        let mag = ((re.sqr()? + im.sqr()?)? + MAGNITUDE_EPS)?.sqrt()?;
        let mel = mag
            .matmul(&self.filterbank_t)?
            .reshape((n, frames, self.n_mels))?
            .transpose(1, 2)?;
        Ok(mel.maximum(self.floor)?.log()?)
    }

    /// L1 distance between the log-mels of two waveform batches.
    pub fn reconstruction_loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let r = self.log_mel(real)?;
        let f = self.log_mel(fake)?;
        Ok((r - f)?.abs()?.mean_all()?)
    }
}

/// One-shot mel reconstruction loss.
pub fn mel_reconstruction_loss(real: &Tensor, fake: &Tensor, cfg: &FeatureConfig) -> Result<Tensor> {
    DiffMel::new(cfg, real.dtype(), real.device())?.reconstruction_loss(real, fake)
}

/// Something that can be accumulated into a weighted objective.
pub trait LossTerm: Sized {
    fn add_scaled(&self, other: &Self, k: f64) -> Result<Self>;
}

impl LossTerm for f64 {
    fn add_scaled(&self, other: &Self, k: f64) -> Result<Self> {
        Ok(self + k * other)
    }
}

impl LossTerm for Tensor {
    fn add_scaled(&self, other: &Self, k: f64) -> Result<Self> {
        Ok((self + (other * k)?)?)
    }
}

fn add_term<T: LossTerm + Clone>(acc: T, term: Option<&T>, k: f64) -> Result<T> {
    match term {
        // A zero weight drops the term entirely, so NaN * 0 cannot leak in.
        Some(t) if k != 0.0 => acc.add_scaled(t, k),
        _ => Ok(acc),
    }
}

/// L_G = L_adv + λ_fm·L_fm + λ_mel·L_mel + λ_cl·L_cl, with the contrastive
/// term gated off when `cl_mode = none`.
pub fn compose_generator_loss<T: LossTerm + Clone>(
    l_adv: &T,
    l_fm: &T,
    l_mel: &T,
    l_cl: Option<&T>,
    w: &LossWeights,
) -> Result<T> {
    let acc = add_term(l_adv.clone(), Some(l_fm), w.lambda_fm)?;
    let acc = add_term(acc, Some(l_mel), w.lambda_mel)?;
    add_term(acc, l_cl, w.generator_cl_weight())
}

/// L_D = L_adv + 𝕀_disc·λ_cl·L_cl.
pub fn compose_discriminator_loss<T: LossTerm + Clone>(l_adv: &T, l_cl: Option<&T>, w: &LossWeights) -> Result<T> {
    add_term(l_adv.clone(), l_cl, w.discriminator_cl_weight())
}

/// Every loss term of one training step.
///
/// `l_cl` is the contrastive value seen by the generator phase and
/// `l_cl_disc` the one seen by the discriminator phase. The generator phase
/// runs after the discriminator update, so the two may differ.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_adv_g: f64,
    pub l_adv_d: f64,
    pub l_fm: f64,
    pub l_mel: f64,
    pub l_cl: f64,
    pub l_cl_disc: f64,
    pub l_cl_components: Vec<f64>,
    pub l_g_total: f64,
    pub l_d_total: f64,
}

impl LossBreakdown {
    /// Re-derives both totals from the parts.
    pub fn recomposed(&self, w: &LossWeights) -> (f64, f64) {
        let cl = (w.cl_mode != crate::config::ClMode::None).then_some(&self.l_cl);
        let cl_d = w.i_disc().then_some(&self.l_cl_disc);
        (
            compose_generator_loss(&self.l_adv_g, &self.l_fm, &self.l_mel, cl, w).expect("f64 arithmetic"),
            compose_discriminator_loss(&self.l_adv_d, cl_d, w).expect("f64 arithmetic"),
        )
    }

    pub fn named_terms(&self) -> [(&'static str, f64); 8] {
        [
            ("l_adv_g", self.l_adv_g),
            ("l_adv_d", self.l_adv_d),
            ("l_fm", self.l_fm),
            ("l_mel", self.l_mel),
            ("l_cl", self.l_cl),
            ("l_cl_disc", self.l_cl_disc),
            ("l_g_total", self.l_g_total),
            ("l_d_total", self.l_d_total),
        ]
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
