//! Generator, discriminator bank and projection heads.
//!
//! The generator follows the HiFi-GAN family: an input convolution over the
//! mel frames, a stack of upsampling stages each followed by dilated residual
//! blocks, and a tanh output. Upsampling is nearest-neighbour repetition
//! followed by a convolution. The discriminator bank holds period
//! discriminators (waveform folded into `period` interleaved sequences) and
//! scale discriminators (waveform average-pooled `k` times).
//!
//! The mel encoder is the generator's input convolution; its output is the
//! feature map tapped for contrastive learning. The wave encoder of each
//! sub-discriminator is everything up to its penultimate layer.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::config::{ContrastiveConfig, DiscriminatorBankConfig, FeatureConfig, GeneratorConfig};
use crate::error::{Error, Result};

pub const LRELU_SLOPE: f64 = 0.1;
const CONV_INIT_STD: f64 = 0.01;

/// Named, ordered learnable parameters with seeded initialisation.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn insert(&mut self, name: String, data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Shape(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect();
        self.insert(name.into(), data, shape)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![0.0; n], shape)
    }

    pub fn named(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over every parameter's name, shape and raw bits.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in var.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Overwrites every parameter from `values`; names and shapes must match.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` missing")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        if values.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.vars.len()
            )));
        }
        Ok(())
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// 1-D convolution with explicit (possibly asymmetric) zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    pad_left: usize,
    pad_right: usize,
    stride: usize,
    dilation: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvSpec {
    /// Stride-1 convolution preserving length.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self {
            kernel,
            stride: 1,
            dilation,
            groups: 1,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    pub fn strided(kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            kernel,
            stride,
            dilation: 1,
            groups,
            pad_left: padding,
            pad_right: padding,
        }
    }
}

impl Conv1d {
    /// Weights drawn from N(0, 0.01²), as for the generator's upsampling,
    /// residual and output layers.
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        Self::with_std(store, name, c_in, c_out, spec, CONV_INIT_STD)
    }

    /// Weights scaled by fan-in (std 1/sqrt(3·fan_in)), so activations keep
    /// their magnitude through deep stacks.
    pub fn fan_in(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let fan_in = (c_in / spec.groups.max(1)) * spec.kernel;
        Self::with_std(store, name, c_in, c_out, spec, 1.0 / (3.0 * fan_in as f64).sqrt())
    }

    fn with_std(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, spec: ConvSpec, std: f64) -> Result<Self> {
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Shape(format!(
                "{name}: channels {c_in}->{c_out} not divisible by groups {}",
                spec.groups
            )));
        }
        let weight = store.normal(
            format!("{name}.weight"),
            &[c_out, c_in / spec.groups, spec.kernel],
            std,
        )?;
        let bias = store.zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            weight,
            bias,
            pad_left: spec.pad_left,
            pad_right: spec.pad_right,
            stride: spec.stride,
            dilation: spec.dilation,
            groups: spec.groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).expect("conv weight is 3-D")
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad_left + self.pad_right > 0 {
            x.pad_with_zeros(2, self.pad_left, self.pad_right)?
        } else {
            x.clone()
        };
        let y = x.conv1d(&self.weight, 0, self.stride, self.dilation, self.groups)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    convs: Vec<Conv1d>,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.convs {
            let xt = conv.forward(&leaky_relu(&x, LRELU_SLOPE)?)?;
            x = (xt + x)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct UpsampleStage {
    rate: usize,
    conv: Conv1d,
    resblocks: Vec<ResBlock>,
}

/// Affine map from pooled backbone features into the contrastive latent space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    weight: Tensor,
    bias: Tensor,
    normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Mel,
    Wave,
}

/// `N × D` embeddings produced by a projection head.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub vectors: Tensor,
    pub modality: Modality,
    pub normalized: bool,
}

impl EmbeddingBatch {
    pub fn detach(&self) -> Self {
        Self {
            vectors: self.vectors.detach(),
            ..self.clone()
        }
    }
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, latent_dim: usize, normalize: bool) -> Result<Self> {
        let weight = store.normal(
            format!("{name}.weight"),
            &[latent_dim, input_dim],
            1.0 / (input_dim as f64).sqrt(),
        )?;
        let bias = store.zeros(format!("{name}.bias"), &[latent_dim])?;
        Ok(Self {
            weight,
            bias,
            normalize,
        })
    }

    /// Builds a head from explicit tensors (`weight: [D, C]`, `bias: [D]`).
    pub fn from_tensors(weight: Tensor, bias: Tensor, normalize: bool) -> Self {
        Self {
            weight,
            bias,
            normalize,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(1).expect("head weight is 2-D")
    }

    pub fn latent_dim(&self) -> usize {
        self.weight.dim(0).expect("head weight is 2-D")
    }

    /// Mean-pools `[N, C, T]` features over time, applies the affine map and
    /// optionally L2-normalises each row.
    pub fn project(&self, features: &Tensor, modality: Modality) -> Result<EmbeddingBatch> {
        let (_, c, _) = features.dims3()?;
        if c != self.input_dim() {
            return Err(Error::Shape(format!(
                "projection head expects {} channels, got {c}",
                self.input_dim()
            )));
        }
        let pooled = features.mean(2)?;
        let z = pooled.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let vectors = if self.normalize { l2_normalize(&z)? } else { z };
        Ok(EmbeddingBatch {
            vectors,
            modality,
            normalized: self.normalize,
        })
    }
}

/// Mel-to-waveform generator plus the mel projection head. Owns its
/// parameters.
#[derive(Debug)]
pub struct Generator {
    conv_pre: Conv1d,
    stages: Vec<UpsampleStage>,
    conv_post: Conv1d,
    pub mel_head: ProjectionHead,
    params: ParamStore,
    hop_size: usize,
    n_mels: usize,
}

impl Generator {
    pub fn new(
        cfg: &GeneratorConfig,
        feature: &FeatureConfig,
        contrastive: &ContrastiveConfig,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate(feature.hop_size)?;
        let mut store = ParamStore::new(seed, device);
        let conv_pre = Conv1d::fan_in(&mut store, "conv_pre", feature.n_mels, cfg.base_channels, ConvSpec::same(7, 1))?;
        let mut stages = Vec::new();
        let mut ch = cfg.base_channels;
        for (i, (&rate, &k)) in cfg.upsample_rates.iter().zip(&cfg.upsample_kernel_sizes).enumerate() {
            let out = ch / 2;
            let conv = Conv1d::new(&mut store, &format!("ups.{i}"), ch, out, ConvSpec::same(k, 1))?;
            let mut resblocks = Vec::new();
            for (j, (&rk, dils)) in cfg
                .resblock_kernel_sizes
                .iter()
                .zip(&cfg.resblock_dilations)
                .enumerate()
            {
                let convs = dils
                    .iter()
                    .enumerate()
                    .map(|(m, &d)| {
                        Conv1d::new(
                            &mut store,
                            &format!("resblocks.{i}.{j}.convs.{m}"),
                            out,
                            out,
                            ConvSpec::same(rk, d),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                resblocks.push(ResBlock { convs });
            }
            stages.push(UpsampleStage { rate, conv, resblocks });
            ch = out;
        }
        let conv_post = Conv1d::new(&mut store, "conv_post", ch, 1, ConvSpec::same(7, 1))?;
        let mel_head = ProjectionHead::new(
            &mut store,
            "mel_head",
            cfg.base_channels,
            contrastive.latent_dim,
            contrastive.normalize_embeddings,
        )?;
        Ok(Self {
            conv_pre,
            stages,
            conv_post,
            mel_head,
            params: store,
            hop_size: feature.hop_size,
            n_mels: feature.n_mels,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn hop_size(&self) -> usize {
        self.hop_size
    }

    fn check_input(&self, mel: &Tensor) -> Result<()> {
        let (_, c, t) = mel.dims3()?;
        if c != self.n_mels || t == 0 {
            return Err(Error::Shape(format!(
                "generator expects [N, {}, T>0] mel input, got {:?}",
                self.n_mels,
                mel.dims()
            )));
        }
        Ok(())
    }

    /// Mel encoder: `[N, n_mels, T] -> [N, base_channels, T]` (stride 1).
    pub fn encode_mel(&self, mel: &Tensor) -> Result<Tensor> {
        self.check_input(mel)?;
        self.conv_pre.forward(mel)
    }

    /// Waveform decoder on top of encoded features: `[N, C, T] -> [N, T·hop]`.
    pub fn decode(&self, features: &Tensor) -> Result<Tensor> {
        let mut x = features.clone();
        for stage in &self.stages {
            x = leaky_relu(&x, LRELU_SLOPE)?;
            let t = x.dim(2)?;
            x = x.upsample_nearest1d(t * stage.rate)?;
            x = stage.conv.forward(&x)?;
            let mut acc: Option<Tensor> = None;
            for rb in &stage.resblocks {
                let y = rb.forward(&x)?;
                acc = Some(match acc {
                    None => y,
                    Some(a) => (a + y)?,
                });
            }
            if let Some(acc) = acc {
                x = (acc / stage.resblocks.len() as f64)?;
            }
        }
        let x = leaky_relu(&x, 0.01)?;
        let x = self.conv_post.forward(&x)?.tanh()?;
        Ok(x.squeeze(1)?)
    }

    /// `[N, n_mels, T] -> [N, T·hop]`, outputs in (-1, 1).
    pub fn forward(&self, mel: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode_mel(mel)?)
    }

    /// Forward pass that also returns the tapped mel-encoder features.
    pub fn forward_with_features(&self, mel: &Tensor) -> Result<(Tensor, Tensor)> {
        let feats = self.encode_mel(mel)?;
        let wave = self.decode(&feats)?;
        Ok((wave, feats))
    }

    pub fn embed_mel(&self, mel: &Tensor) -> Result<EmbeddingBatch> {
        self.mel_head.project(&self.encode_mel(mel)?, Modality::Mel)
    }
}

#[derive(Debug, Clone)]
enum SubKind {
    Period(usize),
    Scale(usize),
}

#[derive(Debug, Clone)]
struct SubDiscriminator {
    kind: SubKind,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

/// Output of one sub-discriminator.
#[derive(Debug, Clone)]
pub struct DiscOutput {
    /// `[N, S]` real/fake score map.
    pub scores: Tensor,
    /// Intermediate activations used by feature matching (includes the
    /// score map, as in the reference recipe).
    pub features: Vec<Tensor>,
    /// Penultimate activations reshaped to `[N, C, T']` for projection.
    pub tap: Tensor,
}

fn avg_pool(x: &Tensor) -> Result<Tensor> {
    // kernel 4, stride 2, zero padding 2, padding counted in the average
    let k = Tensor::full(0.25f32, (1, 1, 4), x.device())?;
    Ok(x.pad_with_zeros(2, 2, 2)?.conv1d(&k, 0, 2, 1, 1)?)
}

fn reflect_pad_right(x: &Tensor, n_pad: usize) -> Result<Tensor> {
    if n_pad == 0 {
        return Ok(x.clone());
    }
    let len = x.dim(D::Minus1)?;
    if n_pad >= len {
        return Err(Error::Shape(format!("cannot reflect-pad {n_pad} on length {len}")));
    }
    let idx: Vec<u32> = (0..len as u32)
        .chain((1..=n_pad as u32).map(|i| len as u32 - 1 - i))
        .collect();
    let idx = Tensor::from_vec(idx, len + n_pad, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

impl SubDiscriminator {
    fn period(store: &mut ParamStore, name: &str, period: usize, c: usize) -> Result<Self> {
        let widths = [1, c, 2 * c, 4 * c, 4 * c];
        let mut convs = Vec::new();
        for i in 0..4 {
            let stride = if i < 3 { 3 } else { 1 };
            convs.push(Conv1d::fan_in(
                store,
                &format!("{name}.convs.{i}"),
                widths[i],
                widths[i + 1],
                ConvSpec::strided(5, stride, 2, 1),
            )?);
        }
        let post = Conv1d::fan_in(store, &format!("{name}.post"), 4 * c, 1, ConvSpec::strided(3, 1, 1, 1))?;
        Ok(Self {
            kind: SubKind::Period(period),
            convs,
            post,
        })
    }

    fn scale(store: &mut ParamStore, name: &str, pools: usize, c: usize) -> Result<Self> {
        let specs = [
            (1, c, ConvSpec::strided(15, 1, 7, 1)),
            (c, 2 * c, ConvSpec::strided(41, 4, 20, 4)),
            (2 * c, 4 * c, ConvSpec::strided(41, 4, 20, 4)),
            (4 * c, 4 * c, ConvSpec::strided(5, 1, 2, 1)),
        ];
        let convs = specs
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, spec))| Conv1d::fan_in(store, &format!("{name}.convs.{i}"), ci, co, spec))
            .collect::<Result<Vec<_>>>()?;
        let post = Conv1d::fan_in(store, &format!("{name}.post"), 4 * c, 1, ConvSpec::strided(3, 1, 1, 1))?;
        Ok(Self {
            kind: SubKind::Scale(pools),
            convs,
            post,
        })
    }

    fn forward(&self, wave: &Tensor) -> Result<DiscOutput> {
        let (n, len) = wave.dims2()?;
        let (mut x, fold) = match self.kind {
            SubKind::Period(p) => {
                let x = reflect_pad_right(wave, (p - len % p) % p)?;
                let rows = x.dim(1)? / p;
                // [N, L] -> [N, rows, p] -> [N, p, rows] -> [N·p, 1, rows]
                let x = x.reshape((n, rows, p))?.transpose(1, 2)?.contiguous()?;
                (x.reshape((n * p, 1, rows))?, p)
            }
            SubKind::Scale(pools) => {
                let mut x = wave.unsqueeze(1)?;
                for _ in 0..pools {
                    x = avg_pool(&x)?;
                }
                (x, 1)
            }
        };
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for conv in &self.convs {
            x = leaky_relu(&conv.forward(&x)?, LRELU_SLOPE)?;
            features.push(x.clone());
        }
        let tap = {
            let (_, c, t) = x.dims3()?;
            x.reshape((n, fold, c, t))?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((n, c, fold * t))?
        };
        let score = self.post.forward(&x)?;
        features.push(score.clone());
        let scores = score.reshape((n, ()))?;
        Ok(DiscOutput { scores, features, tap })
    }

    fn tap_channels(&self) -> usize {
        self.convs.last().expect("sub-discriminator has convs").out_channels()
    }
}

/// Period and scale discriminators plus one wave projection head per
/// sub-discriminator. Owns its parameters.
#[derive(Debug)]
pub struct DiscriminatorBank {
    subs: Vec<SubDiscriminator>,
    pub wave_heads: Vec<ProjectionHead>,
    params: ParamStore,
}

impl DiscriminatorBank {
    pub fn new(cfg: &DiscriminatorBankConfig, contrastive: &ContrastiveConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, device);
        let mut subs = Vec::new();
        for (i, &p) in cfg.periods.iter().enumerate() {
            subs.push(SubDiscriminator::period(&mut store, &format!("mpd.{i}"), p, cfg.channels)?);
        }
        for s in 0..cfg.n_scales {
            subs.push(SubDiscriminator::scale(&mut store, &format!("msd.{s}"), s, cfg.channels)?);
        }
        let wave_heads = subs
            .iter()
            .enumerate()
            .map(|(i, sub)| {
                ProjectionHead::new(
                    &mut store,
                    &format!("wave_heads.{i}"),
                    sub.tap_channels(),
                    contrastive.latent_dim,
                    contrastive.normalize_embeddings,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            subs,
            wave_heads,
            params: store,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    /// Scores and features of every sub-discriminator for `[N, L]` waves.
    pub fn forward(&self, wave: &Tensor) -> Result<Vec<DiscOutput>> {
        self.subs.iter().map(|s| s.forward(wave)).collect()
    }

    /// Wave encoder of sub-discriminator `index`: `[N, C, T']`.
    pub fn encode_wave(&self, wave: &Tensor, index: usize) -> Result<Tensor> {
        let sub = self.subs.get(index).ok_or_else(|| {
            Error::Shape(format!(
                "discriminator index {index} out of range ({} discriminators)",
                self.subs.len()
            ))
        })?;
        Ok(sub.forward(wave)?.tap)
    }

    /// Projects each output's tap through the matching wave head.
    pub fn embed_outputs(&self, outputs: &[DiscOutput]) -> Result<Vec<EmbeddingBatch>> {
        outputs
            .iter()
            .zip(&self.wave_heads)
            .map(|(o, h)| h.project(&o.tap, Modality::Wave))
            .collect()
    }
}
