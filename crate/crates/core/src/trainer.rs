//! The multi-task adversarial training loop.
//!
//! Each step runs a discriminator update followed by a generator update on
//! the same batch. All randomness is drawn from streams keyed by
//! `(seed, purpose, index)`, so a run is a pure function of its config and
//! resuming from a checkpoint replays exactly the same batches.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    read_entry, sample_segment, select_subset, write_manifest, AudioCorpus, ClipEntry, MelExtractor, SplitSpec,
    WaveformClip,
};
use crate::augment::mask_mel;
use crate::checkpoint::{checkpoint_name, write_latest, Checkpoint};
use crate::config::{ClMode, TrainConfig};
use crate::error::{Error, IoContext, Result};
use crate::eval::{evaluate_entries, Candidate, EvalOptions, EvalReport};
use crate::losses::{
    compose_discriminator_loss, compose_generator_loss, discriminator_adversarial_loss, feature_matching_loss,
    generator_adversarial_loss, mel_mel_infonce, mel_wave_infonce_multi, scalar, DiffMel, LossBreakdown,
};
use crate::nets::{DiscOutput, DiscriminatorBank, Generator, Modality};
use crate::optim::{AdamW, AdamWParams};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BATCHES_FILE: &str = "batches.csv";
pub const MANIFEST_FILE: &str = "subset_manifest.txt";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const ABORT_FILE: &str = "abort.json";

pub const METRICS_HEADER: [&str; 14] = [
    "row_type",
    "step",
    "l_adv_g",
    "l_adv_d",
    "l_fm",
    "l_mel",
    "l_cl",
    "l_cl_disc",
    "l_g_total",
    "l_d_total",
    "lr",
    "wallclock_s",
    "val_mae",
    "val_mcd",
];

/// Independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Clip order within an epoch (indexed by epoch).
    Order = 1,
    /// Crop offsets (indexed by step).
    Segment = 2,
    /// Mel masks (indexed by step).
    Mask = 3,
    GeneratorInit = 4,
    DiscriminatorInit = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream as u64) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, index))
}

/// One training batch. `mel` is `[N, n_mels, T]`, `wave` is `[N, T·hop]`,
/// item `i` of each is the same crop.
#[derive(Debug, Clone)]
pub struct Batch {
    pub mel: Tensor,
    pub masked_mel: Option<Tensor>,
    pub wave: Tensor,
    pub clip_ids: Vec<String>,
    pub offsets: Vec<usize>,
    pub padded_samples: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }
}

// Clips are cached in memory up to this many samples in total.
const CACHE_LIMIT_SAMPLES: usize = 64 << 20;

/// Turns a step index into a batch.
///
/// Clips are consumed from an endless sequence of per-epoch shuffles, `N`
/// per step; an epoch ends after every training clip was used once.
#[derive(Debug)]
pub struct DataPipeline {
    entries: Vec<ClipEntry>,
    extractor: MelExtractor,
    cfg: TrainConfig,
    cache: HashMap<String, WaveformClip>,
    cached_samples: usize,
    orders: Option<(u64, Vec<usize>)>,
}

impl DataPipeline {
    pub fn new(entries: Vec<ClipEntry>, cfg: &TrainConfig) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Load("no training clips".into()));
        }
        let mut entries = entries;
        entries.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        Ok(Self {
            entries,
            extractor: MelExtractor::new(&cfg.feature)?,
            cfg: cfg.clone(),
            cache: HashMap::new(),
            cached_samples: 0,
            orders: None,
        })
    }

    pub fn entries(&self) -> &[ClipEntry] {
        &self.entries
    }

    pub fn extractor(&self) -> &MelExtractor {
        &self.extractor
    }

    /// Epoch in progress at the start of `step` (0-based).
    pub fn epoch_of(&self, step: u64) -> u64 {
        step * self.cfg.batch_size as u64 / self.entries.len() as u64
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.orders.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.entries.len()).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, Stream::Order, epoch));
            self.orders = Some((epoch, order));
        }
        &self.orders.as_ref().expect("just set").1
    }

    /// Indices into [`Self::entries`] used by `step`.
    pub fn clip_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.entries.len() as u64;
        let start = step * self.cfg.batch_size as u64;
        (start..start + self.cfg.batch_size as u64)
            .map(|pos| self.epoch_order(pos / n)[(pos % n) as usize])
            .collect()
    }

    fn clip(&mut self, index: usize) -> Result<WaveformClip> {
        let entry = &self.entries[index];
        if let Some(c) = self.cache.get(&entry.clip_id) {
            return Ok(c.clone());
        }
        let clip = read_entry(entry)?;
        if self.cached_samples + clip.len() <= CACHE_LIMIT_SAMPLES {
            self.cached_samples += clip.len();
            self.cache.insert(entry.clip_id.clone(), clip.clone());
        }
        Ok(clip)
    }

    pub fn batch(&mut self, step: u64) -> Result<Batch> {
        let indices = self.clip_indices(step);
        let mut seg_rng = stream_rng(self.cfg.seed, Stream::Segment, step);
        let mut mask_rng = stream_rng(self.cfg.seed, Stream::Mask, step);
        let with_masks = self.cfg.loss_weights.cl_mode == ClMode::MelMel;
        let floor = self.cfg.feature.log_floor_value();
        let n = indices.len();
        let (n_mels, frames) = (self.cfg.feature.n_mels, self.cfg.feature.segment_frames());
        let mut mel = Vec::with_capacity(n * n_mels * frames);
        let mut masked = Vec::new();
        let mut wave = Vec::with_capacity(n * self.cfg.feature.segment_samples);
        let mut clip_ids = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n);
        let mut padded_samples = 0;
        for idx in indices {
            let clip = self.clip(idx)?;
            let seg = sample_segment(&clip, &self.extractor, &mut seg_rng)?;
            if with_masks {
                let (m, _) = mask_mel(&seg.mel, &self.cfg.mask_spec, floor, &mut mask_rng)?;
                masked.extend(m.values.iter().copied());
            }
            mel.extend(seg.mel.values.iter().copied());
            wave.extend_from_slice(&seg.wave.samples);
            clip_ids.push(seg.wave.clip_id);
            offsets.push(seg.wave.offset_samples);
            padded_samples += seg.padded_samples;
        }
        let dev = Device::Cpu;
        Ok(Batch {
            mel: Tensor::from_vec(mel, (n, n_mels, frames), &dev)?,
            masked_mel: if with_masks {
                Some(Tensor::from_vec(masked, (n, n_mels, frames), &dev)?)
            } else {
                None
            },
            wave: Tensor::from_vec(wave, (n, self.cfg.feature.segment_samples), &dev)?,
            clip_ids,
            offsets,
            padded_samples,
        })
    }
}

/// The validation split a config asks for.
pub fn split_spec(cfg: &TrainConfig) -> SplitSpec {
    match &cfg.split_file {
        Some(p) => SplitSpec::File(p.clone()),
        None => SplitSpec::LastSorted(cfg.validation_count),
    }
}

/// Held-out metrics at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub mae: f64,
    pub mcd_db: f64,
    pub n_clips: usize,
}

/// Everything that evolves during training. Random streams are derived from
/// `(seed, step)`, so the step counter is the whole rng state.
#[derive(Debug)]
pub struct TrainState {
    pub step: u64,
    pub generator: Generator,
    pub bank: DiscriminatorBank,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    pub best_validation: Option<ValidationRecord>,
}

fn adam_params(cfg: &TrainConfig) -> AdamWParams {
    AdamWParams {
        lr: cfg.learning_rate,
        beta1: cfg.adam_betas[0],
        beta2: cfg.adam_betas[1],
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dev = Device::Cpu;
        let generator = Generator::new(
            &cfg.generator,
            &cfg.feature,
            &cfg.contrastive,
            stream_seed(cfg.seed, Stream::GeneratorInit, 0),
            &dev,
        )?;
        let bank = DiscriminatorBank::new(
            &cfg.discriminators,
            &cfg.contrastive,
            stream_seed(cfg.seed, Stream::DiscriminatorInit, 0),
            &dev,
        )?;
        let opt_g = AdamW::new(generator.params(), adam_params(cfg))?;
        let opt_d = AdamW::new(bank.params(), adam_params(cfg))?;
        Ok(Self {
            step: 0,
            generator,
            bank,
            opt_g,
            opt_d,
            best_validation: None,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt_g.set_learning_rate(lr);
        self.opt_d.set_learning_rate(lr);
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (prefix, store) in [("gen", self.generator.params()), ("disc", self.bank.params())] {
            for (name, var) in store.named() {
                tensors.insert(format!("{prefix}.{name}"), var.as_tensor().clone());
            }
        }
        let mut extra = BTreeMap::new();
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            let (moments, steps) = opt.export();
            for (k, t) in moments {
                tensors.insert(format!("{prefix}.{k}"), t);
            }
            extra.insert(format!("{prefix}_steps"), serde_json::to_string(&steps)?);
        }
        extra.insert("best_validation".into(), serde_json::to_string(&self.best_validation)?);
        extra.insert("generator_digest".into(), self.generator.params().digest()?);
        extra.insert("discriminator_digest".into(), self.bank.params().digest()?);
        Ok(Checkpoint {
            config: cfg.clone(),
            step: self.step,
            tensors,
            extra,
        })
    }

    /// Rebuilds a state from `ck`, which must have been written by a run
    /// with a resume-compatible config.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        if !cfg.resume_compatible(&ck.config) {
            return Err(Error::Config(
                "checkpoint was written with an incompatible config; only paths, total_steps, \
                 checkpoint_every, validate_every and record_wallclock may differ when resuming"
                    .into(),
            ));
        }
        let mut state = Self::init(cfg)?;
        state.generator.params().load(&ck.group("gen"))?;
        state.bank.params().load(&ck.group("disc"))?;
        for (prefix, opt) in [("opt_g", &mut state.opt_g), ("opt_d", &mut state.opt_d)] {
            let steps: BTreeMap<String, u64> = serde_json::from_str(
                ck.extra
                    .get(&format!("{prefix}_steps"))
                    .ok_or_else(|| Error::Checkpoint(format!("{prefix} step counts missing")))?,
            )?;
            opt.import(&ck.group(prefix), &steps)?;
        }
        state.best_validation = match ck.extra.get("best_validation") {
            Some(s) => serde_json::from_str(s)?,
            None => None,
        };
        state.step = ck.step;
        Ok(state)
    }
}

/// Rebuilds only the generator from a checkpoint (for synthesis and eval).
pub fn generator_from_checkpoint(ck: &Checkpoint) -> Result<Generator> {
    let cfg = &ck.config;
    let g = Generator::new(&cfg.generator, &cfg.feature, &cfg.contrastive, 0, &Device::Cpu)?;
    g.params().load(&ck.group("gen"))?;
    Ok(g)
}

/// The generator's output on a batch, shared by both phases of a step.
#[derive(Debug, Clone)]
pub struct Generated {
    pub fake: Tensor,
    /// Mel-encoder features of the batch's mels.
    pub mel_features: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorPhase {
    pub l_adv_d: f64,
    pub l_cl_disc: f64,
    pub l_d_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPhase {
    pub l_adv_g: f64,
    pub l_fm: f64,
    pub l_mel: f64,
    pub l_cl: f64,
    pub l_cl_components: Vec<f64>,
    pub l_g_total: f64,
}

fn checked(term: &str, step: u64, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            term: term.into(),
            step,
            value: v,
        });
    }
    Ok(v)
}

fn scores(outs: &[DiscOutput]) -> Vec<Tensor> {
    outs.iter().map(|o| o.scores.clone()).collect()
}

/// Runs training steps for one config.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    diff_mel: DiffMel,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            diff_mel: DiffMel::new(&cfg.feature, DType::F32, &Device::Cpu)?,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generate(&self, state: &TrainState, batch: &Batch) -> Result<Generated> {
        let (fake, mel_features) = state.generator.forward_with_features(&batch.mel)?;
        Ok(Generated { fake, mel_features })
    }

    /// Discriminator update: adversarial loss on real vs detached fake, plus
    /// the cross-modal term when it is routed to the discriminators. Mel
    /// embeddings are detached, so no generator parameter gets a gradient.
    pub fn discriminator_phase(&self, state: &mut TrainState, batch: &Batch, gen: &Generated) -> Result<DiscriminatorPhase> {
        let (out, total) = self.discriminator_objective(state, batch, gen)?;
        state.opt_d.step(&total.backward()?)?;
        Ok(out)
    }

    /// The discriminator loss and its logged values, without stepping.
    pub fn discriminator_objective(&self, state: &TrainState, batch: &Batch, gen: &Generated) -> Result<(DiscriminatorPhase, Tensor)> {
        let step = state.step + 1;
        let w = &self.cfg.loss_weights;
        let real = state.bank.forward(&batch.wave)?;
        let fake = state.bank.forward(&gen.fake.detach())?;
        let l_adv = discriminator_adversarial_loss(&scores(&real), &scores(&fake))?;
        let l_cl = if w.i_disc() && w.discriminator_cl_weight() != 0.0 {
            let mel_emb = state
                .generator
                .mel_head
                .project(&gen.mel_features.detach(), Modality::Mel)?
                .detach();
            let waves: Vec<Tensor> = state
                .bank
                .embed_outputs(&real)?
                .into_iter()
                .map(|e| e.vectors)
                .collect();
            Some(mel_wave_infonce_multi(&mel_emb.vectors, &waves, &self.cfg.contrastive)?.0)
        } else {
            None
        };
        let total = compose_discriminator_loss(&l_adv, l_cl.as_ref(), w)?;
        let out = DiscriminatorPhase {
            l_adv_d: checked("l_adv_d", step, &l_adv)?,
            l_cl_disc: match &l_cl {
                Some(t) => checked("l_cl_disc", step, t)?,
                None => 0.0,
            },
            l_d_total: checked("l_d_total", step, &total)?,
        };
        Ok((out, total))
    }

    /// Generator update: adversarial, feature-matching and mel terms plus
    /// the contrastive term on the mel side. Real-wave discriminator outputs
    /// are detached; only generator parameters are stepped.
    pub fn generator_phase(&self, state: &mut TrainState, batch: &Batch, gen: &Generated) -> Result<GeneratorPhase> {
        let (out, total) = self.generator_objective(state, batch, gen)?;
        state.opt_g.step(&total.backward()?)?;
        Ok(out)
    }

    /// The generator loss and its logged values, without stepping.
    pub fn generator_objective(&self, state: &TrainState, batch: &Batch, gen: &Generated) -> Result<(GeneratorPhase, Tensor)> {
        let step = state.step + 1;
        let w = &self.cfg.loss_weights;
        let fake = state.bank.forward(&gen.fake)?;
        let real = state.bank.forward(&batch.wave)?;
        let real_features: Vec<Vec<Tensor>> = real
            .iter()
            .map(|o| o.features.iter().map(|f| f.detach()).collect())
            .collect();
        let fake_features: Vec<Vec<Tensor>> = fake.iter().map(|o| o.features.clone()).collect();
        let l_adv = generator_adversarial_loss(&scores(&fake))?;
        let l_fm = feature_matching_loss(&real_features, &fake_features)?;
        let l_mel = self.diff_mel.reconstruction_loss(&batch.wave, &gen.fake)?;

        let mut components = Vec::new();
        let l_cl = match w.cl_mode {
            ClMode::None => None,
            ClMode::MelMel => {
                let masked = batch
                    .masked_mel
                    .as_ref()
                    .ok_or_else(|| Error::Shape("mel_mel mode needs masked mels in the batch".into()))?;
                let orig = state.generator.mel_head.project(&gen.mel_features, Modality::Mel)?;
                let view = state.generator.embed_mel(masked)?;
                Some(mel_mel_infonce(&orig.vectors, &view.vectors, &self.cfg.contrastive)?)
            }
            ClMode::MelWave => {
                let mel_emb = state.generator.mel_head.project(&gen.mel_features, Modality::Mel)?;
                let waves: Vec<Tensor> = state
                    .bank
                    .embed_outputs(&real)?
                    .into_iter()
                    .map(|e| e.vectors.detach())
                    .collect();
                let (total, parts) = mel_wave_infonce_multi(&mel_emb.vectors, &waves, &self.cfg.contrastive)?;
                components = parts.iter().map(scalar).collect::<Result<_>>()?;
                Some(total)
            }
        };
        let total = compose_generator_loss(&l_adv, &l_fm, &l_mel, l_cl.as_ref(), w)?;
        let out = GeneratorPhase {
            l_adv_g: checked("l_adv_g", step, &l_adv)?,
            l_fm: checked("l_fm", step, &l_fm)?,
            l_mel: checked("l_mel", step, &l_mel)?,
            l_cl: match &l_cl {
                Some(t) => checked("l_cl", step, t)?,
                None => 0.0,
            },
            l_cl_components: components,
            l_g_total: checked("l_g_total", step, &total)?,
        };
        Ok((out, total))
    }

    /// One discriminator update then one generator update; advances the
    /// step counter.
    pub fn train_step(&self, state: &mut TrainState, batch: &Batch) -> Result<LossBreakdown> {
        if batch.len() != self.cfg.batch_size {
            return Err(Error::Shape(format!(
                "batch has {} items, config says {}",
                batch.len(),
                self.cfg.batch_size
            )));
        }
        let gen = self.generate(state, batch)?;
        let d = self.discriminator_phase(state, batch, &gen)?;
        let g = self.generator_phase(state, batch, &gen)?;
        state.step += 1;
        Ok(LossBreakdown {
            step: state.step,
            l_adv_g: g.l_adv_g,
            l_adv_d: d.l_adv_d,
            l_fm: g.l_fm,
            l_mel: g.l_mel,
            l_cl: g.l_cl,
            l_cl_disc: d.l_cl_disc,
            l_cl_components: g.l_cl_components,
            l_g_total: g.l_g_total,
            l_d_total: d.l_d_total,
        })
    }
}

/// Vocodes every validation clip from its own mel and scores it.
pub fn validate(
    generator: &Generator,
    entries: &[ClipEntry],
    extractor: &MelExtractor,
    step: u64,
) -> Result<(ValidationRecord, EvalReport)> {
    let (report, _) = evaluate_entries(entries, &Candidate::Vocoder(generator), extractor, &EvalOptions::default())?;
    Ok((
        ValidationRecord {
            step,
            mae: report.mae.mean,
            mcd_db: report.mcd_db.mean,
            n_clips: report.rows.len(),
        },
        report,
    ))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn train_row(b: &LossBreakdown, lr: f64, wallclock: f64) -> Vec<String> {
    vec![
        "train".into(),
        b.step.to_string(),
        fmt(b.l_adv_g),
        fmt(b.l_adv_d),
        fmt(b.l_fm),
        fmt(b.l_mel),
        fmt(b.l_cl),
        fmt(b.l_cl_disc),
        fmt(b.l_g_total),
        fmt(b.l_d_total),
        fmt(lr),
        fmt(wallclock),
        String::new(),
        String::new(),
    ]
}

fn validation_row(v: &ValidationRecord) -> Vec<String> {
    let mut row = vec![String::new(); METRICS_HEADER.len()];
    row[0] = "validation".into();
    row[1] = v.step.to_string();
    row[12] = fmt(v.mae);
    row[13] = fmt(v.mcd_db);
    row
}

/// Parsed metrics file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub train: Vec<LossBreakdown>,
    pub lr: Vec<f64>,
    pub validation: Vec<ValidationRecord>,
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut log = MetricsLog::default();
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Load(format!("{}: bad number `{s}`", path.display())))
    };
    for rec in r.records() {
        let rec = rec?;
        let step: u64 = rec[1]
            .parse()
            .map_err(|_| Error::Load(format!("{}: bad step `{}`", path.display(), &rec[1])))?;
        match &rec[0] {
            "train" => {
                log.train.push(LossBreakdown {
                    step,
                    l_adv_g: num(&rec[2])?,
                    l_adv_d: num(&rec[3])?,
                    l_fm: num(&rec[4])?,
                    l_mel: num(&rec[5])?,
                    l_cl: num(&rec[6])?,
                    l_cl_disc: num(&rec[7])?,
                    l_cl_components: Vec::new(),
                    l_g_total: num(&rec[8])?,
                    l_d_total: num(&rec[9])?,
                });
                log.lr.push(num(&rec[10])?);
            }
            "validation" => log.validation.push(ValidationRecord {
                step,
                mae: num(&rec[12])?,
                mcd_db: num(&rec[13])?,
                n_clips: 0,
            }),
            other => return Err(Error::Load(format!("{}: unknown row type `{other}`", path.display()))),
        }
    }
    Ok(log)
}

/// Keeps the header and every row of `path` whose step (second column) is at
/// most `max_step`; creates a header-only file when `path` is missing.
fn truncate_csv(path: &Path, header: &[&str], max_step: u64, step_col: usize) -> Result<()> {
    let mut kept = vec![header.join(",")];
    if path.exists() {
        let text = fs::read_to_string(path).at(path)?;
        for line in text.lines().skip(1) {
            let step = line.split(',').nth(step_col).and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s <= max_step) {
                kept.push(line.to_string());
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).at(path)
}

struct CsvAppender {
    file: fs::File,
    path: PathBuf,
}

impl CsvAppender {
    fn open(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().append(true).open(path).at(path)?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).at(&self.path)
    }
}

/// Optional observer called after every step, e.g. for progress output.
pub type StepHook<'a> = &'a mut dyn FnMut(&LossBreakdown, &TrainState);

/// Trains until `cfg.total_steps`, writing artifacts into `cfg.out_dir`:
/// the resolved config, the subset manifest, `metrics.csv`, `batches.csv`,
/// periodic `ckpt_<step>.bin` archives and the `latest` pointer.
///
/// On resume, rows logged after the checkpoint's step are dropped and the
/// run continues as if it had never stopped.
pub fn run_training(
    cfg: &TrainConfig,
    corpus: &AudioCorpus,
    resume: Option<&Path>,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainState> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out).at(out)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()).at(out.join(RESOLVED_CONFIG_FILE))?;

    let subset = select_subset(corpus, cfg.data_fraction, cfg.seed)?;
    write_manifest(&subset, &out.join(MANIFEST_FILE))?;
    let mut pipeline = DataPipeline::new(subset.train.clone(), cfg)?;
    let trainer = Trainer::new(cfg)?;

    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?, cfg)?,
        None => TrainState::init(cfg)?,
    };
    let metrics_path = out.join(METRICS_FILE);
    let batches_path = out.join(BATCHES_FILE);
    truncate_csv(&metrics_path, &METRICS_HEADER, state.step, 1)?;
    truncate_csv(&batches_path, &["step", "clip_id", "offset"], state.step, 0)?;
    let mut metrics = CsvAppender::open(&metrics_path)?;
    let mut batches = CsvAppender::open(&batches_path)?;

    let started = Instant::now();
    while state.step < cfg.total_steps {
        let lr = cfg.learning_rate * cfg.lr_decay_per_epoch.powi(pipeline.epoch_of(state.step) as i32);
        state.set_learning_rate(lr);
        let batch = pipeline.batch(state.step)?;
        let breakdown = match trainer.train_step(&mut state, &batch) {
            Ok(b) => b,
            Err(e) => {
                if let Error::NonFinite { term, step, value } = &e {
                    let dump = serde_json::json!({
                        "term": term,
                        "step": step,
                        "value": value.to_string(),
                        "clip_ids": batch.clip_ids,
                        "offsets": batch.offsets,
                    });
                    let p = out.join(ABORT_FILE);
                    fs::write(&p, serde_json::to_string_pretty(&dump)?).at(&p)?;
                }
                return Err(e);
            }
        };
        let wallclock = if cfg.record_wallclock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        metrics.row(&train_row(&breakdown, lr, wallclock))?;
        for (id, off) in batch.clip_ids.iter().zip(&batch.offsets) {
            batches.row(&[state.step.to_string(), id.clone(), off.to_string()])?;
        }
        if state.step % cfg.validate_every == 0 && !corpus.validation.is_empty() {
            let (record, _) = validate(&state.generator, &corpus.validation, pipeline.extractor(), state.step)?;
            metrics.row(&validation_row(&record))?;
            if state.best_validation.is_none_or(|b| record.mae < b.mae) {
                state.best_validation = Some(record);
            }
        }
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.total_steps {
            save_checkpoint(&state, cfg)?;
        }
        if let Some(h) = hook.as_mut() {
            h(&breakdown, &state);
        }
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig) -> Result<PathBuf> {
    let name = checkpoint_name(state.step);
    let path = cfg.out_dir.join(&name);
    state.to_checkpoint(cfg)?.save(&path)?;
    write_latest(&cfg.out_dir, &name)?;
    Ok(path)
}
