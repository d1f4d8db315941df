//! Two-stage optimization: pretraining on the perceptual and scaled
//! log-spectral losses, then adversarial fine-tuning against the multi-scale
//! discriminators.
//!
//! Every step draws its data from a PRNG seeded by `(seed, step)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted one.

mod config;
mod data;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{lr_at, Stage, TrainConfig};
pub use data::{crop_pair, MemorySource, PairSource, SimulatedSource, TrainPair};

use crate::adversary::{feature_matching, lsgan_d_loss, lsgan_g_loss, split_outputs, AdversaryError, DiscriminatorBank};
use crate::degrade::{stream_rng, DegradeError};
use crate::nn::{clip_global_norm, load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Checkpoint, Graph, NnError, Tensor, Var};
use crate::objectives::{
    generator_loss, perceptual_loss, pretrain_loss, resample_var, scaled_log_loss, synthesize, GeneratorTerms, LogMel,
    LossError, LossReport, PERCEPTUAL_RATE,
};
use crate::restormer::{utterance_scale, ChunkNormalizer, Mode, Model, ModelError};
use crate::sfi_stft::{
    required_output_bins, resample, stft_with, ComplexSpectrogram, PadMode, SfiError, StftParams, Waveform,
};
use crate::wav::WavError;

/// Per-step data streams start here, clear of the simulator's streams.
const TRAIN_STREAM_BASE: u64 = 1 << 40;
/// Offset between the generator and discriminator initialization seeds.
pub const DISC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training data can serve this step: {0}")]
    DataExhausted(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("evaluation data in a training run: {0}")]
    EvalManifest(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Stft(#[from] SfiError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.to_path_buf(), msg: e.to_string() }
}

/// Scalars logged after every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub stage: Stage,
    pub f_d: u32,
    pub lr: f64,
    /// Generator objective before the update.
    pub loss: LossReport,
    /// Discriminator loss before its last update.
    pub disc_loss: Option<f64>,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogRow {
    step: u64,
    stage: Stage,
    f_d: u32,
    lr: f64,
    total: f64,
    perceptual: f64,
    spectral: f64,
    adversarial: f64,
    feature_matching: f64,
    human_feedback: f64,
    disc: Option<f64>,
    grad_norm: f64,
}

impl From<&StepReport> for LogRow {
    fn from(r: &StepReport) -> Self {
        Self {
            step: r.step,
            stage: r.stage,
            f_d: r.f_d,
            lr: r.lr,
            total: r.loss.total,
            perceptual: r.loss.perceptual,
            spectral: r.loss.spectral,
            adversarial: r.loss.adversarial,
            feature_matching: r.loss.feature_matching,
            human_feedback: r.loss.human_feedback,
            disc: r.disc_loss,
            grad_norm: r.grad_norm,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<StepReport>,
}

/// One pair after normalization and analysis.
struct Prepared {
    id: String,
    f_d: u32,
    x: Tensor,
    f_d_bins: usize,
    p_d: StftParams,
    target: Waveform,
    target_spec: ComplexSpectrogram,
    target_16k: Waveform,
}

type Grads = Vec<(String, Vec<f64>)>;

fn accumulate(acc: &mut Option<Grads>, grads: Grads, weight: f64) {
    match acc {
        None => *acc = Some(grads.into_iter().map(|(n, g)| (n, g.into_iter().map(|v| v * weight).collect())).collect()),
        Some(a) => {
            for ((_, dst), (_, src)) in a.iter_mut().zip(grads) {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s * weight);
            }
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.total += r.total / n;
        m.perceptual += r.perceptual / n;
        m.spectral += r.spectral / n;
        m.adversarial += r.adversarial / n;
        m.feature_matching += r.feature_matching / n;
        m.human_feedback += r.human_feedback / n;
    }
    m
}

fn adamw(betas: [f64; 2], weight_decay: f64) -> AdamW {
    AdamW::new(AdamWConfig { beta1: betas[0], beta2: betas[1], weight_decay, ..AdamWConfig::default() })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub disc: DiscriminatorBank,
    pub gen_opt: AdamW,
    pub disc_opt: AdamW,
    /// Completed generator updates.
    pub step: u64,
    extractor: LogMel,
    dump_dir: Option<PathBuf>,
}

impl Trainer {
    /// Fresh generator and discriminators initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::build(cfg.model.clone(), cfg.seed)?;
        let disc = DiscriminatorBank::build(cfg.disc.clone(), cfg.seed.wrapping_add(DISC_SEED_OFFSET))?;
        Self::from_parts(cfg, model, disc)
    }

    /// Starts a run from existing networks, e.g. a pretrained generator.
    pub fn from_parts(mut cfg: TrainConfig, model: Model, disc: DiscriminatorBank) -> Result<Self> {
        cfg.model = model.cfg.clone();
        cfg.disc = disc.cfg.clone();
        cfg.validate()?;
        Ok(Self {
            gen_opt: adamw(cfg.gen_betas, cfg.weight_decay),
            disc_opt: adamw(cfg.disc_betas, cfg.weight_decay),
            cfg,
            model,
            disc,
            step: 0,
            extractor: LogMel::new(),
            dump_dir: None,
        })
    }

    /// Draws the batch for update number `step`.
    pub fn sample_batch(&self, source: &mut dyn PairSource, step: u64) -> Result<Vec<TrainPair>> {
        let mut rng = stream_rng(self.cfg.seed, TRAIN_STREAM_BASE + step);
        let mut rates = self.cfg.target_rates.clone();
        rates.shuffle(&mut rng);
        for &f_d in &rates {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size {
                let Some(pair) = source.draw(f_d, &mut rng)? else { break };
                let Some(c) = crop_pair(&pair, self.cfg.segment_seconds, &mut rng)? else { break };
                batch.push(c);
            }
            if batch.len() == self.cfg.batch_size {
                return Ok(batch);
            }
        }
        Err(TrainError::DataExhausted(format!("no {} pairs at any of {:?} Hz", self.cfg.batch_size, rates)))
    }

    fn prepare(&self, pair: &TrainPair) -> Result<Prepared> {
        let (f_e, f_d) = (pair.input.sample_rate, pair.target.sample_rate);
        Model::check_rates(f_e, f_d)?;
        let p_e = StftParams::for_rate(f_e)?;
        let p_d = StftParams::for_rate(f_d)?;
        if pair.input.is_empty() {
            return Err(SfiError::EmptySignal.into());
        }
        let t = p_e.n_frames(pair.input.len());
        let mut x = pair.input.samples.clone();
        let mut s = pair.target.samples.clone();
        x.resize(t * p_e.hop, 0.0);
        s.resize(t * p_d.hop, 0.0);
        // the same normalization the model sees at inference
        let pad = match self.model.cfg.mode {
            Mode::Offline => {
                let scale = utterance_scale(&x);
                x.iter_mut().chain(s.iter_mut()).for_each(|v| *v /= scale);
                PadMode::Reflect
            }
            Mode::Streaming => {
                let mut norm = ChunkNormalizer::new(f_e);
                for (cx, cs) in x.chunks_mut(p_e.hop).zip(s.chunks_mut(p_d.hop)) {
                    let gain = norm.push(cx);
                    cx.iter_mut().chain(cs.iter_mut()).for_each(|v| *v *= gain);
                }
                PadMode::Zero
            }
        };
        let spec = stft_with(&Waveform::new(x, f_e), &p_e, pad)?;
        let target = Waveform::new(s, f_d);
        let target_spec = stft_with(&target, &p_d, pad)?;
        Ok(Prepared {
            id: pair.id.clone(),
            f_d,
            x: Tensor::new(vec![2, spec.n_bins(), spec.n_frames], spec.to_channels_first()),
            f_d_bins: required_output_bins(f_e, f_d, spec.n_bins())?,
            p_d,
            target_16k: resample(&target, PERCEPTUAL_RATE),
            target,
            target_spec,
        })
    }

    /// Restored waveform variable plus the spectral and perceptual terms.
    fn generator_terms(&self, g: &Graph, it: &Prepared) -> Result<(Var, Var, Var)> {
        let x = g.constant(it.x.clone());
        let y_spec = self.model.forward(g).forward(x, it.f_d_bins)?;
        let spectral = scaled_log_loss(g, y_spec, &it.target_spec, &self.cfg.loss.alpha)?;
        let y = synthesize(g, y_spec, it.p_d, it.target.len())?;
        let y16 = if it.f_d == PERCEPTUAL_RATE { y } else { resample_var(g, y, it.f_d, PERCEPTUAL_RATE)? };
        let perceptual = perceptual_loss(g, y16, &it.target_16k, &self.extractor)?;
        Ok((y, spectral, perceptual))
    }

    fn fake(&self, it: &Prepared) -> Result<Tensor> {
        let g = Graph::inference();
        let x = g.constant(it.x.clone());
        let y_spec = self.model.forward(&g).forward(x, it.f_d_bins)?;
        let y = synthesize(&g, y_spec, it.p_d, it.target.len())?;
        Ok((*g.value(y)).clone())
    }

    fn non_finite(&self, step: u64, items: &[Prepared], what: &str, report: &LossReport) -> TrainError {
        let detail = format!("{what}; ids {:?}; f_d {}", items.iter().map(|i| &i.id).collect::<Vec<_>>(), items[0].f_d);
        if let Some(dir) = &self.dump_dir {
            let dump = serde_json::json!({ "step": step, "detail": detail, "report": report, "lr": lr_at(step, &self.cfg) });
            let _ = fs::write(dir.join(format!("nonfinite_step_{step:08}.json")), dump.to_string());
        }
        TrainError::NonFiniteLoss { step, detail }
    }

    /// One pretraining update on a fixed batch.
    pub fn pretrain_step(&mut self, batch: &[TrainPair]) -> Result<StepReport> {
        let step = self.step + 1;
        let items = batch.iter().map(|p| self.prepare(p)).collect::<Result<Vec<_>>>()?;
        let mut acc = None;
        let mut reports = Vec::with_capacity(items.len());
        for it in &items {
            let g = Graph::new();
            let (_, spectral, perceptual) = self.generator_terms(&g, it)?;
            let (loss, rep) = pretrain_loss(&g, perceptual, spectral, &self.cfg.loss)?;
            accumulate(&mut acc, g.backward(loss)?.for_store(&self.model.params), 1.0 / items.len() as f64);
            reports.push(rep);
        }
        let report = mean_report(&reports);
        self.finish_generator_step(step, &items, acc, report, None)
    }

    fn finish_generator_step(
        &mut self,
        step: u64,
        items: &[Prepared],
        acc: Option<Grads>,
        report: LossReport,
        disc_loss: Option<f64>,
    ) -> Result<StepReport> {
        let mut grads = acc.unwrap_or_default();
        if !report.total.is_finite() {
            return Err(self.non_finite(step, items, "generator loss", &report));
        }
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.non_finite(step, items, "generator gradient", &report));
        }
        let lr = lr_at(step, &self.cfg);
        self.gen_opt.update(&mut self.model.params, &grads, lr);
        self.step = step;
        Ok(StepReport { step, stage: self.cfg.stage, f_d: items[0].f_d, lr, loss: report, disc_loss, grad_norm })
    }

    /// One discriminator update against fixed fakes; returns the loss before it.
    fn disc_update(&mut self, step: u64, items: &[Prepared], fakes: &[Tensor]) -> Result<f64> {
        let mut acc = None;
        let mut total = 0.0;
        for (it, fake) in items.iter().zip(fakes) {
            let g = Graph::new();
            let real = g.constant(Tensor::new(vec![it.target.len()], it.target.samples.clone()));
            let fake = g.constant(fake.clone());
            let (rs, _) = split_outputs(&self.disc.forward(&g, real, it.f_d)?);
            let (fs, _) = split_outputs(&self.disc.forward(&g, fake, it.f_d)?);
            let loss = lsgan_d_loss(&g, &rs, &fs)?;
            total += g.value(loss).item() / items.len() as f64;
            accumulate(&mut acc, g.backward(loss)?.for_store(&self.disc.params), 1.0 / items.len() as f64);
        }
        let mut grads = acc.unwrap_or_default();
        let norm = clip_global_norm(&mut grads, self.cfg.grad_clip);
        if !(total.is_finite() && norm.is_finite()) {
            let report = LossReport { total, ..LossReport::default() };
            return Err(self.non_finite(step, items, "discriminator loss", &report));
        }
        self.disc_opt.update(&mut self.disc.params, &grads, lr_at(step, &self.cfg));
        Ok(total)
    }

    /// One discriminator update with the generator frozen; returns the loss before it.
    pub fn disc_step(&mut self, batch: &[TrainPair]) -> Result<f64> {
        let items = batch.iter().map(|p| self.prepare(p)).collect::<Result<Vec<_>>>()?;
        let fakes = items.iter().map(|it| self.fake(it)).collect::<Result<Vec<_>>>()?;
        self.disc_update(self.step.max(1), &items, &fakes)
    }

    /// Discriminator updates followed by one generator update, on a fixed batch.
    pub fn adversarial_step(&mut self, batch: &[TrainPair]) -> Result<StepReport> {
        let step = self.step + 1;
        let items = batch.iter().map(|p| self.prepare(p)).collect::<Result<Vec<_>>>()?;
        let fakes = items.iter().map(|it| self.fake(it)).collect::<Result<Vec<_>>>()?;
        let mut disc_loss = 0.0;
        for _ in 0..self.cfg.disc_steps_per_gen {
            disc_loss = self.disc_update(step, &items, &fakes)?;
        }
        let mut acc = None;
        let mut reports = Vec::with_capacity(items.len());
        for it in &items {
            let g = Graph::new();
            let (y, spectral, perceptual) = self.generator_terms(&g, it)?;
            let real = g.constant(Tensor::new(vec![it.target.len()], it.target.samples.clone()));
            let (_, real_feats) = split_outputs(&self.disc.forward_frozen(&g, real, it.f_d)?);
            let (fake_scores, fake_feats) = split_outputs(&self.disc.forward_frozen(&g, y, it.f_d)?);
            let terms = GeneratorTerms {
                perceptual,
                spectral,
                adversarial: lsgan_g_loss(&g, &fake_scores)?,
                feature_matching: feature_matching(&g, &real_feats, &fake_feats)?,
                human_feedback: None,
            };
            let (loss, rep) = generator_loss(&g, &terms, &self.cfg.loss)?;
            accumulate(&mut acc, g.backward(loss)?.for_store(&self.model.params), 1.0 / items.len() as f64);
            reports.push(rep);
        }
        let report = mean_report(&reports);
        self.finish_generator_step(step, &items, acc, report, Some(disc_loss))
    }

    /// Draws the next batch and runs the configured stage on it.
    pub fn train_step(&mut self, source: &mut dyn PairSource) -> Result<StepReport> {
        let batch = self.sample_batch(source, self.step + 1)?;
        match self.cfg.stage {
            Stage::Pretrain => self.pretrain_step(&batch),
            Stage::Adversarial => self.adversarial_step(&batch),
        }
    }

    /// Writes `generator.ckpt`, `discriminator.ckpt` and `optimizer.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut gen = self.model.to_checkpoint();
        gen.meta["step"] = self.step.into();
        save_checkpoint(&dir.join("generator.ckpt"), &gen)?;
        save_checkpoint(&dir.join("discriminator.ckpt"), &self.disc.to_checkpoint())?;
        let mut tensors = Vec::new();
        for (tag, opt) in [("gen", &self.gen_opt), ("disc", &self.disc_opt)] {
            let mut names: Vec<&String> = opt.m.keys().collect();
            names.sort();
            for name in names {
                for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
                    let data = map[name].clone();
                    tensors.push((format!("{tag}.{kind}.{name}"), Tensor::new(vec![data.len()], data)));
                }
            }
        }
        let meta = serde_json::json!({
            "step": self.step,
            "gen_opt_step": self.gen_opt.step,
            "disc_opt_step": self.disc_opt.step,
            "train": self.cfg,
        });
        save_checkpoint(&dir.join("optimizer.ckpt"), &Checkpoint { tensors, meta })?;
        Ok(())
    }

    /// Restores a trainer written by [`save`](Self::save). `cfg` replaces the
    /// stored training config when given; network shapes must still match.
    pub fn load(dir: &Path, cfg: Option<TrainConfig>) -> Result<Self> {
        let opt = load_checkpoint(&dir.join("optimizer.ckpt"))?;
        let cfg = match cfg {
            Some(c) => c,
            None => serde_json::from_value(opt.meta["train"].clone())
                .map_err(|e| TrainError::Checkpoint(format!("stored training config: {e}")))?,
        };
        let model = Model::from_checkpoint(&load_checkpoint(&dir.join("generator.ckpt"))?, Some(cfg.model.clone()))?;
        let disc = DiscriminatorBank::from_checkpoint(&load_checkpoint(&dir.join("discriminator.ckpt"))?)?;
        let mut t = Self::from_parts(cfg, model, disc)?;
        let num = |k: &str| {
            opt.meta[k].as_u64().ok_or_else(|| TrainError::Checkpoint(format!("missing `{k}` in optimizer metadata")))
        };
        t.step = num("step")?;
        t.gen_opt.step = num("gen_opt_step")?;
        t.disc_opt.step = num("disc_opt_step")?;
        for (name, tensor) in opt.tensors {
            let mut parts = name.splitn(3, '.');
            let (tag, kind, param) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c.to_string()),
                _ => return Err(TrainError::Checkpoint(format!("unexpected optimizer entry `{name}`"))),
            };
            let o = match tag {
                "gen" => &mut t.gen_opt,
                "disc" => &mut t.disc_opt,
                _ => return Err(TrainError::Checkpoint(format!("unexpected optimizer entry `{name}`"))),
            };
            match kind {
                "m" => o.m.insert(param, tensor.data),
                "v" => o.v.insert(param, tensor.data),
                _ => return Err(TrainError::Checkpoint(format!("unexpected optimizer entry `{name}`"))),
            };
        }
        Ok(t)
    }

    /// Trains until `cfg.steps`, logging every step to `out_dir/log.csv` and
    /// checkpointing under `out_dir/checkpoints`. A fresh run first saves the
    /// initial state; a resumed run drops log rows past its step.
    pub fn run(&mut self, source: &mut dyn PairSource, out_dir: &Path) -> Result<RunSummary> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        self.dump_dir = Some(out_dir.to_path_buf());
        let log_path = out_dir.join("log.csv");
        let mut kept: Vec<LogRow> = Vec::new();
        if self.step > 0 && log_path.exists() {
            let mut r = csv::Reader::from_path(&log_path)?;
            for row in r.deserialize::<LogRow>() {
                let row = row?;
                if row.step <= self.step {
                    kept.push(row);
                }
            }
        }
        let mut log = csv::Writer::from_path(&log_path)?;
        for row in &kept {
            log.serialize(row)?;
        }
        log.flush().map_err(io_err(&log_path))?;

        let ckpt_dir = |s: u64| out_dir.join("checkpoints").join(format!("step_{s:08}"));
        let mut checkpoints = Vec::new();
        if self.step == 0 {
            self.save(&ckpt_dir(0))?;
            checkpoints.push(ckpt_dir(0));
        }
        let mut reports = Vec::new();
        while self.step < self.cfg.steps {
            let rep = self.train_step(source)?;
            log.serialize(LogRow::from(&rep))?;
            log.flush().map_err(io_err(&log_path))?;
            reports.push(rep);
            if self.step % self.cfg.checkpoint_every == 0 || self.step == self.cfg.steps {
                self.save(&ckpt_dir(self.step))?;
                checkpoints.push(ckpt_dir(self.step));
            }
        }
        Ok(RunSummary { final_step: self.step, checkpoints, reports })
    }
}
