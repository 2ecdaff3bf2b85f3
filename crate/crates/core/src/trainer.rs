//! Alternating critic/generator training, the posterior GAN loop, and the
//! ablation grid.

use std::borrow::Cow;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointKind, FORMAT_VERSION};
use crate::data::{sample_categorical, sample_noise, DatasetSpec, OverlapDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    adversarial_d, adversarial_g, compose_d, compose_g, gradient_penalty, kl_ac_loss, kl_cp_loss, pgan_losses,
    AdversarialMode, LossTerms, LossWeights,
};
use crate::models::{BoundNet, DiscClassifierNet, GeneratorNet, PGanNets, Parameters, Variant};
use crate::tensor::{lr_schedule, AdamConfig, AdamState, Graph, NamedRng, Tensor, Var};

fn default_width() -> usize {
    512
}

fn default_z_dim() -> usize {
    2
}

fn default_dropout_rates() -> [f64; 3] {
    [0.2, 0.5, 0.5]
}

fn default_eval_samples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub dataset: DatasetSpec,
    pub total_iters: u64,
    pub n_d: u32,
    pub d_batch_size: usize,
    pub g_batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_r: f64,
    pub lambda_g: f64,
    pub lambda_gp: f64,
    pub dropout: bool,
    #[serde(default = "default_dropout_rates")]
    pub dropout_rates: [f64; 3],
    pub k_shared: usize,
    pub kl_cp_start_iter: u64,
    pub lr_decay: bool,
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default)]
    pub adversarial: AdversarialMode,
    /// Iterations between evaluations; `None` means `total_iters / 50`,
    /// `Some(0)` disables evaluation.
    #[serde(default)]
    pub eval_every: Option<u64>,
    /// Iterations between checkpoints; `None` means `total_iters / 10`.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    /// Generated points per condition state at each evaluation.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    /// CP-GAN on the two-Gaussian toy with the WGAN-GP toy settings.
    fn default() -> Self {
        Self {
            variant: Variant::CpGan,
            dataset: DatasetSpec::TwoGaussianToy,
            total_iters: 100_000,
            n_d: 5,
            d_batch_size: 256,
            g_batch_size: 256,
            adam: AdamConfig::default(),
            lambda_r: 1.0,
            lambda_g: 1.0,
            lambda_gp: 0.1,
            dropout: true,
            dropout_rates: default_dropout_rates(),
            k_shared: 3,
            kl_cp_start_iter: 0,
            lr_decay: true,
            seed: 0,
            width: default_width(),
            z_dim: default_z_dim(),
            adversarial: AdversarialMode::Wgan,
            eval_every: None,
            checkpoint_every: None,
            eval_samples: default_eval_samples(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_r: self.lambda_r,
            lambda_g: self.lambda_g,
            lambda_gp: self.lambda_gp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_d < 1 {
            return bad("n_d must be at least 1".into());
        }
        if self.kl_cp_start_iter > self.total_iters {
            return bad(format!(
                "kl_cp_start_iter {} exceeds total_iters {}",
                self.kl_cp_start_iter, self.total_iters
            ));
        }
        if self.d_batch_size == 0 || self.g_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.width == 0 || self.z_dim == 0 {
            return bad("width and z_dim must be positive".into());
        }
        if self.k_shared > crate::models::HIDDEN_LAYERS {
            return bad(format!("k_shared must be in 0..=3, got {}", self.k_shared));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::DropoutRate(*r));
        }
        let a = &self.adam;
        if !(a.alpha > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid adam settings {a:?}"));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive".into());
        }
        self.weights().validate()?;
        self.dataset.build()?;
        Ok(())
    }

    pub fn eval_interval(&self) -> u64 {
        self.eval_every.unwrap_or((self.total_iters / 50).max(1))
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every.unwrap_or((self.total_iters / 10).max(1))
    }

    pub fn effective_dropout(&self) -> [f64; 3] {
        if self.dropout {
            self.dropout_rates
        } else {
            [0.0; 3]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub terms: LossTerms,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: u64,
    pub dma: f64,
    pub frechet: f64,
    pub mean_posterior_kl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub eval_rows: Vec<EvalRow>,
    pub generator_steps: u64,
    pub critic_steps: u64,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub flags: Vec<String>,
}

pub fn write_loss_csv<W: Write>(rows: &[LossRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,{},lr", LossTerms::CSV_HEADER)?;
    for r in rows {
        let vals: Vec<String> = r.terms.csv_fields().iter().map(f64::to_string).collect();
        writeln!(out, "{},{},{}", r.iteration, vals.join(","), r.lr)?;
    }
    Ok(())
}

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iteration,dma,frechet,mean_posterior_kl")?;
    for r in rows {
        let kl = r.mean_posterior_kl.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{kl}", r.iteration, r.dma, r.frechet)?;
    }
    Ok(())
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn gather_grads<'g>(g: &'g Graph, vars: &[Var]) -> Vec<Cow<'g, [f64]>> {
    vars.iter()
        .map(|&v| match g.grad(v) {
            Some(gr) => Cow::Borrowed(gr),
            None => Cow::Owned(vec![0.0; g.value(v).numel()]),
        })
        .collect()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn require_finite(terms: &LossTerms, iteration: u64) -> Result<()> {
    if terms.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("loss terms {terms:?}"),
            iteration: Some(iteration),
        })
    }
}

struct Streams {
    real: NamedRng,
    latent: NamedRng,
    dropout: NamedRng,
    penalty: NamedRng,
    eval: NamedRng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            real: NamedRng::new(seed, "real"),
            latent: NamedRng::new(seed, "latent"),
            dropout: NamedRng::new(seed, "dropout"),
            penalty: NamedRng::new(seed, "penalty"),
            eval: NamedRng::new(seed, "eval"),
        }
    }

    fn all(&self) -> [&NamedRng; 5] {
        [&self.real, &self.latent, &self.dropout, &self.penalty, &self.eval]
    }

    fn all_mut(&mut self) -> [&mut NamedRng; 5] {
        [
            &mut self.real,
            &mut self.latent,
            &mut self.dropout,
            &mut self.penalty,
            &mut self.eval,
        ]
    }
}

/// Owns the networks, optimizers and random streams of one GAN run.
pub struct Trainer {
    config: TrainConfig,
    dataset: OverlapDataset,
    pub generator: GeneratorNet,
    pub disc: DiscClassifierNet,
    adam_g: AdamState,
    adam_d: AdamState,
    rngs: Streams,
    iteration: u64,
    critic_steps: u64,
    loss_log: Vec<LossRow>,
    eval_rows: Vec<EvalRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dataset = config.dataset.build()?;
        let c = dataset.num_classes();
        let mut init = NamedRng::new(config.seed, "init");
        let generator = GeneratorNet::new(config.z_dim, c, config.width, crate::data::DATA_DIM, &mut init);
        let d_in = crate::data::DATA_DIM + if config.variant.conditions_critic() { c } else { 0 };
        let disc = DiscClassifierNet::new(
            d_in,
            c,
            config.width,
            config.k_shared,
            config.effective_dropout(),
            config.variant.has_classifier(),
            &mut init,
        )?;
        let adam_g = AdamState::new(config.adam, generator.named_params().into_iter().map(|(_, t)| t));
        let adam_d = AdamState::new(config.adam, disc.named_params().into_iter().map(|(_, t)| t));
        Ok(Self {
            rngs: Streams::new(config.seed),
            config,
            dataset,
            generator,
            disc,
            adam_g,
            adam_d,
            iteration: 0,
            critic_steps: 0,
            loss_log: Vec::new(),
            eval_rows: Vec::new(),
        })
    }

    /// Restores a trainer mid-run; continuing it matches an uninterrupted run
    /// bit for bit.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Gan {
            return Err(Error::Checkpoint("not a GAN checkpoint".into()));
        }
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut t = Self::new(config)?;
        ckpt.load_params(&mut t.generator)?;
        ckpt.load_params(&mut t.disc)?;
        t.adam_g = ckpt.load_adam("generator", &t.generator)?;
        t.adam_d = ckpt.load_adam("discriminator", &t.disc)?;
        for r in t.rngs.all_mut() {
            ckpt.restore_rng(r)?;
        }
        t.iteration = ckpt.iteration;
        t.critic_steps = ckpt.critic_steps;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut layers = checkpoint::layer_records(&self.generator);
        layers.extend(checkpoint::layer_records(&self.disc));
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Gan,
            variant: Some(self.config.variant),
            iteration: self.iteration,
            critic_steps: self.critic_steps,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            layers,
            adam_state: vec![
                checkpoint::adam_record("generator", &self.generator, &self.adam_g),
                checkpoint::adam_record("discriminator", &self.disc, &self.adam_d),
            ],
            rng_stream_positions: checkpoint::rng_positions(self.rngs.all()),
            flags: Vec::new(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn dataset(&self) -> &OverlapDataset {
        &self.dataset
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn critic_steps(&self) -> u64 {
        self.critic_steps
    }

    pub fn loss_log(&self) -> &[LossRow] {
        &self.loss_log
    }

    pub fn eval_rows(&self) -> &[EvalRow] {
        &self.eval_rows
    }

    pub fn current_lr(&self) -> Result<f64> {
        if self.config.lr_decay {
            lr_schedule(self.iteration, self.config.adam.alpha, self.config.total_iters)
        } else {
            Ok(self.config.adam.alpha)
        }
    }

    fn critic_input(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if self.config.variant.conditions_critic() {
            Tensor::hcat(&[x, cond])
        } else {
            Ok(x.clone())
        }
    }

    /// Generator conditions for `n` samples: classifier posteriors of a fresh
    /// real batch (CP-GAN, eval-mode classifier) or the one-hot labels of a
    /// fresh real batch.
    fn draw_conditions(&mut self, n: usize) -> Result<Tensor> {
        let batch = self.dataset.sample_batch(n, &mut self.rngs.real)?;
        match self.config.variant {
            Variant::CpGan => self.disc.classify(&batch.points),
            Variant::AcGan | Variant::CganConcat => Ok(batch.labels),
        }
    }

    /// One discriminator/classifier update.
    pub fn d_step(&mut self, lr: f64) -> Result<LossTerms> {
        let variant = self.config.variant;
        let n = self.config.d_batch_size;
        let real = self.dataset.sample_batch(n, &mut self.rngs.real)?;
        let cond = match variant {
            Variant::CpGan => self.draw_conditions(n)?,
            // fake labels reuse the real batch's labels so the penalty
            // interpolates samples under a shared condition
            Variant::AcGan | Variant::CganConcat => real.labels.clone(),
        };
        let z = sample_noise(n, self.config.z_dim, &mut self.rngs.latent);
        let x_fake = self.generator.generate(&z, &cond)?;

        let real_in = self.critic_input(&real.points, &real.labels)?;
        let fake_in = self.critic_input(&x_fake, &cond)?;
        let disc = &self.disc;
        let mode = self.config.adversarial;
        let concat = variant.conditions_critic();
        let mut g = Graph::new();
        let bound = disc.bind(&mut g, true);
        let mut drop = self.config.dropout.then_some(&mut self.rngs.dropout);
        let real_in = g.constant(real_in);
        let out_r = disc.forward(&mut g, &bound, real_in, drop.as_deref_mut(), variant.has_classifier())?;
        let fake_in = g.constant(fake_in);
        let score_f = disc.critic(&mut g, &bound, fake_in, drop.as_deref_mut())?;
        let gan_d = adversarial_d(&mut g, out_r.score, score_f, mode)?;
        let ac_r = match out_r.logits {
            Some(l) => {
                let ls = g.log_softmax(l);
                Some(kl_ac_loss(&mut g, ls, &real.labels)?)
            }
            None => None,
        };
        let gp = if self.config.lambda_gp > 0.0 {
            let labels = concat.then(|| real.labels.clone());
            Some(gradient_penalty(
                &mut g,
                &[&real.points],
                &[&x_fake],
                &mut self.rngs.penalty,
                |g, xs| {
                    let input = match &labels {
                        Some(y) => {
                            let yv = g.constant(y.clone());
                            g.concat(&[xs[0], yv], 1)?
                        }
                        None => xs[0],
                    };
                    disc.critic(g, &bound, input, drop.as_deref_mut())
                },
            )?)
        } else {
            None
        };
        let loss = compose_d(&mut g, variant, gan_d, ac_r, gp, &self.config.weights())?;
        let terms = LossTerms {
            gan_d: scalar(&g, gan_d),
            ac_r: ac_r.map_or(0.0, |v| scalar(&g, v)),
            gp: gp.map_or(0.0, |v| scalar(&g, v)),
            composite_d: scalar(&g, loss),
            ..LossTerms::default()
        };
        require_finite(&terms, self.iteration)?;
        g.backward(loss)?;
        let vars = bound.vars();
        let grads = gather_grads(&g, &vars);
        let refs: Vec<&[f64]> = grads.iter().map(|c| c.as_ref()).collect();
        self.adam_d.step(&mut self.disc.params_mut(), &refs, lr)?;
        self.critic_steps += 1;
        Ok(terms)
    }

    /// Whether the generator-side classifier term is active this iteration.
    pub fn classifier_term_active(&self) -> bool {
        match self.config.variant {
            Variant::AcGan => true,
            Variant::CpGan => self.iteration >= self.config.kl_cp_start_iter,
            Variant::CganConcat => false,
        }
    }

    /// One generator update with the discriminator/classifier frozen.
    pub fn g_step(&mut self, lr: f64) -> Result<LossTerms> {
        let variant = self.config.variant;
        let n = self.config.g_batch_size;
        let cond = self.draw_conditions(n)?;
        let z = sample_noise(n, self.config.z_dim, &mut self.rngs.latent);
        let cls_active = self.classifier_term_active();

        let mut g = Graph::new();
        let bg = self.generator.bind(&mut g, true);
        let bd = self.disc.bind(&mut g, false);
        let zv = g.constant(z);
        let cv = g.constant(cond.clone());
        let x = self.generator.forward(&mut g, &bg, zv, cv)?;
        let input = if variant.conditions_critic() {
            g.concat(&[x, cv], 1)?
        } else {
            x
        };
        let drop = self.config.dropout.then_some(&mut self.rngs.dropout);
        let out = self.disc.forward(&mut g, &bd, input, drop, cls_active)?;
        let gan_g = adversarial_g(&mut g, out.score, self.config.adversarial)?;
        let cls = match (cls_active, out.logits) {
            (true, Some(l)) => {
                let ls = g.log_softmax(l);
                Some(match variant {
                    Variant::CpGan => kl_cp_loss(&mut g, &cond, ls)?,
                    _ => kl_ac_loss(&mut g, ls, &cond)?,
                })
            }
            _ => None,
        };
        let loss = compose_g(&mut g, variant, gan_g, cls, &self.config.weights())?;
        let terms = LossTerms {
            gan_g: scalar(&g, gan_g),
            cls_g: cls.map_or(0.0, |v| scalar(&g, v)),
            composite_g: scalar(&g, loss),
            ..LossTerms::default()
        };
        require_finite(&terms, self.iteration)?;
        g.backward(loss)?;
        let vars = bg.vars();
        let grads = gather_grads(&g, &vars);
        let refs: Vec<&[f64]> = grads.iter().map(|c| c.as_ref()).collect();
        self.adam_g.step(&mut self.generator.params_mut(), &refs, lr)?;
        Ok(terms)
    }

    /// `n_D` critic updates followed by one generator update.
    pub fn step(&mut self) -> Result<LossTerms> {
        let lr = self.current_lr()?;
        let mut d_terms = LossTerms::default();
        for _ in 0..self.config.n_d {
            d_terms = self.d_step(lr)?;
        }
        let g_terms = self.g_step(lr)?;
        let terms = LossTerms {
            gan_g: g_terms.gan_g,
            cls_g: g_terms.cls_g,
            composite_g: g_terms.composite_g,
            ..d_terms
        };
        self.loss_log.push(LossRow {
            iteration: self.iteration,
            terms,
            lr,
        });
        self.iteration += 1;
        Ok(terms)
    }

    pub fn evaluate_now(&mut self) -> Result<EvalRow> {
        let n = self.config.eval_samples;
        let dma = eval::dma(&self.generator, &self.dataset, n, &mut self.rngs.eval)?;
        let n_global = n * eval::enumerate_states(&self.dataset.scheme).len();
        let fake = eval::sample_generated(
            self.config.variant,
            &self.generator,
            &self.disc,
            &self.dataset,
            n_global,
            &mut self.rngs.eval,
        )?;
        let real = self.dataset.sample_batch(n_global, &mut self.rngs.eval)?;
        let frechet = eval::frechet_distance(&real.points, &fake)?.distance;
        let mean_posterior_kl = if self.config.variant.has_classifier() {
            Some(eval::posterior_consistency(
                &self.generator,
                &self.disc,
                &self.dataset,
                n_global,
                &mut self.rngs.eval,
            )?)
        } else {
            None
        };
        Ok(EvalRow {
            iteration: self.iteration,
            dma: dma.mean,
            frechet,
            mean_posterior_kl,
        })
    }

    fn abort(&self, out: Option<&Path>, err: Error) -> Error {
        let reason = err.to_string();
        if let Some(dir) = out {
            let _ = self.checkpoint().save(&dir.join("abort_checkpoint.json"));
            let last = self.loss_log.last();
            let diag = serde_json::json!({
                "iteration": self.iteration,
                "critic_steps": self.critic_steps,
                "error": reason,
                "last_losses": last,
            });
            let _ = std::fs::write(dir.join("abort_diagnostics.json"), diag.to_string());
        }
        Error::TrainingAborted {
            iteration: self.iteration,
            reason,
        }
    }

    /// Runs to `total_iters`. With `out`, writes periodic and final
    /// checkpoints plus `losses.csv`, `eval.csv` and `record.json`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<RunRecord> {
        let start = Instant::now();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let total = self.config.total_iters;
        let eval_every = self.config.eval_interval();
        let ckpt_every = self.config.checkpoint_interval();
        while self.iteration < total {
            if let Err(e) = self.step() {
                return Err(self.abort(out, e));
            }
            if eval_every > 0 && (self.iteration % eval_every == 0 || self.iteration == total) {
                let row = self.evaluate_now()?;
                self.eval_rows.push(row);
            }
            if let Some(dir) = out {
                if self.iteration % ckpt_every == 0 && self.iteration < total {
                    self.checkpoint()
                        .save(&dir.join(format!("checkpoint_{:08}.json", self.iteration)))?;
                }
            }
        }
        let final_checkpoint = match out {
            Some(dir) => {
                let path = dir.join("final_checkpoint.json");
                self.checkpoint().save(&path)?;
                write_file(&dir.join("losses.csv"), |w| write_loss_csv(&self.loss_log, w))?;
                write_file(&dir.join("eval.csv"), |w| write_eval_csv(&self.eval_rows, w))?;
                Some(path)
            }
            None => None,
        };
        let record = RunRecord {
            config: self.config.clone(),
            eval_rows: self.eval_rows.clone(),
            generator_steps: self.iteration,
            critic_steps: self.critic_steps,
            final_checkpoint,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            flags: Vec::new(),
        };
        if let Some(dir) = out {
            let path = dir.join("record.json");
            std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(record)
    }
}

/// Trains a GAN from scratch and returns the finished trainer with its record.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<(Trainer, RunRecord)> {
    let mut t = Trainer::new(config.clone())?;
    let record = t.run(out)?;
    Ok((t, record))
}

fn default_pgan_batch() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PGanConfig {
    pub total_iters: u64,
    pub n_d: u32,
    #[serde(default = "default_pgan_batch")]
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub lambda_gp: f64,
    #[serde(default = "default_width")]
    pub width: usize,
    pub lr_decay: bool,
    pub seed: u64,
    #[serde(default)]
    pub eval_every: Option<u64>,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl Default for PGanConfig {
    fn default() -> Self {
        Self {
            total_iters: 100_000,
            n_d: 5,
            batch_size: default_pgan_batch(),
            adam: AdamConfig::default(),
            lambda_gp: 0.1,
            width: default_width(),
            lr_decay: true,
            seed: 0,
            eval_every: None,
            eval_samples: default_eval_samples(),
        }
    }
}

impl PGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_d < 1 || self.batch_size == 0 || self.width == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidConfig(
                "n_d, batch_size, width and eval_samples must be positive".into(),
            ));
        }
        if !(self.lambda_gp >= 0.0 && self.lambda_gp.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_gp must be non-negative, got {}", self.lambda_gp)));
        }
        if !(self.adam.alpha > 0.0) {
            return Err(Error::InvalidConfig("adam.alpha must be positive".into()));
        }
        Ok(())
    }
}

/// The classifier whose posteriors the posterior GAN learns to mimic.
#[derive(Clone, Debug)]
pub struct FrozenClassifier {
    pub disc: DiscClassifierNet,
    pub dataset: OverlapDataset,
    /// Generator iterations the classifier was trained for; 0 marks an
    /// untrained classifier, which is accepted but flagged.
    pub trained_iters: u64,
}

impl FrozenClassifier {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            disc: t.disc.clone(),
            dataset: t.dataset.clone(),
            trained_iters: t.iteration,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGanEvalRow {
    pub iteration: u64,
    /// Fréchet distance between generated and real posteriors in simplex
    /// coordinates.
    pub frechet_simplex: f64,
    pub matrix_max_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PGanRecord {
    pub config: PGanConfig,
    pub eval_rows: Vec<PGanEvalRow>,
    pub generator_steps: u64,
    pub critic_steps: u64,
    pub final_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    pub flags: Vec<String>,
}

pub const FLAG_UNTRAINED_CLASSIFIER: &str = "untrained-classifier";

pub struct PGanTrainer {
    config: PGanConfig,
    source: FrozenClassifier,
    pub nets: PGanNets,
    adam_g: AdamState,
    adam_d: AdamState,
    rngs: Streams,
    iteration: u64,
    critic_steps: u64,
    eval_rows: Vec<PGanEvalRow>,
    flags: Vec<String>,
}

impl PGanTrainer {
    pub fn new(config: PGanConfig, source: FrozenClassifier) -> Result<Self> {
        config.validate()?;
        if source.disc.c_head.is_none() {
            return Err(Error::InvalidArgument("posterior GAN needs a network with a classifier head".into()));
        }
        let mut init = NamedRng::new(config.seed, "pgan-init");
        let nets = PGanNets::new(source.dataset.num_classes(), config.width, &mut init);
        let adam_g = AdamState::new(config.adam, nets.generator.named_params().into_iter().map(|(_, t)| t));
        let adam_d = AdamState::new(config.adam, nets.critic.named_params().into_iter().map(|(_, t)| t));
        let flags = if source.trained_iters == 0 {
            vec![FLAG_UNTRAINED_CLASSIFIER.to_string()]
        } else {
            Vec::new()
        };
        Ok(Self {
            rngs: Streams::new(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
            source,
            nets,
            adam_g,
            adam_d,
            iteration: 0,
            critic_steps: 0,
            eval_rows: Vec::new(),
            flags,
        })
    }

    pub fn flags(&self) -> &[String] {
        &self.flags
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn source(&self) -> &FrozenClassifier {
        &self.source
    }

    /// Real `(s_r, y_r)` pairs from the frozen classifier.
    pub fn real_pairs(&mut self, n: usize) -> Result<(Tensor, Tensor)> {
        let batch = self.source.dataset.sample_batch(n, &mut self.rngs.real)?;
        Ok((self.source.disc.classify(&batch.points)?, batch.labels))
    }

    fn d_step(&mut self, lr: f64) -> Result<f64> {
        let n = self.config.batch_size;
        let c = self.nets.num_classes();
        let (s_r, y) = self.real_pairs(n)?;
        let z = sample_noise(n, c, &mut self.rngs.latent);
        let s_g = self.nets.generator.generate(&z, &y)?;
        let critic = &self.nets.critic;
        let mut g = Graph::new();
        let bound = critic.bind(&mut g, true);
        let yv = g.constant(y.clone());
        let sr = g.constant(s_r.clone());
        let sg = g.constant(s_g.clone());
        let d_r = critic.forward(&mut g, &bound, sr, yv)?;
        let d_f = critic.forward(&mut g, &bound, sg, yv)?;
        let (l_d, _) = pgan_losses(&mut g, d_r, d_f, AdversarialMode::Wgan)?;
        let loss = if self.config.lambda_gp > 0.0 {
            let gp = gradient_penalty(&mut g, &[&s_r], &[&s_g], &mut self.rngs.penalty, |g, xs| {
                critic.forward(g, &bound, xs[0], yv)
            })?;
            let w = g.scale(gp, self.config.lambda_gp);
            g.add(l_d, w)?
        } else {
            l_d
        };
        let value = scalar(&g, loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "posterior critic loss".into(),
                iteration: Some(self.iteration),
            });
        }
        g.backward(loss)?;
        let vars = bound.vars();
        let grads = gather_grads(&g, &vars);
        let refs: Vec<&[f64]> = grads.iter().map(|c| c.as_ref()).collect();
        self.adam_d.step(&mut self.nets.critic.params_mut(), &refs, lr)?;
        self.critic_steps += 1;
        Ok(value)
    }

    fn g_step(&mut self, lr: f64) -> Result<f64> {
        let n = self.config.batch_size;
        let c = self.nets.num_classes();
        let (y, _) = sample_categorical(n, c, &mut self.rngs.latent);
        let z = sample_noise(n, c, &mut self.rngs.latent);
        let mut g = Graph::new();
        let bg = self.nets.generator.bind(&mut g, true);
        let bd = self.nets.critic.bind(&mut g, false);
        let zv = g.constant(z);
        let yv = g.constant(y);
        let s = self.nets.generator.forward(&mut g, &bg, zv, yv)?;
        let d_f = self.nets.critic.forward(&mut g, &bd, s, yv)?;
        let loss = adversarial_g(&mut g, d_f, AdversarialMode::Wgan)?;
        let value = scalar(&g, loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "posterior generator loss".into(),
                iteration: Some(self.iteration),
            });
        }
        g.backward(loss)?;
        let vars = bg.vars();
        let grads = gather_grads(&g, &vars);
        let refs: Vec<&[f64]> = grads.iter().map(|c| c.as_ref()).collect();
        self.adam_g.step(&mut self.nets.generator.params_mut(), &refs, lr)?;
        Ok(value)
    }

    pub fn step(&mut self) -> Result<()> {
        let lr = if self.config.lr_decay {
            lr_schedule(self.iteration, self.config.adam.alpha, self.config.total_iters)?
        } else {
            self.config.adam.alpha
        };
        for _ in 0..self.config.n_d {
            self.d_step(lr)?;
        }
        self.g_step(lr)?;
        self.iteration += 1;
        Ok(())
    }

    pub fn evaluate_now(&mut self) -> Result<PGanEvalRow> {
        let n = self.config.eval_samples * self.nets.num_classes();
        let batch = self.source.dataset.sample_batch(n, &mut self.rngs.eval)?;
        let s_r = self.source.disc.classify(&batch.points)?;
        let (s_g, _) = self.nets.sample(n, &mut self.rngs.eval)?;
        let frechet = eval::frechet_distance(&eval::simplex_coordinates(&s_r), &eval::simplex_coordinates(&s_g))?;
        let real_m = eval::PosteriorMatrix::from_samples(&s_r, &batch.classes, self.nets.num_classes())?;
        let pgan_m = eval::posterior_matrix_pgan(&self.nets, self.config.eval_samples, &mut self.rngs.eval)?;
        Ok(PGanEvalRow {
            iteration: self.iteration,
            frechet_simplex: frechet.distance,
            matrix_max_diff: real_m.max_abs_diff(&pgan_m),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut layers = checkpoint::layer_records(&self.nets.generator);
        layers.extend(checkpoint::layer_records(&self.nets.critic));
        Checkpoint {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Pgan,
            variant: None,
            iteration: self.iteration,
            critic_steps: self.critic_steps,
            config: serde_json::to_value(&self.config).expect("config serializes"),
            layers,
            adam_state: vec![
                checkpoint::adam_record("pgan_generator", &self.nets.generator, &self.adam_g),
                checkpoint::adam_record("pgan_critic", &self.nets.critic, &self.adam_d),
            ],
            rng_stream_positions: checkpoint::rng_positions(self.rngs.all()),
            flags: self.flags.clone(),
        }
    }

    pub fn run(&mut self, out: Option<&Path>) -> Result<PGanRecord> {
        let start = Instant::now();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let total = self.config.total_iters;
        let eval_every = self.config.eval_every.unwrap_or((total / 50).max(1));
        while self.iteration < total {
            if let Err(e) = self.step() {
                if let Some(dir) = out {
                    let _ = self.checkpoint().save(&dir.join("pgan_abort_checkpoint.json"));
                }
                return Err(Error::TrainingAborted {
                    iteration: self.iteration,
                    reason: e.to_string(),
                });
            }
            if eval_every > 0 && (self.iteration % eval_every == 0 || self.iteration == total) {
                let row = self.evaluate_now()?;
                self.eval_rows.push(row);
            }
        }
        let final_checkpoint = match out {
            Some(dir) => {
                let path = dir.join("pgan_checkpoint.json");
                self.checkpoint().save(&path)?;
                Some(path)
            }
            None => None,
        };
        Ok(PGanRecord {
            config: self.config.clone(),
            eval_rows: self.eval_rows.clone(),
            generator_steps: self.iteration,
            critic_steps: self.critic_steps,
            final_checkpoint,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            flags: self.flags.clone(),
        })
    }
}

/// Loads posterior GAN weights from a checkpoint written by [`PGanTrainer`].
pub fn load_pgan(ckpt: &Checkpoint) -> Result<PGanNets> {
    if ckpt.kind != CheckpointKind::Pgan {
        return Err(Error::Checkpoint("not a posterior GAN checkpoint".into()));
    }
    let config: PGanConfig = serde_json::from_value(ckpt.config.clone())?;
    let c = ckpt
        .layers
        .iter()
        .find(|l| l.name == "pgan.generator.0.weight")
        .map(|l| l.shape[0] / 2)
        .ok_or_else(|| Error::Checkpoint("missing posterior generator input layer".into()))?;
    let mut nets = PGanNets::new(c, config.width, &mut NamedRng::new(0, "pgan-init"));
    ckpt.load_params(&mut nets.generator)?;
    ckpt.load_params(&mut nets.critic)?;
    Ok(nets)
}

pub fn train_pgan(config: &PGanConfig, source: FrozenClassifier, out: Option<&Path>) -> Result<(PGanTrainer, PGanRecord)> {
    let mut t = PGanTrainer::new(config.clone(), source)?;
    let record = t.run(out)?;
    Ok((t, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Dropout,
    KShared,
    KlCpStart,
    LambdaG,
    Seed,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Dropout => "dropout",
            AblationAxis::KShared => "k_shared",
            AblationAxis::KlCpStart => "kl_cp_start",
            AblationAxis::LambdaG => "lambda_g",
            AblationAxis::Seed => "seed",
        }
    }

    /// Default grid values; `kl_cp_start` values are fractions of `total_iters`.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            AblationAxis::Dropout => vec![1.0, 0.0],
            AblationAxis::KShared => vec![0.0, 1.0, 2.0, 3.0],
            AblationAxis::KlCpStart => vec![0.0, 0.2, 0.4],
            AblationAxis::LambdaG => vec![0.1, 0.2, 0.4, 1.0],
            AblationAxis::Seed => vec![0.0, 1.0, 2.0],
        }
    }

    fn apply(self, config: &mut TrainConfig, value: f64) -> Result<String> {
        Ok(match self {
            AblationAxis::Dropout => {
                config.dropout = value != 0.0;
                if config.dropout { "on" } else { "off" }.to_string()
            }
            AblationAxis::KShared => {
                config.k_shared = value as usize;
                config.k_shared.to_string()
            }
            AblationAxis::KlCpStart => {
                config.kl_cp_start_iter = (value * config.total_iters as f64).round() as u64;
                config.kl_cp_start_iter.to_string()
            }
            AblationAxis::LambdaG => {
                config.lambda_g = value;
                value.to_string()
            }
            AblationAxis::Seed => {
                config.seed = value as u64;
                config.seed.to_string()
            }
        })
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "dropout" => AblationAxis::Dropout,
            "k_shared" => AblationAxis::KShared,
            "kl_cp_start" | "kl_cp_start_iter" => AblationAxis::KlCpStart,
            "lambda_g" => AblationAxis::LambdaG,
            "seed" => AblationAxis::Seed,
            other => return Err(Error::UnknownAxis(other.to_string())),
        })
    }
}

/// An axis with optional explicit values, parsed from `name` or
/// `name=v1,v2,...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
}

impl std::str::FromStr for AxisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, values) = match s.split_once('=') {
            Some((n, v)) => (n, Some(v)),
            None => (s, None),
        };
        let axis: AblationAxis = name.trim().parse()?;
        let values = match values {
            None => axis.default_values(),
            Some(v) => v
                .split(',')
                .map(|x| match (axis, x.trim()) {
                    (AblationAxis::Dropout, "on") => Ok(1.0),
                    (AblationAxis::Dropout, "off") => Ok(0.0),
                    (_, x) => x
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad value {x:?} for axis {name}"))),
                })
                .collect::<Result<_>>()?,
        };
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("axis {name} has no values")));
        }
        Ok(Self { axis, values })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub settings: Vec<(String, String)>,
    pub config: TrainConfig,
}

impl AblationCell {
    pub fn label(&self) -> String {
        if self.settings.is_empty() {
            return "base".to_string();
        }
        self.settings
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Cartesian product of the axes applied to `base`, first axis slowest.
pub fn ablation_cells(base: &TrainConfig, axes: &[AxisSpec]) -> Result<Vec<AblationCell>> {
    let mut cells = vec![AblationCell {
        settings: Vec::new(),
        config: base.clone(),
    }];
    for spec in axes {
        let mut next = Vec::with_capacity(cells.len() * spec.values.len());
        for cell in &cells {
            for &v in &spec.values {
                let mut config = cell.config.clone();
                let shown = spec.axis.apply(&mut config, v)?;
                config.validate()?;
                let mut settings = cell.settings.clone();
                settings.push((spec.axis.name().to_string(), shown));
                next.push(AblationCell { settings, config });
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Runs every cell on a pool of `threads` workers. Records come back in
/// cell order; each cell writes to its own subdirectory of `out`.
pub fn ablation_grid(
    base: &TrainConfig,
    axes: &[AxisSpec],
    out: Option<&Path>,
    threads: usize,
) -> Result<Vec<(AblationCell, RunRecord)>> {
    use rayon::prelude::*;

    let cells = ablation_cells(base, axes)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let records: Vec<Result<RunRecord>> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let dir = out.map(|d| d.join(format!("cell_{i:03}")));
                train(&cell.config, dir.as_deref()).map(|(_, r)| r)
            })
            .collect()
    });
    let table: Vec<(AblationCell, RunRecord)> = cells
        .into_iter()
        .zip(records)
        .map(|(c, r)| r.map(|r| (c, r)))
        .collect::<Result<_>>()?;
    if let Some(dir) = out {
        write_file(&dir.join("ablation.csv"), |w| write_ablation_table(&table, w))?;
    }
    Ok(table)
}

/// One row per cell with the final evaluation metrics.
pub fn write_ablation_table<W: Write>(table: &[(AblationCell, RunRecord)], mut out: W) -> std::io::Result<()> {
    writeln!(out, "cell,dma,frechet,mean_posterior_kl")?;
    for (cell, rec) in table {
        match rec.eval_rows.last() {
            Some(r) => {
                let kl = r.mean_posterior_kl.map(|v| v.to_string()).unwrap_or_default();
                writeln!(out, "\"{}\",{},{},{kl}", cell.label(), r.dma, r.frechet)?
            }
            None => writeln!(out, "\"{}\",,,", cell.label())?,
        }
    }
    Ok(())
}
