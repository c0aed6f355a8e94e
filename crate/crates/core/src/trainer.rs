//! Adam, the alternating discriminator/generator loop, checkpoints,
//! evaluation and the ablation runner.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Graph, ParamStore};
use crate::blocks::{IdentityTaps, PerceptualExtractor, PerceptualNet};
use crate::data::container::{load_container, save_container, AnyTensor};
use crate::data::{crop, denormalize, normalize, random_crop_128, write_atomic, ALIGNED_SIZE, CROP_SIZE};
use crate::degrade::{apply_degradation, bicubic_resize, DegradationSpec};
use crate::error::{invalid, Error, Result};
use crate::metrics::{fmt_num, image_pair_metrics, MetricReport, MetricRow};
use crate::networks::{Ablation, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, OUTPUT_SIZE};
use crate::objectives::{
    discriminator_loss, generator_adversarial_loss, perceptual_loss, pixel_loss, total_generator_loss, LossParts, LossWeights,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Restoration tasks and their default degradations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// ×4 downsampling with a quarter-area hole.
    Srfc4,
    /// ×8 downsampling with a quarter-area hole.
    Srfc8,
    /// Completion only.
    Fc,
    /// ×8 downsampling only.
    Sr8,
}

impl Task {
    /// `(scale, mask_fraction)`.
    pub fn degradation(self) -> (usize, f64) {
        match self {
            Task::Srfc4 => (4, 0.25),
            Task::Srfc8 => (8, 0.25),
            Task::Fc => (1, 0.25),
            Task::Sr8 => (8, 0.0),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srfc4" => Ok(Task::Srfc4),
            "srfc8" => Ok(Task::Srfc8),
            "fc" => Ok(Task::Fc),
            "sr8" => Ok(Task::Sr8),
            _ => Err(invalid!("unknown task {s:?} (expected srfc4, srfc8, fc or sr8)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape().to_vec())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update; frozen parameters keep their values.
    /// Nothing changes when any gradient is non-finite.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(invalid!("adam: {} gradients for {} parameters", grads.len(), store.len()));
        }
        for (p, g) in store.iter().zip(grads) {
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.name.clone(), format!("{:?} vs {:?}", g.shape(), p.tensor.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr) = (T::one(), T::lit(c.eps), T::lit(c.lr));
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let it = p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((w, &gi), mi), vi) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn unit_f64() -> f64 {
    1.0
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from 1 at step 0 down to `floor` at `steps`.
    Cosine,
}

impl LrSchedule {
    /// Multiplier for the update taking the model from `step` to `step + 1`.
    pub fn factor(self, step: u64, steps: u64, floor: f64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine if steps == 0 => 1.0,
            LrSchedule::Cosine => {
                let c = 0.5 * (1.0 + (std::f64::consts::PI * step.min(steps) as f64 / steps as f64).cos());
                floor + (1.0 - floor) * c
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptualConfig {
    /// Widths of the five extractor blocks (randomly initialized, frozen).
    pub widths: [usize; 5],
    /// Pretrained weights in the container format, replacing the random init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub scale: usize,
    pub mask_fraction: f64,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub ablation: Ablation,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Final learning-rate multiplier of the cosine schedule.
    #[serde(default)]
    pub lr_floor: f64,
    /// Length of the schedule in steps; 0 uses `steps`. A fixed value keeps the
    /// schedule unchanged when a run is stopped and continued.
    #[serde(default)]
    pub lr_decay_steps: u64,
    /// Discriminator learning rate relative to `adam.lr`.
    #[serde(default = "unit_f64")]
    pub disc_lr_scale: f64,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual: PerceptualConfig,
}

impl TrainConfig {
    /// Full-width networks, batch 24.
    pub fn new(task: Task) -> Self {
        let (scale, mask_fraction) = task.degradation();
        Self {
            task,
            scale,
            mask_fraction,
            batch: 24,
            steps: 1000,
            seed: 0,
            ablation: Ablation::M3,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            lr_floor: 0.0,
            lr_decay_steps: 0,
            disc_lr_scale: 1.0,
            generator: GeneratorConfig::new(OUTPUT_SIZE / scale),
            discriminator: DiscriminatorConfig::new(),
            perceptual: PerceptualConfig {
                widths: [64, 128, 256, 512, 512],
                weights: None,
            },
        }
    }

    /// Narrow networks, a small batch and a raised learning rate with
    /// cosine decay to 10% for desk-scale runs. The discriminator learns 50×
    /// slower so it does not overpower the small generator.
    pub fn toy(task: Task) -> Self {
        let (scale, _) = task.degradation();
        Self {
            batch: 4,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            lr_schedule: LrSchedule::Cosine,
            lr_floor: 0.1,
            lr_decay_steps: 2000,
            disc_lr_scale: 0.02,
            generator: GeneratorConfig::toy(OUTPUT_SIZE / scale),
            discriminator: DiscriminatorConfig::toy(),
            perceptual: PerceptualConfig {
                widths: [4, 4, 8, 8, 8],
                weights: None,
            },
            ..Self::new(task)
        }
    }

    /// Change the degradation, keeping the generator input size consistent.
    pub fn set_degradation(&mut self, scale: usize, mask_fraction: f64) {
        self.scale = scale;
        self.mask_fraction = mask_fraction;
        if scale > 0 {
            self.generator.input_size = OUTPUT_SIZE / scale;
        }
    }

    pub fn set_task(&mut self, task: Task) {
        self.task = task;
        let (s, f) = task.degradation();
        self.set_degradation(s, f);
    }

    pub fn degradation(&self, seed: u64) -> Result<DegradationSpec> {
        DegradationSpec::new(self.scale, self.mask_fraction, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.degradation(0)?;
        self.weights.validate()?;
        self.generator.validate()?;
        if self.generator.input_size * self.scale != OUTPUT_SIZE {
            return Err(invalid!(
                "generator input {} does not match scale {}",
                self.generator.input_size,
                self.scale
            ));
        }
        if self.discriminator.input_size != OUTPUT_SIZE {
            return Err(invalid!("discriminator input must be {OUTPUT_SIZE}"));
        }
        if self.batch == 0 {
            return Err(invalid!("batch must be ≥ 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(invalid!("learning rate must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(invalid!("lr_floor must be in [0, 1], got {}", self.lr_floor));
        }
        if !(self.disc_lr_scale > 0.0) || !self.disc_lr_scale.is_finite() {
            return Err(invalid!("disc_lr_scale must be finite and > 0"));
        }
        Ok(())
    }

    /// Networks of the configured ablation variant.
    pub fn variant_configs(&self) -> (GeneratorConfig, DiscriminatorConfig) {
        (
            self.generator.clone().with_ablation(self.ablation),
            self.discriminator.clone().with_ablation(self.ablation),
        )
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid!("config: {e}"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| invalid!("config: {e}"))
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub pixel: f64,
    pub perceptual: f64,
    pub adversarial_g: f64,
    pub discriminator: f64,
    pub total: f64,
}

impl LossRow {
    const WIDTH: usize = 6;

    fn to_array(self) -> [f64; Self::WIDTH] {
        [self.step as f64, self.pixel, self.perceptual, self.adversarial_g, self.discriminator, self.total]
    }

    fn from_slice(v: &[f64]) -> Self {
        Self {
            step: v[0] as u64,
            pixel: v[1],
            perceptual: v[2],
            adversarial_g: v[3],
            discriminator: v[4],
            total: v[5],
        }
    }
}

pub fn losses_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss_pix,loss_per,loss_adv_G,loss_D,total\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, r.pixel, r.perceptual, r.adversarial_g, r.discriminator, r.total);
    }
    s
}

/// Random stream of training step `step` (stream 0 is used for initialization).
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step + 1);
    rng
}

/// Image order of pass `epoch` over a training set of `n` images.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0e90_c4a1_d3b7);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Frozen feature network used by the perceptual loss.
#[derive(Debug, Clone)]
pub enum Perceptual<T> {
    Net(PerceptualNet<T>),
    Identity,
}

impl<T: Scalar> Perceptual<T> {
    fn extractor(&self) -> &dyn PerceptualExtractor<T> {
        match self {
            Perceptual::Net(n) => n,
            Perceptual::Identity => &IdentityTaps,
        }
    }
}

const CHECKPOINT_FILE: &str = "checkpoint.mfgt";
const LOSSES_FILE: &str = "losses.csv";
const CONFIG_FILE: &str = "config.toml";

fn u64_tensor(v: u64) -> AnyTensor {
    AnyTensor::U8(Tensor::from_vec([8], v.to_le_bytes().to_vec()).expect("8 bytes"))
}

fn tensor_u64(t: &AnyTensor, name: &str) -> Result<u64> {
    let b = t.as_u8().filter(|b| b.numel() == 8).ok_or_else(|| invalid!("checkpoint: {name} is not 8 bytes"))?;
    Ok(u64::from_le_bytes(b.data().try_into().expect("8 bytes")))
}

pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub perceptual: Perceptual<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
    pub step: u64,
    pub history: Vec<LossRow>,
    images: Vec<Tensor<u8>>,
}

impl<T: Scalar> Trainer<T> {
    /// Seeded initialization over 8-bit `[3, 144, 144]` or `[3, 128, 128]` training images.
    pub fn new(cfg: TrainConfig, images: Vec<Tensor<u8>>) -> Result<Self> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        for (i, img) in images.iter().enumerate() {
            let sh = img.shape();
            if sh.len() != 3 || sh[0] != 3 || sh[1] != sh[2] || !(sh[1] == ALIGNED_SIZE || sh[1] == CROP_SIZE) {
                return Err(Error::shape("train", format!("image {i}"), format!("expected [3,144,144] or [3,128,128], got {sh:?}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (gc, dc) = cfg.variant_configs();
        let generator = Generator::new(&gc, &mut rng)?;
        let discriminator = Discriminator::new(&dc, &mut rng)?;
        let perceptual = match &cfg.perceptual.weights {
            Some(path) => Perceptual::Net(PerceptualNet::load(path)?),
            None => Perceptual::Net(PerceptualNet::random(cfg.perceptual.widths, &mut rng)?),
        };
        Ok(Self {
            opt_g: Adam::new(&generator.params, cfg.adam),
            opt_d: Adam::new(&discriminator.params, cfg.adam),
            cfg,
            generator,
            discriminator,
            perceptual,
            step: 0,
            history: Vec::new(),
            images,
        })
    }

    /// Ground-truth and degraded batches of training step `step`.
    pub fn batch(&self, step: u64) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut rng = step_rng(self.cfg.seed, step);
        let mut gts = Vec::with_capacity(self.cfg.batch);
        let n = self.images.len() as u64;
        let mut perm = (u64::MAX, Vec::new());
        for j in 0..self.cfg.batch as u64 {
            // Images are drawn without replacement within each pass over the set.
            let pos = step * self.cfg.batch as u64 + j;
            if perm.0 != pos / n {
                perm = (pos / n, epoch_order(self.cfg.seed, pos / n, self.images.len()));
            }
            let img = &self.images[perm.1[(pos % n) as usize]];
            let c = if img.dim(1) == ALIGNED_SIZE { random_crop_128(img, &mut rng)?.0 } else { img.clone() };
            gts.push(normalize::<T>(&c));
        }
        let gt = Tensor::stack_outer(&gts)?;
        let spec = self.cfg.degradation(rng.next_u64())?;
        let (lq, _) = apply_degradation(&gt, &spec)?;
        Ok((gt, lq))
    }

    /// One discriminator update on `(real, detached fake)` followed by one
    /// generator update on the weighted total loss.
    pub fn train_step(&mut self) -> Result<LossRow> {
        let horizon = if self.cfg.lr_decay_steps > 0 { self.cfg.lr_decay_steps } else { self.cfg.steps };
        let lr = self.cfg.adam.lr * self.cfg.lr_schedule.factor(self.step, horizon, self.cfg.lr_floor);
        self.opt_d.cfg.lr = lr * self.cfg.disc_lr_scale;
        self.opt_g.cfg.lr = lr;
        let (gt, lq) = self.batch(self.step)?;
        let graph = Graph::new();
        let bg = graph.bind(&self.generator.params, true);
        let gt_v = graph.constant(gt.clone());
        let fake = self.generator.forward(&bg, &graph.constant(lq))?;

        let (loss_d, grads_d) = {
            let gd = Graph::new();
            let bd = gd.bind(&self.discriminator.params, true);
            let real = self.discriminator.forward(&bd, &gd.constant(gt))?;
            let fk = self.discriminator.forward(&bd, &gd.constant((*fake.value()).clone()))?;
            let loss = discriminator_loss(&real, &fk)?;
            if !loss.item().is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    name: "loss_D".into(),
                });
            }
            let grads = gd.backward(loss)?;
            (loss.item().as_f64(), bd.collect(&grads))
        };
        self.opt_d.update(&mut self.discriminator.params, &grads_d)?;

        let bd = graph.bind(&self.discriminator.params, false);
        let logits = self.discriminator.forward(&bd, &fake)?;
        let parts = LossParts {
            pixel: pixel_loss(&fake, &gt_v)?,
            adversarial: generator_adversarial_loss(&logits)?,
            perceptual: perceptual_loss(&graph, &fake, &gt_v, self.perceptual.extractor())?,
        };
        let total = total_generator_loss(&parts, &self.cfg.weights)?;
        let grads = graph.backward(total)?;
        let grads_g = bg.collect(&grads);
        let row = LossRow {
            step: self.step + 1,
            pixel: parts.pixel.item().as_f64(),
            perceptual: parts.perceptual.item().as_f64(),
            adversarial_g: parts.adversarial.item().as_f64(),
            discriminator: loss_d,
            total: total.item().as_f64(),
        };
        drop(bd);
        drop(bg);
        self.opt_g.update(&mut self.generator.params, &grads_g)?;
        self.step += 1;
        self.history.push(row);
        Ok(row)
    }

    /// Run until `cfg.steps`, checkpointing into `out` when given.
    pub fn train(&mut self, out: Option<&Path>) -> Result<()> {
        if let Some(dir) = out {
            write_atomic(&dir.join(CONFIG_FILE), self.cfg.to_toml()?.as_bytes())?;
        }
        while self.step < self.cfg.steps {
            self.train_step()?;
            let every = self.cfg.checkpoint_every;
            if let Some(dir) = out {
                if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
                    self.save_outputs(dir)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save_outputs(dir)?;
        }
        Ok(())
    }

    /// Checkpoint and loss CSV.
    pub fn save_outputs(&self, dir: &Path) -> Result<()> {
        self.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        write_atomic(&dir.join(LOSSES_FILE), losses_csv(&self.history).as_bytes())
    }

    pub fn checkpoint_entries(&self) -> Result<Vec<(String, AnyTensor)>> {
        let mut e = Vec::new();
        let toml = self.cfg.to_toml()?;
        e.push(("meta.config".to_string(), AnyTensor::U8(Tensor::from_vec([toml.len()], toml.into_bytes())?)));
        e.push(("meta.step".to_string(), u64_tensor(self.step)));
        e.push(("meta.rng_seed".to_string(), u64_tensor(self.cfg.seed)));
        let hist: Vec<f64> = self.history.iter().flat_map(|r| r.to_array()).collect();
        e.push(("meta.losses".to_string(), AnyTensor::F64(Tensor::from_vec([self.history.len(), LossRow::WIDTH], hist)?)));
        for (prefix, store, opt) in [
            ("gen", &self.generator.params, &self.opt_g),
            ("disc", &self.discriminator.params, &self.opt_d),
        ] {
            e.push((format!("opt.{prefix}.step"), u64_tensor(opt.step)));
            for ((p, m), v) in store.iter().zip(&opt.m).zip(&opt.v) {
                e.push((p.name.clone(), AnyTensor::from_float(&p.tensor)));
                e.push((format!("opt.{prefix}.m.{}", p.name), AnyTensor::from_float(m)));
                e.push((format!("opt.{prefix}.v.{}", p.name), AnyTensor::from_float(v)));
            }
        }
        if let Perceptual::Net(net) = &self.perceptual {
            for p in net.params.iter() {
                e.push((format!("perceptual.{}", p.name), AnyTensor::from_float(&p.tensor)));
            }
        }
        Ok(e)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_container(path, &self.checkpoint_entries()?)
    }

    /// Rebuild a trainer from a checkpoint, continuing where it stopped.
    pub fn resume(path: &Path, images: Vec<Tensor<u8>>) -> Result<Self> {
        let entries = load_container(path)?;
        let cfg = checkpoint_config(&entries)?;
        Self::resume_with(cfg, &entries, images)
    }

    /// Like [`Trainer::resume`] but with a replacement config (e.g. more steps).
    pub fn resume_with(cfg: TrainConfig, entries: &[(String, AnyTensor)], images: Vec<Tensor<u8>>) -> Result<Self> {
        let mut t = Self::new(cfg, images)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| invalid!("checkpoint lacks {name}"))
        };
        t.step = tensor_u64(find("meta.step")?, "meta.step")?;
        let losses = find("meta.losses")?.to_float::<f64>()?;
        t.history = losses.data().chunks_exact(LossRow::WIDTH).map(LossRow::from_slice).collect();
        for (prefix, store, opt) in [
            ("gen", &mut t.generator.params, &mut t.opt_g),
            ("disc", &mut t.discriminator.params, &mut t.opt_d),
        ] {
            opt.step = tensor_u64(find(&format!("opt.{prefix}.step"))?, "optimizer step")?;
            for (i, p) in store.iter_mut().enumerate() {
                let load = |n: &str, like: &Tensor<T>| -> Result<Tensor<T>> {
                    let v = find(n)?.to_float::<T>()?;
                    if v.shape() != like.shape() {
                        return Err(invalid!("checkpoint {n}: shape {:?}, expected {:?}", v.shape(), like.shape()));
                    }
                    Ok(v)
                };
                p.tensor = load(&p.name, &p.tensor)?;
                opt.m[i] = load(&format!("opt.{prefix}.m.{}", p.name), &opt.m[i])?;
                opt.v[i] = load(&format!("opt.{prefix}.v.{}", p.name), &opt.v[i])?;
            }
        }
        if let Perceptual::Net(net) = &mut t.perceptual {
            for p in net.params.iter_mut() {
                p.tensor = find(&format!("perceptual.{}", p.name))?.to_float::<T>()?;
            }
        }
        Ok(t)
    }
}

/// Training config embedded in a checkpoint.
pub fn checkpoint_config(entries: &[(String, AnyTensor)]) -> Result<TrainConfig> {
    let bytes = entries
        .iter()
        .find(|(n, _)| n == "meta.config")
        .and_then(|(_, t)| t.as_u8())
        .ok_or_else(|| invalid!("checkpoint lacks meta.config"))?;
    let text = std::str::from_utf8(bytes.data()).map_err(|_| invalid!("checkpoint config is not UTF-8"))?;
    TrainConfig::from_toml(text)
}

/// Generator weights from a checkpoint, ready for inference.
pub fn load_generator<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let entries = load_container(path)?;
    let cfg = checkpoint_config(&entries)?;
    let (gc, _) = cfg.variant_configs();
    let mut gen = Generator::new(&gc, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let values = gen
        .params
        .iter()
        .map(|p| {
            let t = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| invalid!("checkpoint lacks {}", p.name))?;
            Ok((p.name.clone(), t.1.to_float::<T>()?))
        })
        .collect::<Result<Vec<_>>>()?;
    gen.params.load_values(values.iter().map(|(n, t)| (n.as_str(), t)))?;
    Ok(gen)
}

/// Inference on a normalized `[N, 3, s, s]` batch.
pub fn restore<T: Scalar>(gen: &Generator<T>, lq: &Tensor<T>) -> Result<Tensor<T>> {
    let graph = Graph::new();
    let b = graph.bind(&gen.params, false);
    let out = gen.forward(&b, &graph.constant(lq.clone()))?;
    Ok((*out.value()).clone())
}

/// Central 128×128 window of a 144×144 image; 128×128 images pass through.
pub fn center_crop(img: &Tensor<u8>) -> Result<Tensor<u8>> {
    match img.dim(1) {
        CROP_SIZE => Ok(img.clone()),
        ALIGNED_SIZE => crop(img, 8, 8, CROP_SIZE),
        _ => Err(Error::shape("center_crop", "H/W", format!("expected 128 or 144, got {:?}", img.shape()))),
    }
}

/// Model and bicubic-baseline metrics on fixed degradations of `images`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: MetricReport,
    pub baseline: MetricReport,
}

/// Degrade each image with stream `i` of `spec`, restore, and score against
/// the ground truth; the baseline is the bicubic upscale of the degraded input.
pub fn evaluate<T: Scalar>(gen: &Generator<T>, images: &[(String, Tensor<u8>)], spec: &DegradationSpec) -> Result<Evaluation> {
    let mut model = Vec::new();
    let mut baseline = Vec::new();
    for (i, (name, img)) in images.iter().enumerate() {
        let gt8 = center_crop(img)?;
        let gt = normalize::<T>(&gt8).reshape([1, 3, CROP_SIZE, CROP_SIZE])?;
        let (lq, _) = crate::degrade::degrade_item(&gt.index_outer(0), spec, i)?;
        let s = lq.dim(1);
        let out = restore(gen, &lq.clone().reshape([1, 3, s, s])?)?;
        let up = bicubic_resize(&lq, CROP_SIZE, CROP_SIZE)?;
        let (p, q) = image_pair_metrics(&denormalize(&out.index_outer(0)), &gt8)?;
        model.push(MetricRow { name: name.clone(), psnr: p, ssim: q });
        let (p, q) = image_pair_metrics(&denormalize(&up), &gt8)?;
        baseline.push(MetricRow { name: name.clone(), psnr: p, ssim: q });
    }
    Ok(Evaluation {
        model: MetricReport { rows: model },
        baseline: MetricReport { rows: baseline },
    })
}

/// One ablation row; `result` is `Err` with the failure message when the variant failed.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Ablation,
    pub result: std::result::Result<(f64, f64), String>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,psnr_db,ssim\n");
        for r in &self.rows {
            match &r.result {
                Ok((p, q)) => {
                    let _ = writeln!(s, "{},{},{}", r.variant.name(), fmt_num(*p), fmt_num(*q));
                }
                Err(_) => {
                    let _ = writeln!(s, "{},invalid,invalid", r.variant.name());
                }
            }
        }
        s
    }

    /// Model / PSNR / SSIM table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:>9} {:>7}\n", "Model", "PSNR", "SSIM");
        for r in &self.rows {
            match &r.result {
                Ok((p, q)) => {
                    let _ = writeln!(s, "{:<6} {:>9.3} {:>7.3}", r.variant.name(), p, q);
                }
                Err(e) => {
                    let _ = writeln!(s, "{:<6} {:>9} {:>7}  ({e})", r.variant.name(), "invalid", "invalid");
                }
            }
        }
        s
    }
}

/// Train M1, M2 and M3 under the same seed and budget and score each on `eval_images`.
pub fn run_ablation<T: Scalar>(train_images: &[Tensor<u8>], eval_images: &[(String, Tensor<u8>)], base: &TrainConfig) -> AblationTable {
    let rows = Ablation::ALL
        .iter()
        .map(|&variant| {
            let result = (|| -> Result<(f64, f64)> {
                let mut cfg = base.clone();
                cfg.ablation = variant;
                let mut t = Trainer::<T>::new(cfg, train_images.to_vec())?;
                t.train(None)?;
                let spec = base.degradation(base.seed)?;
                let ev = evaluate(&t.generator, eval_images, &spec)?;
                Ok((ev.model.mean_psnr(), ev.model.mean_ssim()))
            })()
            .map_err(|e| e.to_string());
            AblationRow { variant, result }
        })
        .collect();
    AblationTable { rows }
}
