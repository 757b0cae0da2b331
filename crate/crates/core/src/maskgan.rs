//! Stage one: a style-based generator of 6-class mask score volumes and its
//! Wasserstein critic, trained with gradient penalty and drift under a
//! progressive-resolution schedule.
//!
//! Synthesis blocks are (upsample, 3×3 conv, batch norm, style bias,
//! LeakyReLU 0.2). The style code enters each block as a learned
//! per-channel bias. New resolutions are faded in by blending the score
//! logits of the new block with the upsampled logits of the previous one.

use lungsynth_autodiff::nn;
use lungsynth_autodiff::{grad, no_grad, Adam, AdamConfig, Bound, ParamId, ParamStore, Tensor, Var};
use ndarray::{Array2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::layers::{init_normal, Conv, Linear, LEAKY_SLOPE, NORM_EPS};
use crate::maskcodec::{decode_labels, ClassScoreVolume, LabelMask, NUM_CLASSES};

/// Stabiliser under the square root of the gradient norm; keeps the
/// derivative finite when a critic is locally flat.
const NORM_STABILISER: f64 = 1e-16;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGanConfig {
    pub latent_dim: usize,
    pub style_dim: usize,
    pub mapping_depth: usize,
    pub channels: usize,
    pub start_resolution: usize,
    pub target_resolution: usize,
    pub steps_per_resolution: u64,
    pub batch_size: usize,
    pub lambda_gp: f64,
    pub lambda_drift: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for MaskGanConfig {
    fn default() -> Self {
        MaskGanConfig {
            latent_dim: 512,
            style_dim: 512,
            mapping_depth: 4,
            channels: 64,
            start_resolution: 4,
            target_resolution: 64,
            steps_per_resolution: 10_000,
            batch_size: 8,
            lambda_gp: 10.0,
            lambda_drift: 0.001,
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
        }
    }
}

impl MaskGanConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 1 && v.is_power_of_two();
        if !pow2(self.start_resolution) || !pow2(self.target_resolution) {
            return Err(Error::config("mask GAN resolutions must be powers of two"));
        }
        if self.start_resolution > self.target_resolution {
            return Err(Error::config("start_resolution exceeds target_resolution"));
        }
        if self.start_resolution < 4 {
            return Err(Error::config("start_resolution must be at least 4"));
        }
        if self.lambda_gp < 0.0 || self.lambda_drift < 0.0 {
            return Err(Error::config("penalty weights must be non-negative"));
        }
        if self.latent_dim == 0 || self.style_dim == 0 || self.mapping_depth == 0 || self.channels == 0 {
            return Err(Error::config("mask GAN dimensions must be positive"));
        }
        if self.steps_per_resolution < 2 || self.batch_size == 0 {
            return Err(Error::config("steps_per_resolution >= 2 and batch_size >= 1 required"));
        }
        Ok(())
    }

    /// Resolutions visited, coarse to fine.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = vec![self.start_resolution];
        while *out.last().unwrap() < self.target_resolution {
            out.push(out.last().unwrap() * 2);
        }
        out
    }

    pub fn total_steps(&self) -> u64 {
        self.resolutions().len() as u64 * self.steps_per_resolution
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Resolution and fade-in weight at `step`. The weight ramps linearly from
/// 0 to 1 over the first half of every stage after the first; past the
/// final stage the schedule holds the target resolution.
pub fn progressive_schedule(step: u64, cfg: &MaskGanConfig) -> (usize, f64) {
    let stages = cfg.resolutions();
    let spr = cfg.steps_per_resolution.max(1);
    let stage = (step / spr) as usize;
    if stage >= stages.len() {
        return (cfg.target_resolution, 1.0);
    }
    if stage == 0 {
        return (stages[0], 1.0);
    }
    let into = (step - stage as u64 * spr) as f64;
    let ramp = (spr as f64 / 2.0).max(1.0);
    (stages[stage], (into / ramp).min(1.0))
}

/// How batch norm behaves during a forward pass.
pub enum NormMode<'a> {
    /// Batch statistics; `(mean id, var id, batch mean, batch var)` are recorded.
    Train(&'a mut Vec<(ParamId, ParamId, Tensor, Tensor)>),
    /// Stored running statistics.
    Eval(&'a ParamStore),
}

#[derive(Clone, Debug, PartialEq)]
struct SynthBlock {
    resolution: usize,
    conv: Conv,
    style: Linear,
    running_mean: ParamId,
    running_var: ParamId,
    to_scores: Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGenerator {
    pub cfg: MaskGanConfig,
    mapping: Vec<Linear>,
    constant: ParamId,
    blocks: Vec<SynthBlock>,
}

impl MaskGenerator {
    /// Builds the network; parameters go into `params`, batch-norm running
    /// statistics into `buffers`.
    pub fn new<R: Rng + ?Sized>(
        cfg: &MaskGanConfig,
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut mapping = Vec::new();
        for i in 0..cfg.mapping_depth {
            let fan_in = if i == 0 { cfg.latent_dim } else { cfg.style_dim };
            mapping.push(Linear::new(params, &format!("mapping.{i}"), fan_in, cfg.style_dim, rng));
        }
        let c = cfg.channels;
        let r0 = cfg.start_resolution;
        let constant = params.add("synthesis.const", init_normal(rng, &[1, c, r0, r0], 1.0));
        let mut blocks = Vec::new();
        for r in cfg.resolutions() {
            let name = format!("synthesis.b{r}");
            blocks.push(SynthBlock {
                resolution: r,
                conv: Conv::new(params, &format!("{name}.conv"), c, c, 3, 1, 1, rng),
                style: Linear::new(params, &format!("{name}.style"), cfg.style_dim, c, rng),
                running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(IxDyn(&[c]))),
                running_var: buffers.add(format!("{name}.running_var"), Tensor::ones(IxDyn(&[c]))),
                to_scores: Conv::new(params, &format!("{name}.to_scores"), c, NUM_CLASSES, 1, 1, 0, rng),
            });
        }
        Ok(MaskGenerator {
            cfg: cfg.clone(),
            mapping,
            constant,
            blocks,
        })
    }

    pub fn final_mapping_layer(&self) -> &Linear {
        self.mapping.last().expect("mapping depth >= 1")
    }

    /// `z (N×latent) → w (N×style)`; LeakyReLU between layers, none after the last.
    pub fn map_latent(&self, p: &Bound, z: &Var) -> Result<Var> {
        if z.ndim() != 2 || z.shape()[1] != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent batch must be N x {}, got {:?}",
                self.cfg.latent_dim,
                z.shape()
            )));
        }
        let mut h = z.clone();
        for (i, layer) in self.mapping.iter().enumerate() {
            h = layer.forward(p, &h);
            if i + 1 < self.mapping.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok(h)
    }

    fn block_forward(&self, p: &Bound, block: &SynthBlock, x: &Var, w: &Var, mode: &mut NormMode<'_>) -> Var {
        let x = if block.resolution == self.cfg.start_resolution {
            x.clone()
        } else {
            nn::upsample_nearest(x, 2)
        };
        let h = block.conv.forward(p, &x);
        let normed = match mode {
            NormMode::Train(record) => {
                let (y, mean, var) = nn::batch_norm_train(&h, NORM_EPS);
                record.push((
                    block.running_mean,
                    block.running_var,
                    mean.value().clone().into_shape_with_order(IxDyn(&[self.cfg.channels])).unwrap(),
                    var.value().clone().into_shape_with_order(IxDyn(&[self.cfg.channels])).unwrap(),
                ));
                y
            }
            NormMode::Eval(buffers) => {
                let c = self.cfg.channels;
                let mean = Var::constant(buffers.get(block.running_mean).clone()).reshape(&[1, c, 1, 1]);
                let var = Var::constant(buffers.get(block.running_var).clone()).reshape(&[1, c, 1, 1]);
                h.sub(&mean).div(&var.add_scalar(NORM_EPS).sqrt())
            }
        };
        let n = w.shape()[0];
        let bias = block.style.forward(p, w).reshape(&[n, self.cfg.channels, 1, 1]);
        normed.add(&bias).leaky_relu(LEAKY_SLOPE)
    }

    /// Per-pixel class logits at `resolution` with fade-in weight `alpha`.
    pub fn synthesize_logits(
        &self,
        p: &Bound,
        w: &Var,
        resolution: usize,
        alpha: f64,
        mode: &mut NormMode<'_>,
    ) -> Result<Var> {
        let stage = self
            .blocks
            .iter()
            .position(|b| b.resolution == resolution)
            .ok_or_else(|| Error::config(format!("resolution {resolution} is not in the schedule")))?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(format!("fade-in weight {alpha} outside [0, 1]")));
        }
        if w.ndim() != 2 || w.shape()[1] != self.cfg.style_dim {
            return Err(Error::shape(format!("style batch must be N x {}", self.cfg.style_dim)));
        }
        let n = w.shape()[0];
        let c = self.cfg.channels;
        let r0 = self.cfg.start_resolution;
        let mut x = p.get(self.constant).broadcast_to(&[n, c, r0, r0]);
        let mut prev = None;
        for block in &self.blocks[..=stage] {
            prev = Some(x.clone());
            x = self.block_forward(p, block, &x, w, mode);
        }
        let logits = self.blocks[stage].to_scores.forward(p, &x);
        if stage == 0 || alpha >= 1.0 {
            return Ok(logits);
        }
        let old = self.blocks[stage - 1]
            .to_scores
            .forward(p, &prev.expect("stage > 0"));
        let old = nn::upsample_nearest(&old, 2);
        Ok(logits.scale(alpha).add(&old.scale(1.0 - alpha)))
    }

    /// Softmax-normalised `N×6×R×R` class scores.
    pub fn synthesize(
        &self,
        p: &Bound,
        w: &Var,
        resolution: usize,
        alpha: f64,
        mode: &mut NormMode<'_>,
    ) -> Result<Var> {
        let logits = self.synthesize_logits(p, w, resolution, alpha, mode)?;
        Ok(channel_softmax(&logits))
    }
}

/// Softmax across axis 1 of an NCHW tensor.
pub fn channel_softmax(x: &Var) -> Var {
    x.permute(&[0, 2, 3, 1]).softmax_last().permute(&[0, 3, 1, 2])
}

/// Scalar-output critic that mirrors the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskCritic {
    pub cfg: MaskGanConfig,
    from_scores: Vec<Conv>,
    convs: Vec<Conv>,
    head: Linear,
}

impl MaskCritic {
    pub fn new<R: Rng + ?Sized>(cfg: &MaskGanConfig, params: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut from_scores = Vec::new();
        let mut convs = Vec::new();
        for r in cfg.resolutions() {
            from_scores.push(Conv::new(params, &format!("critic.r{r}.from_scores"), NUM_CLASSES, c, 1, 1, 0, rng));
            convs.push(Conv::new(params, &format!("critic.r{r}.conv"), c, c, 3, 1, 1, rng));
        }
        let r0 = cfg.start_resolution;
        let head = Linear::new(params, "critic.head", c * r0 * r0, 1, rng);
        Ok(MaskCritic {
            cfg: cfg.clone(),
            from_scores,
            convs,
            head,
        })
    }

    /// One score per sample, shape `(N,)`.
    pub fn forward(&self, p: &Bound, x: &Var, alpha: f64) -> Result<Var> {
        let (n, ch, h, w) = nn::dims4(x);
        if ch != NUM_CLASSES || h != w {
            return Err(Error::shape(format!("critic input must be N x 6 x R x R, got {:?}", x.shape())));
        }
        let stages = self.cfg.resolutions();
        let stage = stages
            .iter()
            .position(|&r| r == h)
            .ok_or_else(|| Error::shape(format!("critic resolution {h} not in schedule")))?;
        let mut feat = self.from_scores[stage].forward(p, x).leaky_relu(LEAKY_SLOPE);
        for s in (0..=stage).rev() {
            feat = self.convs[s].forward(p, &feat).leaky_relu(LEAKY_SLOPE);
            if s > 0 {
                feat = nn::avg_pool(&feat, 2);
                if s == stage && alpha < 1.0 {
                    let skip = self.from_scores[s - 1]
                        .forward(p, &nn::avg_pool(x, 2))
                        .leaky_relu(LEAKY_SLOPE);
                    feat = feat.scale(alpha).add(&skip.scale(1.0 - alpha));
                }
            }
        }
        let r0 = self.cfg.start_resolution;
        let flat = feat.reshape(&[n, self.cfg.channels * r0 * r0]);
        Ok(self.head.forward(p, &flat).reshape(&[n]))
    }
}

/// `E[(‖∇D(x̂)‖₂ − 1)²]` with `x̂ = ε·real + (1−ε)·fake`, one `ε` per sample.
/// The result stays differentiable with respect to the critic's parameters.
pub fn gradient_penalty_with(
    critic: &dyn Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    eps: &[f64],
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::shape(format!(
            "real {:?} and fake {:?} batches differ",
            real.shape(),
            fake.shape()
        )));
    }
    let n = real.shape()[0];
    if eps.len() != n {
        return Err(Error::shape("one interpolation coefficient per sample"));
    }
    let mut eshape = vec![1; real.ndim()];
    eshape[0] = n;
    let e = Var::constant(Tensor::from_shape_vec(IxDyn(&eshape), eps.to_vec()).expect("shape"));
    let interp = real
        .detach()
        .mul(&e)
        .add(&fake.detach().mul(&e.neg().add_scalar(1.0)));
    // the interpolate is a leaf we differentiate with respect to
    let interp = Var::param(interp.into_value());
    let scores = critic(&interp)?;
    let g = grad(&scores.sum(), &[&interp], true).remove(0);
    let axes: Vec<usize> = (1..g.ndim()).collect();
    let norms = g.square().sum_axes(&axes).add_scalar(NORM_STABILISER).sqrt();
    Ok(norms.add_scalar(-1.0).square().mean())
}

pub fn gradient_penalty<R: Rng + ?Sized>(
    critic: &dyn Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    rng: &mut R,
) -> Result<Var> {
    let eps: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_with(critic, real, fake, &eps)
}

/// Values of every term of the critic objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CriticTerms {
    pub fake_mean: f64,
    pub real_mean: f64,
    pub penalty: f64,
    pub drift: f64,
    pub total: f64,
}

/// `E[D(fake)] − E[D(real)] + λ_gp·GP + λ_drift·E[D²]`, the drift taken
/// over the critic's outputs on both real and generated inputs.
pub fn critic_loss_with(
    critic: &dyn Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    eps: &[f64],
    lambda_gp: f64,
    lambda_drift: f64,
) -> Result<(Var, CriticTerms)> {
    let fake = fake.detach();
    let d_real = critic(real)?;
    let d_fake = critic(&fake)?;
    let fake_mean = d_fake.mean();
    let real_mean = d_real.mean();
    let penalty = gradient_penalty_with(critic, real, &fake, eps)?;
    let drift = d_real.square().sum().add(&d_fake.square().sum()).scale(1.0 / (d_real.len() + d_fake.len()) as f64);
    let terms = CriticTerms {
        fake_mean: ensure_finite(fake_mean.item(), "critic E[D(fake)]")?,
        real_mean: ensure_finite(real_mean.item(), "critic E[D(real)]")?,
        penalty: ensure_finite(penalty.item(), "gradient penalty")?,
        drift: ensure_finite(drift.item(), "drift term")?,
        total: 0.0,
    };
    let total = fake_mean
        .sub(&real_mean)
        .add(&penalty.scale(lambda_gp))
        .add(&drift.scale(lambda_drift));
    let total_v = ensure_finite(total.item(), "critic loss")?;
    Ok((total, CriticTerms { total: total_v, ..terms }))
}

pub fn critic_loss<R: Rng + ?Sized>(
    critic: &dyn Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    cfg: &MaskGanConfig,
    rng: &mut R,
) -> Result<(Var, CriticTerms)> {
    let eps: Vec<f64> = (0..real.shape()[0]).map(|_| rng.random::<f64>()).collect();
    critic_loss_with(critic, real, fake, &eps, cfg.lambda_gp, cfg.lambda_drift)
}

/// `−E[D(G(z))]`.
pub fn generator_loss_mask(critic: &dyn Fn(&Var) -> Result<Var>, fake: &Var) -> Result<Var> {
    let loss = critic(fake)?.mean().neg();
    ensure_finite(loss.item(), "generator loss")?;
    Ok(loss)
}

/// Standard-normal latent batch.
pub fn sample_latents<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Var {
    let z = Array2::from_shape_fn((n, dim), |_| StandardNormal.sample(&mut *rng));
    Var::constant(z.into_dyn())
}

/// Losses recorded for one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskGanStepLog {
    pub step: u64,
    pub resolution: usize,
    pub alpha: f64,
    pub critic_loss: f64,
    pub gen_loss: f64,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct GanTrainState {
    pub cfg: MaskGanConfig,
    pub generator: MaskGenerator,
    pub critic: MaskCritic,
    pub gen_params: ParamStore,
    pub gen_buffers: ParamStore,
    pub critic_params: ParamStore,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl GanTrainState {
    pub fn new(cfg: &MaskGanConfig, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_params = ParamStore::new();
        let mut gen_buffers = ParamStore::new();
        let generator = MaskGenerator::new(cfg, &mut gen_params, &mut gen_buffers, &mut init_rng)?;
        let mut critic_params = ParamStore::new();
        let critic = MaskCritic::new(cfg, &mut critic_params, &mut init_rng)?;
        let gen_opt = Adam::new(cfg.adam(), &gen_params);
        let critic_opt = Adam::new(cfg.adam(), &critic_params);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(GanTrainState {
            cfg: cfg.clone(),
            generator,
            critic,
            gen_params,
            gen_buffers,
            critic_params,
            gen_opt,
            critic_opt,
            step: 0,
            rng,
        })
    }

    pub fn schedule(&self) -> (usize, f64) {
        progressive_schedule(self.step, &self.cfg)
    }

    /// One critic update followed by one generator update. On any error the
    /// state is left exactly as it was.
    pub fn train_step(&mut self, real: &Tensor) -> Result<MaskGanStepLog> {
        let (res, alpha) = self.schedule();
        let rs = real.shape();
        if rs.len() != 4 || rs[1] != NUM_CLASSES || rs[2] != res || rs[3] != res {
            return Err(Error::shape(format!(
                "step {} trains at {res}x{res}, got a batch of shape {rs:?}",
                self.step
            )));
        }
        let n = rs[0];
        let mut rng = self.rng.clone();
        let real = Var::constant(real.clone());

        // critic
        let mut critic_params = self.critic_params.clone();
        let mut critic_opt = self.critic_opt.clone();
        let critic_loss_value = {
            let gp = self.gen_params.bind();
            let z = sample_latents(&mut rng, n, self.cfg.latent_dim);
            let mut scratch = Vec::new();
            let fake = no_grad(|| -> Result<Var> {
                let w = self.generator.map_latent(&gp, &z)?;
                self.generator.synthesize(&gp, &w, res, alpha, &mut NormMode::Train(&mut scratch))
            })?;
            let cp = critic_params.bind();
            let critic_fn = |x: &Var| self.critic.forward(&cp, x, alpha);
            let (loss, terms) = critic_loss(&critic_fn, &real, &fake, &self.cfg, &mut rng)?;
            let grads = cp.grads(&loss);
            check_grads(&grads, "critic gradient")?;
            critic_opt.update(&mut critic_params, &grads);
            terms.total
        };

        // generator, against the updated critic
        let mut gen_params = self.gen_params.clone();
        let mut gen_opt = self.gen_opt.clone();
        let mut stats = Vec::new();
        let gen_loss_value = {
            let gp = gen_params.bind();
            let cp = critic_params.bind();
            let z = sample_latents(&mut rng, n, self.cfg.latent_dim);
            let w = self.generator.map_latent(&gp, &z)?;
            let fake = self.generator.synthesize(&gp, &w, res, alpha, &mut NormMode::Train(&mut stats))?;
            let critic_fn = |x: &Var| self.critic.forward(&cp, x, alpha);
            let loss = generator_loss_mask(&critic_fn, &fake)?;
            let grads = gp.grads(&loss);
            check_grads(&grads, "generator gradient")?;
            gen_opt.update(&mut gen_params, &grads);
            loss.item()
        };

        let mut buffers = self.gen_buffers.clone();
        for (mean_id, var_id, mean, var) in stats {
            let m = BN_MOMENTUM;
            let run_m = buffers.get_mut(mean_id);
            *run_m = &*run_m * (1.0 - m) + &mean * m;
            let run_v = buffers.get_mut(var_id);
            *run_v = &*run_v * (1.0 - m) + &var * m;
        }

        let log = MaskGanStepLog {
            step: self.step,
            resolution: res,
            alpha,
            critic_loss: critic_loss_value,
            gen_loss: gen_loss_value,
        };
        self.critic_params = critic_params;
        self.critic_opt = critic_opt;
        self.gen_params = gen_params;
        self.gen_opt = gen_opt;
        self.gen_buffers = buffers;
        self.rng = rng;
        self.step += 1;
        Ok(log)
    }

    /// Score volumes at the target resolution for latents drawn from `seed`,
    /// using running batch-norm statistics.
    pub fn sample_scores(&self, n: usize, seed: u64) -> Result<Vec<ClassScoreVolume>> {
        sample_scores(&self.generator, &self.gen_params, &self.gen_buffers, n, seed)
    }

    pub fn sample_masks(&self, n: usize, seed: u64) -> Result<Vec<LabelMask>> {
        self.sample_scores(n, seed)?
            .iter()
            .map(decode_labels)
            .collect()
    }
}

pub fn sample_scores(
    generator: &MaskGenerator,
    params: &ParamStore,
    buffers: &ParamStore,
    n: usize,
    seed: u64,
) -> Result<Vec<ClassScoreVolume>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = &generator.cfg;
    let mut out = Vec::with_capacity(n);
    no_grad(|| -> Result<()> {
        let p = params.bind();
        // one latent at a time: samples do not depend on batch composition
        for _ in 0..n {
            let z = sample_latents(&mut rng, 1, cfg.latent_dim);
            let w = generator.map_latent(&p, &z)?;
            let scores = generator.synthesize(&p, &w, cfg.target_resolution, 1.0, &mut NormMode::Eval(buffers))?;
            let vol = scores
                .into_value()
                .index_axis_move(Axis(0), 0)
                .into_dimensionality()
                .expect("6×R×R");
            out.push(ClassScoreVolume::new(vol)?);
        }
        Ok(())
    })?;
    Ok(out)
}

fn check_grads(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Numeric(what.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskcodec::validate_mask;

    fn tiny_cfg() -> MaskGanConfig {
        MaskGanConfig {
            latent_dim: 8,
            style_dim: 8,
            mapping_depth: 2,
            channels: 4,
            target_resolution: 8,
            steps_per_resolution: 4,
            batch_size: 2,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let cfg = MaskGanConfig::default();
        assert_eq!(progressive_schedule(0, &cfg), (4, 1.0));
        assert_eq!(progressive_schedule(9_999, &cfg), (4, 1.0));
        assert_eq!(progressive_schedule(10_000, &cfg), (8, 0.0));
        assert_eq!(progressive_schedule(20_000, &cfg), (16, 0.0));
        assert_eq!(progressive_schedule(22_500, &cfg), (16, 0.5));
        assert_eq!(progressive_schedule(25_000, &cfg), (16, 1.0));
        assert_eq!(progressive_schedule(10_000_000, &cfg), (64, 1.0));
    }

    #[test]
    fn schedule_is_monotone_in_resolution() {
        let cfg = MaskGanConfig {
            steps_per_resolution: 7,
            target_resolution: 32,
            ..Default::default()
        };
        let mut last = 0;
        for step in 0..60 {
            let (r, a) = progressive_schedule(step, &cfg);
            assert!(r >= last);
            assert!((0.0..=1.0).contains(&a));
            last = r;
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = MaskGanConfig::default();
        cfg.target_resolution = 48;
        assert!(cfg.validate().is_err());
        cfg.target_resolution = 2;
        assert!(cfg.validate().is_err());
        cfg = MaskGanConfig { lambda_gp: -1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_final_mapping_layer_outputs_bias() {
        let cfg = tiny_cfg();
        let mut state = GanTrainState::new(&cfg, 3).unwrap();
        let last = state.generator.final_mapping_layer().clone();
        state.gen_params.get_mut(last.weight).fill(0.0);
        let bias = state.gen_params.get(last.bias).clone();
        let p = state.gen_params.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = sample_latents(&mut rng, 3, cfg.latent_dim);
        let w = state.generator.map_latent(&p, &z).unwrap();
        for row in w.value().outer_iter() {
            assert_eq!(row.to_owned(), bias);
        }
    }

    #[test]
    fn map_latent_rejects_wrong_dimension() {
        let cfg = tiny_cfg();
        let state = GanTrainState::new(&cfg, 3).unwrap();
        let p = state.gen_params.bind();
        let z = Var::zeros(&[1, cfg.latent_dim + 1]);
        assert!(matches!(state.generator.map_latent(&p, &z), Err(Error::Shape(_))));
    }

    #[test]
    fn synthesize_shapes_normalisation_and_fade() {
        let cfg = tiny_cfg();
        let state = GanTrainState::new(&cfg, 4).unwrap();
        let p = state.gen_params.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = sample_latents(&mut rng, 2, cfg.latent_dim);
        let w = state.generator.map_latent(&p, &z).unwrap();
        let eval = &mut NormMode::Eval(&state.gen_buffers);
        let s4 = state.generator.synthesize(&p, &w, 4, 1.0, eval).unwrap();
        assert_eq!(s4.shape(), &[2, 6, 4, 4]);
        let sums = s4.value().sum_axis(Axis(1));
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));

        let a0 = state.generator.synthesize(&p, &w, 8, 0.0, eval).unwrap();
        let a1 = state.generator.synthesize(&p, &w, 8, 1.0, eval).unwrap();
        assert_ne!(a0.value(), a1.value());
        let again = state.generator.synthesize(&p, &w, 8, 0.0, eval).unwrap();
        assert_eq!(a0.value(), again.value());

        assert!(matches!(state.generator.synthesize(&p, &w, 16, 1.0, eval), Err(Error::Config(_))));
        assert!(matches!(state.generator.synthesize(&p, &w, 8, 1.5, eval), Err(Error::Config(_))));
    }

    #[test]
    fn mapped_styles_are_finite() {
        let cfg = MaskGanConfig { channels: 4, target_resolution: 4, ..Default::default() };
        let state = GanTrainState::new(&cfg, 5).unwrap();
        let p = state.gen_params.bind();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sample_latents(&mut rng, 1000, cfg.latent_dim);
        let w = no_grad(|| state.generator.map_latent(&p, &z)).unwrap();
        assert_eq!(w.shape(), &[1000, 512]);
        assert!(w.value().iter().all(|v| v.is_finite()));
    }

    fn linear_critic(scale: f64) -> impl Fn(&Var) -> Result<Var> {
        move |x: &Var| {
            let per = (x.len() / x.shape()[0]) as f64;
            let axes: Vec<usize> = (1..x.ndim()).collect();
            let n = x.shape()[0];
            Ok(x.sum_axes(&axes).reshape(&[n]).scale(scale / per.sqrt()))
        }
    }

    #[test]
    fn penalty_analytic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let real = Var::constant(init_normal(&mut rng, &[3, 6, 4, 4], 1.0));
        let fake = Var::constant(init_normal(&mut rng, &[3, 6, 4, 4], 1.0));
        let unit = gradient_penalty(&linear_critic(1.0), &real, &fake, &mut rng).unwrap();
        assert!(unit.item().abs() < 1e-6);
        let double = gradient_penalty(&linear_critic(2.0), &real, &fake, &mut rng).unwrap();
        assert!((double.item() - 1.0).abs() < 1e-6);
        let constant = |x: &Var| Ok(Var::scalar(0.7).broadcast_to(&[x.shape()[0]]));
        let flat = gradient_penalty(&constant, &real, &fake, &mut rng).unwrap();
        assert!((flat.item() - 1.0).abs() < 1e-6);
        let short = Var::zeros(&[2, 6, 4, 4]);
        assert!(matches!(
            gradient_penalty(&constant, &real, &short, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn critic_loss_analytic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let real = Var::constant(init_normal(&mut rng, &[2, 6, 4, 4], 1.0));
        let fake = Var::constant(init_normal(&mut rng, &[2, 6, 4, 4], 1.0));
        let eps = [0.3, 0.8];
        let zero = |x: &Var| Ok(Var::zeros(&[x.shape()[0]]));
        let (l, _) = critic_loss_with(&zero, &real, &fake, &eps, 10.0, 0.001).unwrap();
        assert!((l.item() - 10.0).abs() < 1e-6);

        let c = 1.7;
        let constant = move |x: &Var| Ok(Var::scalar(c).broadcast_to(&[x.shape()[0]]));
        let (l, _) = critic_loss_with(&constant, &real, &fake, &eps, 0.0, 1.0).unwrap();
        assert!((l.item() - c * c).abs() < 1e-12);

        // D = 1 on the real batch, 0 on the fake batch
        let real_id = real.value().clone();
        let split = move |x: &Var| {
            let v = if x.value() == &real_id { 1.0 } else { 0.0 };
            Ok(Var::scalar(v).broadcast_to(&[x.shape()[0]]))
        };
        let (l, t) = critic_loss_with(&split, &real, &fake, &eps, 0.0, 0.0).unwrap();
        assert_eq!(l.item(), -1.0);
        assert_eq!((t.real_mean, t.fake_mean), (1.0, 0.0));
    }

    #[test]
    fn critic_loss_names_non_finite_term() {
        let real = Var::zeros(&[1, 6, 4, 4]);
        let fake = Var::zeros(&[1, 6, 4, 4]);
        let nan = |x: &Var| Ok(Var::scalar(f64::NAN).broadcast_to(&[x.shape()[0]]));
        match critic_loss_with(&nan, &real, &fake, &[0.5], 10.0, 0.001) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("E[D(fake)]"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn generator_loss_cases() {
        let fake = Var::zeros(&[4, 6, 4, 4]);
        let constant = |x: &Var| Ok(Var::scalar(0.25).broadcast_to(&[x.shape()[0]]));
        assert_eq!(generator_loss_mask(&constant, &fake).unwrap().item(), -0.25);
        let sum = |x: &Var| Ok(x.sum_axes(&[1, 2, 3]).reshape(&[x.shape()[0]]));
        assert_eq!(generator_loss_mask(&sum, &fake).unwrap().item(), 0.0);
    }

    fn real_batch(n: usize, res: usize) -> Tensor {
        let mut t = Tensor::zeros(IxDyn(&[n, 6, res, res]));
        for i in 0..n {
            for y in 0..res {
                for x in 0..res {
                    let label = if (x + y + i) % 5 == 0 { 5 } else { (y * 3 / res) + 1 };
                    t[[i, label, y, x]] = 1.0;
                }
            }
        }
        t
    }

    #[test]
    fn train_step_determinism_and_zero_lr() {
        let cfg = tiny_cfg();
        let mut a = GanTrainState::new(&cfg, 11).unwrap();
        let mut b = GanTrainState::new(&cfg, 11).unwrap();
        for _ in 0..3 {
            let la = a.train_step(&real_batch(2, 4)).unwrap();
            let lb = b.train_step(&real_batch(2, 4)).unwrap();
            assert_eq!(la, lb);
        }
        assert_eq!(a, b);

        let frozen_cfg = MaskGanConfig { lr: 0.0, ..tiny_cfg() };
        let mut s = GanTrainState::new(&frozen_cfg, 12).unwrap();
        let before = (s.gen_params.clone(), s.critic_params.clone());
        s.train_step(&real_batch(2, 4)).unwrap();
        assert_eq!((s.gen_params.clone(), s.critic_params.clone()), before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn train_step_rejects_wrong_resolution_without_advancing() {
        let cfg = tiny_cfg();
        let mut s = GanTrainState::new(&cfg, 13).unwrap();
        let before = s.clone();
        assert!(matches!(s.train_step(&real_batch(2, 8)), Err(Error::Shape(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn untrained_samples_are_valid_masks() {
        let cfg = tiny_cfg();
        let s = GanTrainState::new(&cfg, 14).unwrap();
        let masks = s.sample_masks(3, 99).unwrap();
        assert_eq!(masks.len(), 3);
        for m in &masks {
            assert_eq!((m.height(), m.width()), (8, 8));
            assert!(validate_mask(m).valid);
        }
        assert_eq!(masks, s.sample_masks(3, 99).unwrap());
    }
}
