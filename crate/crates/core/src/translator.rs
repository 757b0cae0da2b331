//! Stage two: mask-conditioned image translation with a UNet whose skip
//! connections pass through LIA and whose bottleneck carries a DWMH block,
//! a conditional patch critic, and the three-part generator objective.

use lungsynth_autodiff::nn;
use lungsynth_autodiff::{no_grad, Adam, AdamConfig, Bound, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DwmhParams, LiaParams};
use crate::error::{ensure_finite, Error, Result};
use crate::layers::{init_uniform, Affine, Conv, LEAKY_SLOPE, NORM_EPS};
use crate::maskcodec::NUM_CLASSES;

const LOGIT_CLAMP: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslatorConfig {
    pub resolution: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub heads: usize,
    pub window: usize,
    pub critic_width: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub decay_start: usize,
    pub lambda_l1: f64,
    pub lambda_perceptual: f64,
    pub feature_widths: Vec<usize>,
    pub feature_seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            resolution: 256,
            base_width: 32,
            max_width: 256,
            heads: 4,
            window: 4,
            critic_width: 64,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 200,
            decay_start: 100,
            lambda_l1: 200.0,
            lambda_perceptual: 10.0,
            feature_widths: vec![16, 32, 64],
            feature_seed: 7,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.resolution.is_power_of_two() || self.resolution < 8 {
            return Err(Error::config("translator resolution must be a power of two >= 8"));
        }
        if self.base_width == 0 || self.max_width < self.base_width || self.critic_width == 0 {
            return Err(Error::config("translator widths must be positive with max_width >= base_width"));
        }
        if self.lambda_l1 < 0.0 || self.lambda_perceptual < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.decay_start > self.epochs {
            return Err(Error::config("decay_start exceeds epochs"));
        }
        if self.feature_widths.is_empty() {
            return Err(Error::config("feature network needs at least one stage"));
        }
        let bottleneck = self.width(self.depth());
        if self.heads == 0 || bottleneck % self.heads != 0 || self.window == 0 {
            return Err(Error::config(format!(
                "{} heads do not divide the bottleneck width {bottleneck}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Number of stride-2 levels: the bottleneck sits at 4×4.
    pub fn depth(&self) -> usize {
        (self.resolution.trailing_zeros() as usize).saturating_sub(2).max(1)
    }

    pub fn width(&self, level: usize) -> usize {
        (self.base_width << level.min(16)).min(self.max_width)
    }

    pub fn weights(&self) -> TranslatorLossWeights {
        TranslatorLossWeights {
            lambda_l1: self.lambda_l1,
            lambda_perceptual: self.lambda_perceptual,
        }
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

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorLossWeights {
    pub lambda_l1: f64,
    pub lambda_perceptual: f64,
}

impl Default for TranslatorLossWeights {
    fn default() -> Self {
        TranslatorConfig::default().weights()
    }
}

/// Convolution followed by instance norm, affine and LeakyReLU.
#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    conv: Conv,
    affine: Affine,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, k, stride, pad, rng),
            affine: Affine::new(store, &format!("{name}.norm"), cout),
        }
    }

    fn forward(&self, p: &Bound, x: &Var) -> Var {
        let h = nn::instance_norm(&self.conv.forward(p, x), NORM_EPS);
        self.affine.forward(p, &h).leaky_relu(LEAKY_SLOPE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorGenerator {
    pub cfg: TranslatorConfig,
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    ups: Vec<ConvBlock>,
    fuses: Vec<ConvBlock>,
    pub lias: Vec<LiaParams>,
    pub dwmh: DwmhParams,
    head: Conv,
}

impl TranslatorGenerator {
    pub fn new<R: Rng + ?Sized>(cfg: &TranslatorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.depth();
        let stem = ConvBlock::new(store, "gen.stem", NUM_CLASSES, cfg.width(0), 3, 1, 1, rng);
        let downs = (1..=depth)
            .map(|i| ConvBlock::new(store, &format!("gen.down{i}"), cfg.width(i - 1), cfg.width(i), 4, 2, 1, rng))
            .collect();
        let bottleneck = cfg.width(depth);
        let window = cfg.window.min(cfg.resolution >> depth);
        let dwmh = DwmhParams::new(store, "gen.dwmh", bottleneck, cfg.heads, window, rng)?;
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut lias = Vec::new();
        for i in 0..depth {
            ups.push(ConvBlock::new(store, &format!("gen.up{i}"), cfg.width(i + 1), cfg.width(i), 3, 1, 1, rng));
            fuses.push(ConvBlock::new(store, &format!("gen.fuse{i}"), 2 * cfg.width(i), cfg.width(i), 3, 1, 1, rng));
            lias.push(LiaParams::new(store, &format!("gen.lia{i}"), cfg.width(i), rng));
        }
        let head = Conv::new(store, "gen.head", cfg.width(0), 1, 1, 1, 0, rng);
        Ok(TranslatorGenerator {
            cfg: cfg.clone(),
            stem,
            downs,
            ups,
            fuses,
            lias,
            dwmh,
            head,
        })
    }

    pub fn depth(&self) -> usize {
        self.downs.len()
    }

    fn check_input(&self, cond: &Var) -> Result<()> {
        if cond.ndim() != 4 || cond.shape()[1] != NUM_CLASSES {
            return Err(Error::shape(format!("condition must be N x 6 x H x W, got {:?}", cond.shape())));
        }
        let (h, w) = (cond.shape()[2], cond.shape()[3]);
        let min = 1usize << self.depth();
        if !h.is_power_of_two() || !w.is_power_of_two() || h < min || w < min {
            return Err(Error::shape(format!(
                "condition {h}x{w} must have power-of-two sides of at least {min}"
            )));
        }
        Ok(())
    }

    /// `N×6×H×W` one-hot condition to an `N×1×H×W` image in `[−1,1]`.
    pub fn forward(&self, p: &Bound, cond: &Var) -> Result<Var> {
        self.run(p, cond, true)
    }

    /// The same network with LIA and DWMH bypassed.
    pub fn forward_plain(&self, p: &Bound, cond: &Var) -> Result<Var> {
        self.run(p, cond, false)
    }

    fn run(&self, p: &Bound, cond: &Var, attention: bool) -> Result<Var> {
        self.check_input(cond)?;
        let mut skips = vec![self.stem.forward(p, cond)];
        for down in &self.downs {
            let next = down.forward(p, skips.last().expect("stem"));
            skips.push(next);
        }
        let mut d = skips.pop().expect("bottleneck");
        if attention {
            d = self.dwmh.forward(p, &d)?;
        }
        for i in (0..self.depth()).rev() {
            let up = self.ups[i].forward(p, &nn::upsample_nearest(&d, 2));
            let skip = if attention {
                self.lias[i].forward(p, &skips[i])?
            } else {
                skips[i].clone()
            };
            d = self.fuses[i].forward(p, &nn::concat_channels(&skip, &up));
        }
        Ok(self.head.forward(p, &d).tanh())
    }

    /// Parameters that make every LIA block pass its input through and the
    /// DWMH block return its input: encoder channel 0 and every heatmap are
    /// driven deep into sigmoid saturation, and γ is zeroed.
    pub fn saturate_attention(&self, store: &mut ParamStore) {
        for (i, lia) in self.lias.iter().enumerate() {
            store.get_mut(lia.restore.weight).fill(0.0);
            store.get_mut(lia.restore.bias).fill(50.0);
            let block = if i == 0 { &self.stem } else { &self.downs[i - 1] };
            store.get_mut(block.affine.gamma)[[0]] = 0.0;
            store.get_mut(block.affine.beta)[[0]] = 50.0;
        }
        store.get_mut(self.dwmh.gamma).fill(0.0);
    }
}

/// Conditional patch critic over the concatenated (one-hot mask, image) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCritic {
    first: Conv,
    second: ConvBlock,
    last: Conv,
}

impl PatchCritic {
    pub fn new<R: Rng + ?Sized>(cfg: &TranslatorConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let w = cfg.critic_width;
        PatchCritic {
            first: Conv::new(store, "critic.c1", NUM_CLASSES + 1, w, 4, 2, 1, rng),
            second: ConvBlock::new(store, "critic.c2", w, 2 * w, 4, 2, 1, rng),
            last: Conv::new(store, "critic.c3", 2 * w, 1, 4, 1, 1, rng),
        }
    }

    /// Logit grid, one score per receptive-field patch.
    pub fn forward(&self, p: &Bound, cond: &Var, image: &Var) -> Result<Var> {
        if cond.ndim() != 4 || image.ndim() != 4 || cond.shape()[0] != image.shape()[0] || cond.shape()[2..] != image.shape()[2..] {
            return Err(Error::shape(format!(
                "critic pair mismatch: condition {:?}, image {:?}",
                cond.shape(),
                image.shape()
            )));
        }
        if image.shape()[2] < 8 || image.shape()[3] < 8 {
            return Err(Error::shape("patch critic needs at least 8x8 inputs"));
        }
        let x = nn::concat_channels(cond, image);
        let h = self.first.forward(p, &x).leaky_relu(LEAKY_SLOPE);
        let h = self.second.forward(p, &h);
        Ok(self.last.forward(p, &h))
    }
}

/// Fixed multi-stage feature extractor used by the perceptual loss and as
/// the embedder for distribution distances.
pub trait FeatureNetwork {
    /// One feature map per stage, `N×C_l×H_l×W_l`.
    fn stages(&self, x: &Var) -> Vec<Var>;
}

/// Single stage that returns its input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureNetwork for IdentityFeatures {
    fn stages(&self, x: &Var) -> Vec<Var> {
        vec![x.clone()]
    }
}

/// Stack of seeded 3×3 conv, LeakyReLU and 2× average-pool stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFeatures {
    layers: Vec<(Tensor, Tensor)>,
}

impl ConvFeatures {
    pub fn new(widths: &[usize], in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let layers = widths
            .iter()
            .map(|&c| {
                let fan_in = cin * 9;
                // ±√3 scaling keeps activations near unit variance through the stack
                let w = init_uniform(&mut rng, &[c, cin, 3, 3], fan_in) * 3f64.sqrt();
                let b = init_uniform(&mut rng, &[c], fan_in);
                cin = c;
                (w, b)
            })
            .collect();
        ConvFeatures { layers }
    }

    pub fn from_config(cfg: &TranslatorConfig) -> Self {
        ConvFeatures::new(&cfg.feature_widths, 1, cfg.feature_seed)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |(w, _)| w.shape()[0])
    }
}

impl FeatureNetwork for ConvFeatures {
    fn stages(&self, x: &Var) -> Vec<Var> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            h = nn::conv2d(&h, &Var::constant(w.clone()), Some(&Var::constant(b.clone())), 1, 1).leaky_relu(LEAKY_SLOPE);
            if h.shape()[2] >= 2 && h.shape()[3] >= 2 {
                h = nn::avg_pool(&h, 2);
            }
            out.push(h.clone());
        }
        out
    }
}

fn same_shape(a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(y: &Var, y_hat: &Var) -> Result<Var> {
    same_shape(y, y_hat)?;
    Ok(y.sub(y_hat).abs().mean())
}

/// `Σ_l mean|φ_l(y) − φ_l(ŷ)|`.
pub fn perceptual_loss(y: &Var, y_hat: &Var, phi: &dyn FeatureNetwork) -> Result<Var> {
    same_shape(y, y_hat)?;
    let a = phi.stages(y);
    let b = phi.stages(y_hat);
    if a.is_empty() {
        return Err(Error::config("feature network has no stages"));
    }
    let mut total = Var::scalar(0.0);
    for (fa, fb) in a.iter().zip(&b) {
        total = total.add(&fa.sub(fb).abs().mean());
    }
    Ok(total)
}

fn softplus(x: &Var) -> Var {
    x.relu().add(&x.abs().neg().exp().add_scalar(1.0).ln())
}

/// Mean binary cross-entropy of logits against an all-real or all-fake target.
pub fn bce_with_logits(logits: &Var, real: bool) -> Var {
    let l = logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    if real {
        softplus(&l.neg()).mean()
    } else {
        softplus(&l).mean()
    }
}

/// `(critic_loss, gen_adv_loss)` from critic logits on the real and the
/// generated pair.
pub fn adversarial_terms(real_logits: &Var, fake_logits: &Var) -> Result<(Var, Var)> {
    let critic = bce_with_logits(real_logits, true).add(&bce_with_logits(fake_logits, false));
    let gen = bce_with_logits(fake_logits, true);
    ensure_finite(critic.item(), "critic adversarial loss")?;
    ensure_finite(gen.item(), "generator adversarial loss")?;
    Ok((critic, gen))
}

pub fn adversarial_loss_translator(
    critic: &PatchCritic,
    p: &Bound,
    cond: &Var,
    y_real: &Var,
    y_hat: &Var,
) -> Result<(Var, Var)> {
    same_shape(y_real, y_hat)?;
    let real = critic.forward(p, cond, y_real)?;
    let fake = critic.forward(p, cond, y_hat)?;
    adversarial_terms(&real, &fake)
}

/// Component values of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub adversarial: f64,
    pub l1: f64,
    pub perceptual: f64,
}

pub fn total_generator_loss(parts: &LossParts, w: &TranslatorLossWeights) -> Result<f64> {
    ensure_finite(parts.adversarial, "adversarial part")?;
    ensure_finite(parts.l1, "L1 part")?;
    ensure_finite(parts.perceptual, "perceptual part")?;
    Ok(parts.adversarial + w.lambda_l1 * parts.l1 + w.lambda_perceptual * parts.perceptual)
}

/// Differentiable form of [`total_generator_loss`].
pub fn total_generator_loss_var(adversarial: &Var, l1: &Var, perceptual: &Var, w: &TranslatorLossWeights) -> Result<Var> {
    total_generator_loss(
        &LossParts {
            adversarial: adversarial.item(),
            l1: l1.item(),
            perceptual: perceptual.item(),
        },
        w,
    )?;
    Ok(adversarial
        .add(&l1.scale(w.lambda_l1))
        .add(&perceptual.scale(w.lambda_perceptual)))
}

/// Constant until `decay_start`, then linear to zero at `epochs`.
pub fn lr_schedule_translator(epoch: usize, cfg: &TranslatorConfig) -> f64 {
    if epoch < cfg.decay_start {
        return cfg.lr;
    }
    let span = cfg.epochs.saturating_sub(cfg.decay_start);
    if span == 0 {
        return 0.0;
    }
    let done = (epoch - cfg.decay_start).min(span) as f64;
    cfg.lr * (1.0 - done / span as f64)
}

/// One conditioning mask with its target image.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    /// `6×H×W` one-hot volume.
    pub cond: Tensor,
    /// `1×H×W` in `[−1,1]`.
    pub image: Tensor,
}

fn stack(items: &[&Tensor]) -> Tensor {
    let views: Vec<_> = items.iter().map(|t| t.view()).collect();
    ndarray::stack(ndarray::Axis(0), &views).expect("uniform sample shapes")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TranslatorStepLog {
    pub epoch: usize,
    pub step: u64,
    pub adversarial: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub critic_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorState {
    pub cfg: TranslatorConfig,
    pub generator: TranslatorGenerator,
    pub critic: PatchCritic,
    pub features: ConvFeatures,
    pub gen_params: ParamStore,
    pub critic_params: ParamStore,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TranslatorState {
    pub fn new(cfg: &TranslatorConfig, seed: u64) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let mut gen_params = ParamStore::new();
        let generator = TranslatorGenerator::new(cfg, &mut gen_params, &mut init)?;
        let mut critic_params = ParamStore::new();
        let critic = PatchCritic::new(cfg, &mut critic_params, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Ok(TranslatorState {
            cfg: cfg.clone(),
            gen_opt: Adam::new(cfg.adam(), &gen_params),
            critic_opt: Adam::new(cfg.adam(), &critic_params),
            features: ConvFeatures::from_config(cfg),
            generator,
            critic,
            gen_params,
            critic_params,
            step: 0,
            rng,
        })
    }

    /// Generated images for a batch of `6×H×W` conditions.
    pub fn translate(&self, conds: &[&Tensor]) -> Result<Tensor> {
        if conds.is_empty() {
            return Err(Error::EmptyInput);
        }
        no_grad(|| {
            let p = self.gen_params.bind();
            Ok(self.generator.forward(&p, &Var::constant(stack(conds)))?.into_value())
        })
    }

    /// One critic update then one generator update at learning rate `lr`.
    /// Errors leave the state untouched.
    pub fn train_step(&mut self, batch: &[&PairedSample], epoch: usize) -> Result<TranslatorStepLog> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let r = self.cfg.resolution;
        for s in batch {
            if s.cond.shape() != [NUM_CLASSES, r, r] || s.image.shape() != [1, r, r] {
                return Err(Error::shape(format!(
                    "paired sample shapes {:?}/{:?} do not match resolution {r}",
                    s.cond.shape(),
                    s.image.shape()
                )));
            }
        }
        let lr = lr_schedule_translator(epoch, &self.cfg);
        let cond = Var::constant(stack(&batch.iter().map(|s| &s.cond).collect::<Vec<_>>()));
        let real = Var::constant(stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>()));

        let mut critic_params = self.critic_params.clone();
        let mut critic_opt = self.critic_opt.clone();
        critic_opt.set_lr(lr);
        let gp = self.gen_params.bind();
        let fake = self.generator.forward(&gp, &cond)?;
        let critic_loss = {
            let cp = critic_params.bind();
            let (loss, _) = adversarial_loss_translator(&self.critic, &cp, &cond, &real, &fake.detach())?;
            let grads = cp.grads(&loss);
            check_grads(&grads, "critic gradient")?;
            critic_opt.update(&mut critic_params, &grads);
            loss.item()
        };

        let mut gen_params = self.gen_params.clone();
        let mut gen_opt = self.gen_opt.clone();
        gen_opt.set_lr(lr);
        let cp = critic_params.bind();
        let fake_logits = self.critic.forward(&cp, &cond, &fake)?;
        let adv = bce_with_logits(&fake_logits, true);
        let l1 = l1_loss(&real, &fake)?;
        let perc = perceptual_loss(&real, &fake, &self.features)?;
        let total = total_generator_loss_var(&adv, &l1, &perc, &self.cfg.weights())?;
        let grads = gp.grads(&total);
        check_grads(&grads, "generator gradient")?;
        gen_opt.update(&mut gen_params, &grads);

        let log = TranslatorStepLog {
            epoch,
            step: self.step,
            adversarial: adv.item(),
            l1: l1.item(),
            perceptual: perc.item(),
            total: total.item(),
            critic_loss,
        };
        self.critic_params = critic_params;
        self.critic_opt = critic_opt;
        self.gen_params = gen_params;
        self.gen_opt = gen_opt;
        self.step += 1;
        Ok(log)
    }

    /// Trains for `steps` single-sample steps, shuffling the data each epoch.
    /// The epoch counter advances every `data.len()` steps.
    pub fn train(&mut self, data: &[PairedSample], steps: u64, mut log: impl FnMut(&TranslatorStepLog)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = data.len() as u64;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..steps {
            let epoch = (self.step / n) as usize;
            let pos = (self.step % n) as usize;
            // the permutation of an epoch depends only on (seed, epoch)
            let mut perm_rng = self.rng.clone();
            perm_rng.set_word_pos(0);
            perm_rng.set_stream(2 + epoch as u64);
            order.sort_unstable();
            order.shuffle(&mut perm_rng);
            let entry = self.train_step(&[&data[order[pos]]], epoch)?;
            log(&entry);
        }
        Ok(())
    }
}

fn check_grads(grads: &[Tensor], what: &str) -> Result<()> {
    if grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Numeric(what.into()))
    }
}

/// Mean L1 of the generator over `data`.
pub fn mean_l1(state: &TranslatorState, data: &[PairedSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for s in data {
        let out = state.translate(&[&s.cond])?;
        let target = s.image.clone().insert_axis(ndarray::Axis(0));
        total += (&out - &target).mapv(f64::abs).mean().unwrap_or(0.0);
    }
    Ok(total / data.len() as f64)
}
