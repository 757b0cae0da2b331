//! Soft pooling, local importance attention (LIA) and dynamically weighted
//! multi-head window attention (DWMH).
//!
//! All operators act on batched `N×C×H×W` graph values so that they can be
//! trained and gradient-checked; thin wrappers accept single `C×H×W` maps.

use std::rc::Rc;

use lungsynth_autodiff::nn::{self, cached_map, dims4};
use lungsynth_autodiff::{no_grad, Bound, ParamId, ParamStore, SparseMap, Tensor, Var};
use ndarray::{Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{init_uniform, Conv};

/// Single `C×H×W` feature map.
pub type FeatureMap = Array3<f64>;

pub const SOFTPOOL_KERNEL: usize = 7;
pub const SOFTPOOL_STRIDE: usize = 3;

pub fn to_batch(x: &FeatureMap) -> Var {
    Var::constant(x.clone().insert_axis(Axis(0)).into_dyn())
}

pub fn from_batch(v: &Var) -> FeatureMap {
    v.value()
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("C×H×W")
}

fn pool_windows_map(n: usize, c: usize, h: usize, w: usize, k: usize, s: usize) -> Rc<SparseMap> {
    let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
    let kk = k * k;
    cached_map(format!("poolwin:{n}:{c}:{h}:{w}:{k}:{s}"), || {
        SparseMap::gather(&[n, c, h, w], &[n, c, ho, wo, kk], |i| {
            let (nc, rest) = (i / (ho * wo * kk), i % (ho * wo * kk));
            let (oy, ox, t) = (rest / (wo * kk), (rest / kk) % wo, rest % kk);
            Some((nc * h + oy * s + t / k) * w + ox * s + t % k)
        })
    })
}

/// `AvgPool(x·eˣ) / AvgPool(eˣ)` over `kernel`×`kernel` windows, no padding.
///
/// Evaluated as `m + Σ e^(x−m)(x−m) / Σ e^(x−m)` with `m` the (constant)
/// window maximum. This is the same function for every `m`, never
/// overflows, and returns a constant window exactly.
pub fn soft_pool(x: &Var, kernel: usize, stride: usize) -> Result<Var> {
    let (n, c, h, w) = dims4(x);
    if kernel == 0 || stride == 0 {
        return Err(Error::config("soft pool kernel and stride must be positive"));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(format!(
            "soft pool kernel {kernel} leaves no windows on a {h}x{w} map"
        )));
    }
    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let windows = x.sparse(&pool_windows_map(n, c, h, w, kernel, stride));
    let peak = windows
        .value()
        .map_axis(Axis(4), |v| v.fold(f64::NEG_INFINITY, |m, &a| m.max(a)))
        .insert_axis(Axis(4));
    let peak = Var::constant(peak);
    let shifted = windows.sub(&peak);
    let weights = shifted.exp();
    let num = shifted.mul(&weights).sum_axes(&[4]);
    let den = weights.sum_axes(&[4]);
    Ok(num.div(&den).add(&peak).reshape(&[n, c, ho, wo]))
}

/// [`soft_pool`] on a single feature map.
pub fn soft_pool_map(x: &FeatureMap, kernel: usize, stride: usize) -> Result<FeatureMap> {
    no_grad(|| soft_pool(&to_batch(x), kernel, stride).map(|v| from_batch(&v)))
}

/// Bilinear resize with half-pixel centres.
pub fn bilinear_upsample(x: &Var, target_h: usize, target_w: usize) -> Result<Var> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("bilinear target dimensions must be at least 1"));
    }
    let (_, _, h, w) = dims4(x);
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear source is empty"));
    }
    Ok(nn::bilinear_resize(x, target_h, target_w))
}

pub fn bilinear_upsample_map(x: &FeatureMap, target_h: usize, target_w: usize) -> Result<FeatureMap> {
    no_grad(|| bilinear_upsample(&to_batch(x), target_h, target_w).map(|v| from_batch(&v)))
}

/// Graph values for one LIA block's convolutions, `(weight, bias)` pairs.
#[derive(Clone, Debug)]
pub struct LiaWeights {
    pub compress: (Var, Var),
    pub down: (Var, Var),
    pub restore: (Var, Var),
}

/// Stored parameters of one LIA block.
#[derive(Clone, Debug, PartialEq)]
pub struct LiaParams {
    pub compress: Conv,
    pub down: Conv,
    pub restore: Conv,
    pub kernel: usize,
    pub stride: usize,
}

impl LiaParams {
    /// Compression to `max(C/4, 1)` channels; soft pool 7/3.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let reduced = (channels / 4).max(1);
        LiaParams {
            compress: Conv::new(store, &format!("{name}.compress"), channels, reduced, 1, 1, 0, rng),
            down: Conv::new(store, &format!("{name}.down"), reduced, reduced, 3, 2, 1, rng),
            restore: Conv::new(store, &format!("{name}.restore"), reduced, 1, 3, 1, 1, rng),
            kernel: SOFTPOOL_KERNEL,
            stride: SOFTPOOL_STRIDE,
        }
    }

    pub fn bind(&self, p: &Bound) -> LiaWeights {
        let pair = |c: &Conv| (p.get(c.weight).clone(), p.get(c.bias).clone());
        LiaWeights {
            compress: pair(&self.compress),
            down: pair(&self.down),
            restore: pair(&self.restore),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        lia_forward(x, &self.bind(p), self.kernel, self.stride)
    }
}

/// Importance heatmap in `[0,1]`, shape `N×1×H×W`.
pub fn lia_heatmap(x: &Var, wt: &LiaWeights, kernel: usize, stride: usize) -> Result<Var> {
    let (_, _, h, w) = dims4(x);
    if h < 2 || w < 2 {
        return Err(Error::shape(format!(
            "LIA needs at least 2x2 features to reflect-pad, got {h}x{w}"
        )));
    }
    let compressed = nn::conv2d(x, &wt.compress.0, Some(&wt.compress.1), 1, 0);
    let (ph, pw) = (kernel.saturating_sub(h), kernel.saturating_sub(w));
    let padded = nn::reflect_pad(&compressed, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);
    let pooled = soft_pool(&padded, kernel, stride)?;
    let down = nn::conv2d(&pooled, &wt.down.0, Some(&wt.down.1), 2, 1);
    let restored = nn::conv2d(&down, &wt.restore.0, Some(&wt.restore.1), 1, 1);
    bilinear_upsample(&restored.sigmoid(), h, w)
}

/// `x ⊙ W ⊙ g`: heatmap `W` and gate `g = σ(x[:, 0])` are broadcast over channels.
pub fn lia_forward(x: &Var, wt: &LiaWeights, kernel: usize, stride: usize) -> Result<Var> {
    let heat = lia_heatmap(x, wt, kernel, stride)?;
    let gate = nn::narrow_channels(x, 0, 1).sigmoid();
    Ok(x.mul(&heat).mul(&gate))
}

/// Graph values for one DWMH block.
#[derive(Clone, Debug)]
pub struct DwmhWeights {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    /// One scalar per head.
    pub head_weights: Var,
    /// Residual scale.
    pub gamma: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwmhParams {
    pub query: Conv,
    pub key: Conv,
    pub value: Conv,
    pub head_weights: ParamId,
    pub gamma: ParamId,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl DwmhParams {
    /// Head weights start at 1 and the residual scale at exactly 0.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_dwmh_config(channels, heads, window)?;
        Ok(DwmhParams {
            query: Conv::new(store, &format!("{name}.query"), channels, channels, 1, 1, 0, rng),
            key: Conv::new(store, &format!("{name}.key"), channels, channels, 1, 1, 0, rng),
            value: Conv::new(store, &format!("{name}.value"), channels, channels, 1, 1, 0, rng),
            head_weights: store.add(format!("{name}.head_weights"), Tensor::ones(ndarray::IxDyn(&[heads]))),
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(ndarray::IxDyn(&[1]))),
            channels,
            heads,
            window,
        })
    }

    pub fn bind(&self, p: &Bound) -> DwmhWeights {
        let pair = |c: &Conv| (p.get(c.weight).clone(), p.get(c.bias).clone());
        DwmhWeights {
            query: pair(&self.query),
            key: pair(&self.key),
            value: pair(&self.value),
            head_weights: p.get(self.head_weights).clone(),
            gamma: p.get(self.gamma).clone(),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        dwmh_forward(x, &self.bind(p), self.heads, self.window)
    }
}

fn check_dwmh_config(channels: usize, heads: usize, window: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::config(format!(
            "{channels} channels cannot be split into {heads} heads"
        )));
    }
    if window == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    Ok(())
}

fn padded_extent(len: usize, s: usize) -> usize {
    len.div_ceil(s) * s
}

fn partition_map(n: usize, c: usize, h: usize, w: usize, s: usize) -> Rc<SparseMap> {
    cached_map(format!("winpart:{n}:{c}:{h}:{w}:{s}"), || {
        let (ny, nx) = (h / s, w / s);
        let per = c * s * s;
        SparseMap::gather(&[n, c, h, w], &[n * ny * nx, c, s, s], |i| {
            let (b, rest) = (i / per, i % per);
            let (ni, win) = (b / (ny * nx), b % (ny * nx));
            let (ci, ly, lx) = (rest / (s * s), (rest / s) % s, rest % s);
            let (y, x) = ((win / nx) * s + ly, (win % nx) * s + lx);
            Some(((ni * c + ci) * h + y) * w + x)
        })
    })
}

/// Reflect-pads (bottom/right) to a multiple of `s` and cuts row-major
/// windows: `N×C×H×W → (N·⌈H/s⌉·⌈W/s⌉)×C×s×s`.
pub fn partition_windows(x: &Var, s: usize) -> Result<Var> {
    if s == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    let (n, c, h, w) = dims4(x);
    let (hp, wp) = (padded_extent(h, s), padded_extent(w, s));
    let padded = nn::reflect_pad(x, 0, hp - h, 0, wp - w);
    Ok(padded.sparse(&partition_map(n, c, hp, wp, s)))
}

/// Inverse of [`partition_windows`], cropping the padding away.
pub fn merge_windows(windows: &Var, n: usize, h: usize, w: usize, s: usize) -> Result<Var> {
    if s == 0 {
        return Err(Error::config("window size must be at least 1"));
    }
    let c = windows.shape()[1];
    let (hp, wp) = (padded_extent(h, s), padded_extent(w, s));
    let expected = [n * (hp / s) * (wp / s), c, s, s];
    if windows.shape() != expected {
        return Err(Error::shape(format!(
            "expected windows of shape {expected:?}, got {:?}",
            windows.shape()
        )));
    }
    // a pure permutation, so the adjoint is the inverse
    let full = windows.sparse(&partition_map(n, c, hp, wp, s).transpose());
    Ok(nn::crop(&full, 0, 0, h, w))
}

pub fn window_partition(x: &FeatureMap, s: usize) -> Result<Vec<FeatureMap>> {
    let parts = no_grad(|| partition_windows(&to_batch(x), s))?;
    Ok(parts
        .value()
        .outer_iter()
        .map(|win| win.to_owned().into_dimensionality().expect("C×s×s"))
        .collect())
}

pub fn window_merge(windows: &[FeatureMap], h: usize, w: usize, s: usize) -> Result<FeatureMap> {
    let first = windows.first().ok_or(Error::EmptyInput)?;
    let views: Vec<_> = windows.iter().map(|m| m.view()).collect();
    let stacked = ndarray::stack(Axis(0), &views)
        .map_err(|e| Error::shape(format!("windows differ in shape: {e}")))?;
    debug_assert_eq!(stacked.shape()[1], first.shape()[0]);
    let merged = no_grad(|| merge_windows(&Var::constant(stacked.into_dyn()), 1, h, w, s))?;
    Ok(from_batch(&merged))
}

/// DWMH output together with the per-head softmax matrices (before head
/// weighting), shaped `(windows·N)×heads×s²×s²`.
pub fn dwmh_forward_with_attention(
    x: &Var,
    wt: &DwmhWeights,
    heads: usize,
    window: usize,
) -> Result<(Var, Var)> {
    let (n, c, h, w) = dims4(x);
    check_dwmh_config(c, heads, window)?;
    if wt.head_weights.len() != heads {
        return Err(Error::shape(format!(
            "{} head weights for {heads} heads",
            wt.head_weights.len()
        )));
    }
    let dk = c / heads;
    let l = window * window;
    let q = nn::conv2d(x, &wt.query.0, Some(&wt.query.1), 1, 0);
    let k = nn::conv2d(x, &wt.key.0, Some(&wt.key.1), 1, 0);
    let v = nn::conv2d(x, &wt.value.0, Some(&wt.value.1), 1, 0);
    let to_heads = |t: &Var| -> Result<Var> {
        let win = partition_windows(t, window)?;
        let b = win.shape()[0];
        Ok(win
            .reshape(&[b, heads, dk, l])
            .permute(&[0, 1, 3, 2])
            .reshape(&[b * heads, l, dk]))
    };
    let (qh, kh, vh) = (to_heads(&q)?, to_heads(&k)?, to_heads(&v)?);
    let b = qh.shape()[0] / heads;
    let logits = qh.matmul(&kh.transpose_last()).scale(1.0 / (dk as f64).sqrt());
    if logits.value().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("DWMH attention logits".into()));
    }
    let probs = logits.softmax_last().reshape(&[b, heads, l, l]);
    let weighted = probs.mul(&wt.head_weights.reshape(&[1, heads, 1, 1]));
    let attended = weighted
        .reshape(&[b * heads, l, l])
        .matmul(&vh)
        .reshape(&[b, heads, l, dk])
        .permute(&[0, 1, 3, 2])
        .reshape(&[b, c, window, window]);
    let merged = merge_windows(&attended, n, h, w, window)?;
    let out = merged.mul(&wt.gamma.reshape(&[1, 1, 1, 1])).add(x);
    Ok((out, probs))
}

/// `γ·(Attention·V) + X` per window, with `Attention = softmax(QKᵀ/√d_k) ∘ W_h`.
pub fn dwmh_forward(x: &Var, wt: &DwmhWeights, heads: usize, window: usize) -> Result<Var> {
    dwmh_forward_with_attention(x, wt, heads, window).map(|(out, _)| out)
}

/// Random parameters for a standalone LIA block (fixtures and checks).
pub fn random_lia_weights<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> LiaWeights {
    let reduced = (channels / 4).max(1);
    let conv = |rng: &mut R, cin: usize, cout: usize, k: usize| {
        (
            Var::param(init_uniform(rng, &[cout, cin, k, k], cin * k * k)),
            Var::param(init_uniform(rng, &[cout], cin * k * k)),
        )
    };
    LiaWeights {
        compress: conv(rng, channels, reduced, 1),
        down: conv(rng, reduced, reduced, 3),
        restore: conv(rng, reduced, 1, 3),
    }
}

/// Random parameters for a standalone DWMH block with the given residual scale.
pub fn random_dwmh_weights<R: Rng + ?Sized>(
    rng: &mut R,
    channels: usize,
    heads: usize,
    gamma: f64,
) -> DwmhWeights {
    let conv = |rng: &mut R| {
        (
            Var::param(init_uniform(rng, &[channels, channels, 1, 1], channels)),
            Var::param(init_uniform(rng, &[channels], channels)),
        )
    };
    let head_weights = Var::param(init_uniform(rng, &[heads], 1).mapv(|v| 1.0 + v));
    DwmhWeights {
        query: conv(rng),
        key: conv(rng),
        value: conv(rng),
        head_weights,
        gamma: Var::param(Tensor::from_elem(ndarray::IxDyn(&[1]), gamma)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::layers::init_normal;

    fn randmap(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        init_normal(rng, &[c, h, w], 1.0).into_dimensionality().unwrap()
    }

    #[test]
    fn soft_pool_constant_input() {
        let x = Array3::from_elem((2, 9, 10), 0.37);
        let y = soft_pool_map(&x, 7, 3).unwrap();
        assert_eq!(y.dim(), (2, 1, 2));
        assert!(y.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn soft_pool_kernel_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randmap(&mut rng, 3, 5, 4);
        assert_eq!(soft_pool_map(&x, 1, 1).unwrap(), x);
    }

    #[test]
    fn soft_pool_hand_case() {
        // the window (0, ln 3) twice over: weights 1 and 3
        let l3 = 3f64.ln();
        let x = Array::from_shape_vec((1, 2, 2), vec![0.0, l3, 0.0, l3]).unwrap();
        let pooled = soft_pool_map(&x, 2, 1).unwrap();
        let expected = 3.0 * l3 / 4.0;
        assert!((pooled[[0, 0, 0]] - expected).abs() < 1e-12);
        assert!((expected - 0.8240).abs() < 1e-4);
    }

    #[test]
    fn soft_pool_rejects_empty_grid() {
        let x = Array3::zeros((1, 5, 9));
        assert!(matches!(soft_pool_map(&x, 7, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn soft_pool_output_dims() {
        let x = Array3::zeros((4, 16, 14));
        assert_eq!(soft_pool_map(&x, 7, 3).unwrap().dim(), (4, 4, 3));
    }

    #[test]
    fn bilinear_constant_and_single_pixel() {
        let x = Array3::from_elem((1, 3, 5), -2.5);
        let y = bilinear_upsample_map(&x, 7, 9).unwrap();
        assert!(y.iter().all(|&v| (v + 2.5).abs() < 1e-15));
        let one = Array3::from_elem((2, 1, 1), 4.0);
        let y = bilinear_upsample_map(&one, 3, 2).unwrap();
        assert!(y.iter().all(|&v| v == 4.0));
        assert!(bilinear_upsample_map(&one, 0, 2).is_err());
    }

    #[test]
    fn bilinear_ramp_hand_values() {
        // corners a b / c d, upsampled 2x with half-pixel centres:
        // source coordinate for output 0..4 is (-0.25→0), 0.25, 0.75, (1.25→1)
        let (a, b, c, d) = (0.0, 1.0, 2.0, 3.0);
        let x = Array::from_shape_vec((1, 2, 2), vec![a, b, c, d]).unwrap();
        let y = bilinear_upsample_map(&x, 4, 4).unwrap();
        let lerp = |p: f64, q: f64, t: f64| p * (1.0 - t) + q * t;
        let t = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let expect = lerp(lerp(a, b, t[j]), lerp(c, d, t[j]), t[i]);
                assert!((y[[0, i, j]] - expect).abs() < 1e-12);
                assert!(y[[0, i, j]] >= a && y[[0, i, j]] <= d);
            }
        }
    }

    #[test]
    fn lia_zero_input_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wt = random_lia_weights(&mut rng, 4);
        let x = Var::zeros(&[1, 4, 9, 9]);
        let y = lia_forward(&x, &wt, 7, 3).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lia_shape_and_small_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let wt = random_lia_weights(&mut rng, 8);
        for (h, w) in [(2, 2), (4, 5), (8, 8), (14, 14), (32, 32)] {
            let x = Var::constant(init_normal(&mut rng, &[2, 8, h, w], 1.0));
            let y = lia_forward(&x, &wt, 7, 3).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
        let tiny = Var::zeros(&[1, 8, 1, 6]);
        assert!(matches!(lia_forward(&tiny, &wt, 7, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn window_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randmap(&mut rng, 3, 8, 8);
        assert_eq!(window_partition(&x, 4).unwrap().len(), 4);
        let single = window_partition(&x, 8).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], x);
        let odd = randmap(&mut rng, 2, 7, 5);
        assert_eq!(window_partition(&odd, 3).unwrap().len(), 3 * 2);
        assert!(matches!(window_partition(&odd, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dwmh_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let wt = random_dwmh_weights(&mut rng, 6, 3, 0.5);
        let x = Var::zeros(&[1, 6, 4, 4]);
        assert!(matches!(dwmh_forward(&x, &wt, 4, 2), Err(Error::Config(_))));
        assert!(matches!(dwmh_forward(&x, &wt, 3, 0), Err(Error::Config(_))));
        assert!(dwmh_forward(&x, &wt, 3, 2).is_ok());
    }

    #[test]
    fn dwmh_window_one_reduces_to_weighted_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, heads) = (4, 2);
        let wt = random_dwmh_weights(&mut rng, c, heads, 0.3);
        let x = Var::constant(init_normal(&mut rng, &[1, c, 3, 5], 1.0));
        let (y, probs) = dwmh_forward_with_attention(&x, &wt, heads, 1).unwrap();
        assert!(probs.value().iter().all(|&p| p == 1.0));
        let v = nn::conv2d(&x, &wt.value.0, Some(&wt.value.1), 1, 0);
        let hw = wt.head_weights.value();
        for ch in 0..c {
            let head = ch / (c / heads);
            for i in 0..3 {
                for j in 0..5 {
                    let expect = 0.3 * hw[[head]] * v.value()[[0, ch, i, j]] + x.value()[[0, ch, i, j]];
                    assert!((y.value()[[0, ch, i, j]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dwmh_softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wt = random_dwmh_weights(&mut rng, 8, 4, 0.0);
        let x = Var::constant(init_normal(&mut rng, &[2, 8, 6, 7], 3.0));
        let (_, probs) = dwmh_forward_with_attention(&x, &wt, 4, 3).unwrap();
        for row in probs.value().lanes(Axis(3)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn merge_inverts_partition(seed in 0u64..1000, h in 1usize..10, w in 1usize..10, c in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randmap(&mut rng, c, h, w);
            for s in 1..=h {
                let parts = window_partition(&x, s).unwrap();
                prop_assert_eq!(parts.len(), h.div_ceil(s) * w.div_ceil(s));
                prop_assert_eq!(&window_merge(&parts, h, w, s).unwrap(), &x);
            }
        }

        #[test]
        fn soft_pool_is_convex(seed in 0u64..1000, k in 1usize..5, s in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randmap(&mut rng, 2, 9, 8).mapv(|v| v * 4.0);
            let y = soft_pool_map(&x, k, s).unwrap();
            for ((c, oy, ox), &v) in y.indexed_iter() {
                let win = x.slice(ndarray::s![c, oy * s..oy * s + k, ox * s..ox * s + k]);
                let lo = win.fold(f64::INFINITY, |m, &a| m.min(a));
                let hi = win.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn lia_only_attenuates(seed in 0u64..1000, c in 1usize..6, h in 2usize..16, w in 2usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wt = random_lia_weights(&mut rng, c);
            let x = Var::constant(init_normal(&mut rng, &[1, c, h, w], 2.0));
            let y = no_grad(|| lia_forward(&x, &wt, 7, 3)).unwrap();
            for (a, b) in x.value().iter().zip(y.value().iter()) {
                prop_assert!(b.abs() <= a.abs());
                prop_assert!(*b == 0.0 || b.signum() == a.signum());
            }
        }

        #[test]
        fn dwmh_is_identity_at_zero_gamma(seed in 0u64..1000, heads in 1usize..4, s in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = heads * 2;
            let wt = random_dwmh_weights(&mut rng, c, heads, 0.0);
            let x = Var::constant(init_normal(&mut rng, &[1, c, 6, 5], 1.0));
            let y = no_grad(|| dwmh_forward(&x, &wt, heads, s)).unwrap();
            prop_assert_eq!(y.value(), x.value());
        }
    }
}
