//! Image-quality and detection metrics: Fréchet distance over feature
//! embeddings, PSNR, SSIM (full image and nodule region), IoU, greedy
//! precision/recall and COCO-style mAP.

use std::io::{Read, Write};
use std::path::Path;

use lungsynth_autodiff::{no_grad, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::maskcodec::{nodule_extent, BoundingBox, LabelMask};
use crate::translator::FeatureNetwork;

pub type Image = Array2<f64>;


/// One embedding per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet(pub Array2<f64>);

impl EmbeddingSet {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding entries".into()));
        }
        Ok(EmbeddingSet(rows))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Global average pool of the final feature stage, one row per image.
pub fn embed(images: &[Image], phi: &dyn FeatureNetwork) -> Result<EmbeddingSet> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (h, w) = first.dim();
    let mut rows = Vec::with_capacity(images.len());
    no_grad(|| -> Result<()> {
        for img in images {
            if img.dim() != (h, w) {
                return Err(Error::shape(format!("image {:?} differs from {:?}", img.dim(), (h, w))));
            }
            let x = Var::constant(img.clone().into_shape_with_order((1, 1, h, w)).expect("4-d").into_dyn());
            let last = phi
                .stages(&x)
                .pop()
                .ok_or_else(|| Error::config("feature network has no stages"))?;
            rows.push(last.value().mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap().index_axis(Axis(0), 0).to_owned());
        }
        Ok(())
    })?;
    let d = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    EmbeddingSet::new(Array2::from_shape_vec((rows.len(), d), flat).expect("uniform rows"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Sample mean and unbiased, symmetrised covariance.
pub fn gaussian_stats(e: &EmbeddingSet) -> Result<GaussianStats> {
    let n = e.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = e.dim();
    let x = DMatrix::from_row_iterator(n, d, e.0.iter().copied());
    let mu = DVector::from_iterator(d, x.column_iter().map(|c| c.mean()));
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let sigma = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma })
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `Tr((Σa Σb)^½)` as `Tr((Σa^½ Σb Σa^½)^½)`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mu.len() != b.mu.len() || a.sigma.shape() != b.sigma.shape() {
        return Err(Error::shape(format!(
            "embedding dimensions differ: {} vs {}",
            a.mu.len(),
            b.mu.len()
        )));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let cross = trace_sqrt_product(&a.sigma, &b.sigma)?;
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numeric("FID".into()));
    }
    Ok(value.max(0.0))
}

/// Fréchet distance between two image sets under `phi`.
pub fn fid_images(real: &[Image], generated: &[Image], phi: &dyn FeatureNetwork) -> Result<f64> {
    let a = gaussian_stats(&embed(real, phi)?)?;
    let b = gaussian_stats(&embed(generated, phi)?)?;
    fid(&a, &b)
}

fn same_dims(x: &Image, y: &Image) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::shape(format!("image sizes differ: {:?} vs {:?}", x.dim(), y.dim())));
    }
    Ok(())
}

pub fn mse(x: &Image, y: &Image) -> Result<f64> {
    same_dims(x, y)?;
    if x.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok((x - y).mapv(|d| d * d).mean().expect("non-empty"))
}

/// `10·log10(max²/MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &Image, y: &Image, max_val: f64) -> Result<f64> {
    if max_val <= 0.0 || !max_val.is_finite() {
        return Err(Error::config(format!("PSNR peak value must be positive, got {max_val}")));
    }
    let e = mse(x, y)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / e).log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SsimWindow {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Gaussian { size, .. } | SsimWindow::Uniform { size } => size,
        }
    }

    fn with_size(&self, size: usize) -> SsimWindow {
        match *self {
            SsimWindow::Gaussian { sigma, .. } => SsimWindow::Gaussian { size, sigma },
            SsimWindow::Uniform { .. } => SsimWindow::Uniform { size },
        }
    }

    /// Normalised `size×size` weights.
    pub fn weights(&self) -> Array2<f64> {
        let k = self.size();
        let w = match *self {
            SsimWindow::Gaussian { sigma, .. } => {
                let c = (k as f64 - 1.0) / 2.0;
                Array2::from_shape_fn((k, k), |(i, j)| {
                    let (di, dj) = (i as f64 - c, j as f64 - c);
                    (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
                })
            }
            SsimWindow::Uniform { .. } => Array2::ones((k, k)),
        };
        let total = w.sum();
        w / total
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window: SsimWindow,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: SsimWindow::Gaussian { size: 11, sigma: 1.5 },
            dynamic_range: 255.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }
}

/// Mean SSIM over every window position that fits inside the image.
pub fn ssim(x: &Image, y: &Image, cfg: &SsimConfig) -> Result<f64> {
    same_dims(x, y)?;
    if cfg.dynamic_range <= 0.0 {
        return Err(Error::config("SSIM dynamic range must be positive"));
    }
    let k = cfg.window.size();
    let (h, w) = x.dim();
    if k == 0 || h < k || w < k {
        return Err(Error::shape(format!("{h}x{w} image is smaller than the {k}x{k} window")));
    }
    let weights = cfg.window.weights();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut total = 0.0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let px = x.slice(s![r..r + k, c..c + k]);
            let py = y.slice(s![r..r + k, c..c + k]);
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ((&a, &b), &wt) in px.iter().zip(py.iter()).zip(weights.iter()) {
                mx += wt * a;
                my += wt * b;
                xx += wt * a * a;
                yy += wt * b * b;
                xy += wt * a * b;
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Nodule bounding box grown by `margin` on every side, clipped to the image.
pub fn nodule_region(mask: &LabelMask, margin: usize) -> Result<BoundingBox> {
    let b = nodule_extent(mask).ok_or(Error::NoNoduleRegion)?;
    let x0 = (b.x as usize).saturating_sub(margin);
    let y0 = (b.y as usize).saturating_sub(margin);
    let x1 = (b.x as usize + b.w as usize + margin).min(mask.width());
    let y1 = (b.y as usize + b.h as usize + margin).min(mask.height());
    Ok(BoundingBox {
        x: x0 as u32,
        y: y0 as u32,
        w: (x1 - x0) as u32,
        h: (y1 - y0) as u32,
    })
}

pub fn crop(image: &Image, b: &BoundingBox) -> Image {
    let (x, y) = (b.x as usize, b.y as usize);
    image
        .slice(s![y..y + b.h as usize, x..x + b.w as usize])
        .to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub margin: usize,
    /// Crops are resized to this side before embedding.
    pub embed_size: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            margin: 8,
            embed_size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionScores {
    pub region: BoundingBox,
    #[serde(serialize_with = "serialize_extended")]
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

/// PSNR, SSIM and mean absolute error over the dilated nodule box. The SSIM
/// window shrinks to the largest odd size that fits a small crop.
pub fn masked_region_metrics(
    x: &Image,
    y: &Image,
    mask: &LabelMask,
    region: &RegionConfig,
    max_val: f64,
    ssim_cfg: &SsimConfig,
) -> Result<RegionScores> {
    same_dims(x, y)?;
    if x.dim() != (mask.height(), mask.width()) {
        return Err(Error::shape("mask and image sizes differ"));
    }
    let b = nodule_region(mask, region.margin)?;
    let (cx, cy) = (crop(x, &b), crop(y, &b));
    let side = (b.w.min(b.h) as usize).min(ssim_cfg.window.size());
    let fitted = if side % 2 == 0 { side - 1 } else { side };
    let cfg = SsimConfig {
        window: ssim_cfg.window.with_size(fitted.max(1)),
        ..*ssim_cfg
    };
    Ok(RegionScores {
        region: b,
        psnr: psnr(&cx, &cy, max_val)?,
        ssim: ssim(&cx, &cy, &cfg)?,
        l1: (&cx - &cy).mapv(f64::abs).mean().expect("non-empty crop"),
    })
}

/// Bilinear resize of a grayscale image.
pub fn resize(image: &Image, h: usize, w: usize) -> Result<Image> {
    let map = image.clone().insert_axis(Axis(0));
    Ok(crate::attention::bilinear_upsample_map(&map, h, w)?.index_axis_move(Axis(0), 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BoundingBox,
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w).saturating_sub(a.x.max(b.x)) as f64;
    let iy = (a.y + a.h).min(b.y + b.h).saturating_sub(a.y.max(b.y)) as f64;
    let inter = ix * iy;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Detections in descending score order (stable) with their TP flag.
/// Each one claims the unmatched same-image ground truth of highest IoU,
/// provided that IoU is at least `tau`.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> Vec<(usize, Option<usize>)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = &dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.image_id != d.image_id {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v >= tau && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
            }
            (i, best.map(|(j, _)| j))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn match_counts(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> MatchCounts {
    let tp = greedy_match(dets, gts, tau).iter().filter(|(_, m)| m.is_some()).count();
    MatchCounts {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `(TP/(TP+FP), TP/(TP+FN))`, each 0 when its denominator is 0.
pub fn precision_recall(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> (f64, f64) {
    let c = match_counts(dets, gts, tau);
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

/// All-point interpolated area under the precision–recall curve.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let matched = greedy_match(dets, gts, tau);
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(matched.len());
    for (k, (_, m)) in matched.iter().enumerate() {
        if m.is_some() {
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

pub fn mean_ap(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let t = map_thresholds();
    t.iter().map(|&tau| average_precision(dets, gts, tau)).sum::<f64>() / t.len() as f64
}

/// Writes `inf`, `-inf` and `nan` as strings so reports stay valid JSON.
pub fn serialize_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_nan() {
        s.serialize_str("nan")
    } else if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

/// Full-image or masked-region scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct QualityScores {
    #[serde(serialize_with = "serialize_extended")]
    pub fid: f64,
    #[serde(serialize_with = "serialize_extended")]
    pub psnr_255: f64,
    #[serde(serialize_with = "serialize_extended")]
    pub psnr_4095: f64,
    pub ssim: f64,
    pub pairs: usize,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub version: u32,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub full_image: QualityScores,
    pub masked_region: QualityScores,
}

const EMBEDDING_MAGIC: &[u8; 4] = b"LSEM";
const EMBEDDING_VERSION: u32 = 1;

/// Header (magic, version, N, d) then row-major little-endian `f32` data.
pub fn write_embeddings(path: &Path, e: &EmbeddingSet) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + e.0.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(e.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(e.dim() as u64).to_le_bytes());
    for &v in e.0.iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|err| Error::io(path, err))?;
    f.write_all(&buf).map_err(|err| Error::io(path, err))
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|err| Error::io(path, err))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if buf.len() < 24 || &buf[..4] != EMBEDDING_MAGIC {
        return Err(bad("not an embedding file"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let expected = n.checked_mul(d).and_then(|v| v.checked_mul(4)).ok_or_else(|| bad("size overflow"))?;
    if buf.len() - 24 != expected {
        return Err(bad("truncated data"));
    }
    let values = buf[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingSet::new(Array2::from_shape_vec((n, d), values).expect("checked size"))
}
