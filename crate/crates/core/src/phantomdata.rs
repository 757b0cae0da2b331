//! Procedural paired (mask, image) phantoms of axial chest slices, dataset
//! files, train/test splitting and COCO-style nodule annotations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::bilinear_upsample_map;
use crate::error::{Error, Result};
use crate::maskcodec::{
    encode_one_hot, image_error, nodule_bboxes, read_mask_png, validate_mask, write_mask_png, BoundingBox, Class,
    LabelMask, NUM_CLASSES,
};
use crate::translator::PairedSample;

/// Grayscale image, values in `[−1,1]`.
pub type Image = Array2<f64>;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub diameter_min: f64,
    pub diameter_max: f64,
    /// Relative frequency of 0, 1, 2, 3 nodules per slice.
    pub nodule_count_weights: Vec<f64>,
    /// Base intensity per class label.
    pub intensities: [f64; NUM_CLASSES],
    pub noise_sigma: f64,
    pub texture_scale: f64,
    pub texture_grid: usize,
    pub placement_retries: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 128,
            diameter_min: 3.0,
            diameter_max: 30.0,
            nodule_count_weights: vec![0.1, 0.5, 0.25, 0.15],
            intensities: [-1.0, 0.2, -0.6, -0.6, -0.9, 0.5],
            noise_sigma: 0.05,
            texture_scale: 0.1,
            texture_grid: 8,
            placement_retries: 64,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config("phantom size must be at least 16"));
        }
        if !(self.diameter_min >= 1.0 && self.diameter_min <= self.diameter_max && self.diameter_max <= self.size as f64 / 2.0) {
            return Err(Error::config(format!(
                "nodule diameter range [{}, {}] must lie within [1, {}]",
                self.diameter_min,
                self.diameter_max,
                self.size / 2
            )));
        }
        if self.intensities.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::config("class intensities must lie in [-1, 1]"));
        }
        if self.nodule_count_weights.is_empty()
            || self.nodule_count_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.nodule_count_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("nodule count weights must be non-negative with a positive sum"));
        }
        if !(self.noise_sigma >= 0.0 && self.texture_scale >= 0.0) || self.texture_grid == 0 {
            return Err(Error::config("noise and texture parameters must be non-negative"));
        }
        Ok(())
    }

    /// Class pairs whose base intensities differ by less than `2σ` without
    /// being equal.
    pub fn poorly_separated_classes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..NUM_CLASSES {
            for b in a + 1..NUM_CLASSES {
                let d = (self.intensities[a] - self.intensities[b]).abs();
                if d > 0.0 && d < 2.0 * self.noise_sigma - 1e-12 {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub mask: LabelMask,
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
}

impl PhantomPair {
    /// Network-ready tensors: one-hot `6×H×W` and `1×H×W`.
    pub fn to_training_sample(&self) -> Result<PairedSample> {
        let cond = encode_one_hot(&self.mask)?.0.into_dyn();
        let image = self.image.clone().insert_axis(ndarray::Axis(0)).into_dyn();
        Ok(PairedSample { cond, image })
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, v: f64, frac: f64) -> f64 {
    v * (1.0 + rng.random_range(-frac..=frac))
}

/// Body, both lungs and trachea; no nodules.
pub fn generate_anatomy<R: Rng + ?Sized>(rng: &mut R, size: usize) -> LabelMask {
    let s = size as f64;
    let c = s / 2.0;
    let body = Ellipse {
        cx: c,
        cy: c,
        ax: jitter(rng, 0.45 * s, 0.04),
        ay: jitter(rng, 0.35 * s, 0.04),
    };
    let lung_y = c + jitter(rng, 0.02 * s, 0.5);
    let offset = jitter(rng, 0.2 * s, 0.05);
    let lung_axes = (jitter(rng, 0.13 * s, 0.08), jitter(rng, 0.23 * s, 0.08));
    // image right holds the patient's left lung
    let left = Ellipse {
        cx: c + offset,
        cy: lung_y,
        ax: lung_axes.0,
        ay: lung_axes.1,
    };
    let right = Ellipse {
        cx: c - offset,
        cy: lung_y,
        ax: jitter(rng, lung_axes.0, 0.05),
        ay: jitter(rng, lung_axes.1, 0.05),
    };
    let trachea = Ellipse {
        cx: c,
        cy: c - 0.14 * s,
        ax: (0.035 * s).max(1.0),
        ay: (0.035 * s).max(1.0),
    };
    let mut mask = LabelMask::filled(size, size, Class::Background.label()).expect("non-empty");
    for row in 0..size {
        for col in 0..size {
            let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
            let label = if left.contains(x, y) {
                Class::LeftLung
            } else if right.contains(x, y) {
                Class::RightLung
            } else if trachea.contains(x, y) {
                Class::Trachea
            } else if body.contains(x, y) {
                Class::Body
            } else {
                Class::Background
            };
            mask.set(row, col, label.label());
        }
    }
    mask
}

fn is_lung(label: u8) -> bool {
    label == Class::LeftLung.label() || label == Class::RightLung.label()
}

/// Tries to paint one nodule disc whose 1-pixel dilation lies entirely in
/// lung; redraws diameter and centre on every attempt.
fn place_nodule<R: Rng + ?Sized>(rng: &mut R, mask: &mut LabelMask, cfg: &PhantomConfig) -> bool {
    let size = mask.height();
    for _ in 0..cfg.placement_retries {
        let d = if cfg.diameter_max > cfg.diameter_min {
            rng.random_range(cfg.diameter_min..=cfg.diameter_max)
        } else {
            cfg.diameter_min
        };
        let r = d / 2.0;
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let reach = (r + 1.0).ceil() as isize + 1;
        let mut disc = Vec::new();
        let mut ok = true;
        'scan: for dy in -reach..=reach {
            for dx in -reach..=reach {
                let row = cy.floor() as isize + dy;
                let col = cx.floor() as isize + dx;
                let dist = ((col as f64 + 0.5 - cx).powi(2) + (row as f64 + 0.5 - cy).powi(2)).sqrt();
                if dist > r + 1.0 {
                    continue;
                }
                if row < 0 || col < 0 || row >= size as isize || col >= size as isize {
                    ok = false;
                    break 'scan;
                }
                let (row, col) = (row as usize, col as usize);
                if !is_lung(mask.get(row, col)) {
                    ok = false;
                    break 'scan;
                }
                if dist <= r {
                    disc.push((row, col));
                }
            }
        }
        if ok && !disc.is_empty() {
            for (row, col) in disc {
                mask.set(row, col, Class::Nodule.label());
            }
            return true;
        }
    }
    false
}

/// Smooth field: seeded `grid×grid` normals scaled and bilinearly upsampled.
pub fn texture_field<R: Rng + ?Sized>(rng: &mut R, cfg: &PhantomConfig, h: usize, w: usize) -> Result<Image> {
    let g = cfg.texture_grid;
    let coarse = Array3::from_shape_fn((1, g, g), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * cfg.texture_scale
    });
    let fine = bilinear_upsample_map(&coarse, h, w)?;
    Ok(fine.index_axis_move(ndarray::Axis(0), 0))
}

/// Class intensity plus texture plus Gaussian noise, clipped to `[−1,1]`.
pub fn render_image_from_mask<R: Rng + ?Sized>(mask: &LabelMask, cfg: &PhantomConfig, rng: &mut R) -> Result<Image> {
    let (h, w) = (mask.height(), mask.width());
    let texture = texture_field(rng, cfg, h, w)?;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut img = Image::zeros((h, w));
    for row in 0..h {
        for col in 0..w {
            let base = cfg.intensities[mask.get(row, col) as usize];
            let v = base + texture[[row, col]] + noise.sample(rng);
            img[[row, col]] = v.clamp(-1.0, 1.0);
        }
    }
    Ok(img)
}

pub fn generate_phantom_pair<R: Rng + ?Sized>(rng: &mut R, cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    let mut mask = generate_anatomy(rng, cfg.size);
    let counts = WeightedIndex::new(&cfg.nodule_count_weights).map_err(|e| Error::config(e.to_string()))?;
    let n = counts.sample(rng);
    for _ in 0..n {
        place_nodule(rng, &mut mask, cfg);
    }
    let image = render_image_from_mask(&mask, cfg, rng)?;
    let boxes = nodule_bboxes(&mask);
    Ok(PhantomPair { mask, image, boxes })
}

/// Generator for sample `id`: stream `id` of the seed.
pub fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_dataset(cfg: &PhantomConfig, n: usize) -> Result<Vec<PhantomPair>> {
    (0..n as u64)
        .map(|id| generate_phantom_pair(&mut sample_rng(cfg.seed, id), cfg))
        .collect()
}

/// Clip to `window` and map it affinely onto `[−1,1]`.
pub fn normalize_image(raw: &Image, window: (f64, f64)) -> Result<Image> {
    let (lo, hi) = window;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::config(format!("degenerate window ({lo}, {hi})")));
    }
    Ok(raw.mapv(|v| 2.0 * (v.clamp(lo, hi) - lo) / (hi - lo) - 1.0))
}

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);

/// `[−1,1] → 0..=65535`.
pub fn to_u16(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 65535.0).round() as u16
}

pub fn from_u16(v: u16) -> f64 {
    v as f64 / 65535.0 * 2.0 - 1.0
}

pub fn write_image_png16(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = image.dim();
    let data: Vec<u16> = image.iter().map(|&v| to_u16(v)).collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, data)
        .expect("buffer matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub fn read_image_png16(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: image must be 16-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    let values = gray.into_raw().into_iter().map(from_u16).collect();
    Ok(Image::from_shape_vec((h as usize, w as usize), values).expect("dimensions"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub mask: String,
    pub image: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub size: usize,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<u64> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }
}

/// Seeded shuffle; the first `round(N·train/(train+test))` become train.
pub fn split_dataset(manifest: &DatasetManifest, ratio: (u32, u32), seed: u64) -> Result<DatasetManifest> {
    let n = manifest.samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::config("split ratio parts must be positive"));
    }
    let n_train = (n as f64 * a as f64 / (a + b) as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.samples[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [u32; 4],
    pub area: u64,
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub const NODULE_CATEGORY: u32 = 1;

/// COCO document from `(image id, file name, mask)` triples.
pub fn coco_from_masks<'a>(items: impl IntoIterator<Item = (u64, String, &'a LabelMask)>) -> CocoFile {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (id, file_name, mask) in items {
        images.push(CocoImage {
            id,
            file_name,
            width: mask.width(),
            height: mask.height(),
        });
        for b in nodule_bboxes(mask) {
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: id,
                category_id: NODULE_CATEGORY,
                bbox: [b.x, b.y, b.w, b.h],
                area: b.area(),
                iscrowd: 0,
            });
        }
    }
    CocoFile {
        images,
        annotations,
        categories: vec![CocoCategory {
            id: NODULE_CATEGORY,
            name: "nodule".into(),
        }],
    }
}

/// Reads every mask referenced by the manifest and emits its nodule boxes.
pub fn export_coco(manifest: &DatasetManifest, root: &Path) -> Result<CocoFile> {
    let mut masks = Vec::new();
    for s in &manifest.samples {
        masks.push((s.id, s.image.clone(), read_mask_png(&root.join(&s.mask))?));
    }
    Ok(coco_from_masks(masks.iter().map(|(id, f, m)| (*id, f.clone(), m))))
}

/// Boxes per image id; images without annotations map to empty lists.
pub fn import_coco(coco: &CocoFile) -> Result<BTreeMap<u64, Vec<BoundingBox>>> {
    check_coco(coco)?;
    let mut out: BTreeMap<u64, Vec<BoundingBox>> = coco.images.iter().map(|i| (i.id, Vec::new())).collect();
    for a in &coco.annotations {
        let [x, y, w, h] = a.bbox;
        out.get_mut(&a.image_id)
            .expect("checked")
            .push(BoundingBox { x, y, w, h });
    }
    Ok(out)
}

/// Required fields, unique ids, known image references and in-bounds boxes.
pub fn check_coco(coco: &CocoFile) -> Result<()> {
    let mut dims = BTreeMap::new();
    for i in &coco.images {
        if dims.insert(i.id, (i.width, i.height)).is_some() {
            return Err(Error::Format(format!("duplicate image id {}", i.id)));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for a in &coco.annotations {
        if !seen.insert(a.id) {
            return Err(Error::Format(format!("duplicate annotation id {}", a.id)));
        }
        let &(w, h) = dims
            .get(&a.image_id)
            .ok_or_else(|| Error::Format(format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        let [x, y, bw, bh] = a.bbox;
        if bw == 0 || bh == 0 || (x + bw) as usize > w || (y + bh) as usize > h {
            return Err(Error::Format(format!("annotation {} box out of bounds", a.id)));
        }
        if !coco.categories.iter().any(|c| c.id == a.category_id) {
            return Err(Error::Format(format!("annotation {} has unknown category", a.id)));
        }
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn sample_file_stem(id: u64) -> String {
    format!("{id:05}")
}

/// Writes `masks/`, `images/`, `manifest.json` and `annotations.json`.
pub fn write_dataset(root: &Path, cfg: &PhantomConfig, n: usize, ratio: (u32, u32)) -> Result<DatasetManifest> {
    let pairs = generate_dataset(cfg, n)?;
    create_dir(&root.join("masks"))?;
    create_dir(&root.join("images"))?;
    let mut samples = Vec::with_capacity(n);
    for (id, pair) in pairs.iter().enumerate() {
        let stem = sample_file_stem(id as u64);
        let mask = format!("masks/{stem}.png");
        let image = format!("images/{stem}.png");
        write_mask_png(&root.join(&mask), &pair.mask)?;
        write_image_png16(&root.join(&image), &pair.image)?;
        samples.push(ManifestEntry {
            id: id as u64,
            mask,
            image,
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_FORMAT_VERSION,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        size: cfg.size,
        samples,
    };
    let manifest = if n >= 2 { split_dataset(&manifest, ratio, cfg.seed)? } else { manifest };
    write_json(&root.join("manifest.json"), &manifest)?;
    let coco = coco_from_masks(
        manifest
            .samples
            .iter()
            .zip(&pairs)
            .map(|(s, p)| (s.id, s.image.clone(), &p.mask)),
    );
    write_json(&root.join("annotations.json"), &coco)?;
    Ok(manifest)
}

/// A dataset directory read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub pairs: BTreeMap<u64, PhantomPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&PhantomPair> {
        self.manifest
            .ids(split)
            .iter()
            .map(|id| &self.pairs[id])
            .collect()
    }
}

/// Loads a dataset directory, re-validating every mask and deriving boxes.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", manifest.version)));
    }
    let mut pairs = BTreeMap::new();
    for s in &manifest.samples {
        let mask = read_mask_png(&root.join(&s.mask))?;
        let image = read_image_png16(&root.join(&s.image))?;
        if image.dim() != (mask.height(), mask.width()) {
            return Err(Error::shape(format!("sample {} mask and image sizes differ", s.id)));
        }
        if !validate_mask(&mask).valid {
            return Err(Error::Format(format!("sample {} mask fails validation", s.id)));
        }
        let boxes = nodule_bboxes(&mask);
        if pairs.insert(s.id, PhantomPair { mask, image, boxes }).is_some() {
            return Err(Error::Format(format!("duplicate sample id {}", s.id)));
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        pairs,
    })
}
