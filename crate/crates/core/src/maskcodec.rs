//! Semantic label masks: encodings, validation, nodule boxes and PNG files.
//!
//! Labels: 0 background, 1 body, 2 left lung, 3 right lung, 4 trachea,
//! 5 nodule.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;
pub const NODULE: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Body = 1,
    LeftLung = 2,
    RightLung = 3,
    Trachea = 4,
    Nodule = 5,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::Body,
        Class::LeftLung,
        Class::RightLung,
        Class::Trachea,
        Class::Nodule,
    ];

    pub fn label(self) -> u8 {
        self as u8
    }
}

/// Render colours for the palette PNG, indexed by label.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [150, 150, 150],
    [60, 120, 230],
    [70, 190, 110],
    [240, 200, 50],
    [230, 40, 40],
];

/// Row-major `H×W` label map.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    /// Checked constructor: dimensions must match and every label be in 0..=5.
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        let mask = Self::from_raw(height, width, labels)?;
        if let Some(&(row, col, value)) = validate_mask(&mask).invalid_pixels.first() {
            return Err(Error::InvalidLabel { row, col, value });
        }
        Ok(mask)
    }

    /// Only checks dimensions; labels may be out of range.
    pub fn from_raw(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("mask dimensions must be positive"));
        }
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u8) {
        self.labels[row * self.width + col] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// `6×H×W` indicator planes.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMask(pub Array3<f64>);

/// `6×H×W` per-pixel class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScoreVolume(pub Array3<f64>);

impl ClassScoreVolume {
    pub fn new(scores: Array3<f64>) -> Result<Self> {
        if scores.shape()[0] != NUM_CLASSES {
            return Err(Error::shape(format!(
                "score volume needs {NUM_CLASSES} channels, got {}",
                scores.shape()[0]
            )));
        }
        Ok(ClassScoreVolume(scores))
    }

    /// Largest deviation of any per-pixel channel sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.0
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, s| m.max((s - 1.0).abs()))
    }
}

impl From<OneHotMask> for ClassScoreVolume {
    fn from(m: OneHotMask) -> Self {
        ClassScoreVolume(m.0)
    }
}

/// Tight axis-aligned box in pixels; `(x, y)` is the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// COCO `[x, y, w, h]`.
    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x as f64, self.y as f64, self.w as f64, self.h as f64]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as u32, col as u32);
        c >= self.x && c < self.x + self.w && r >= self.y && r < self.y + self.h
    }
}

pub fn encode_one_hot(mask: &LabelMask) -> Result<OneHotMask> {
    let (h, w) = (mask.height, mask.width);
    let mut planes = Array3::zeros((NUM_CLASSES, h, w));
    for (i, &l) in mask.labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(Error::InvalidLabel {
                row: i / w,
                col: i % w,
                value: l,
            });
        }
        planes[[l as usize, i / w, i % w]] = 1.0;
    }
    Ok(OneHotMask(planes))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn decode_labels(scores: &ClassScoreVolume) -> Result<LabelMask> {
    let s = &scores.0;
    let (c, h, w) = s.dim();
    if c != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} channels, got {c}")));
    }
    let mut labels = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for k in 0..NUM_CLASSES {
                let v = s[[k, row, col]];
                if v.is_nan() {
                    return Err(Error::Numeric(format!(
                        "class score ({k}, {row}, {col}) is NaN"
                    )));
                }
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMask::new(h, w, labels)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub valid: bool,
    /// `(row, col, value)` of every out-of-range label.
    pub invalid_pixels: Vec<(usize, usize, u8)>,
    pub class_counts: [usize; NUM_CLASSES],
    pub nodule_present: bool,
}

pub fn validate_mask(mask: &LabelMask) -> ValidationReport {
    let mut counts = [0usize; NUM_CLASSES];
    let mut invalid = Vec::new();
    for (i, &l) in mask.labels.iter().enumerate() {
        match counts.get_mut(l as usize) {
            Some(c) => *c += 1,
            None => invalid.push((i / mask.width, i % mask.width, l)),
        }
    }
    ValidationReport {
        valid: invalid.is_empty(),
        invalid_pixels: invalid,
        class_counts: counts,
        nodule_present: counts[NODULE as usize] > 0,
    }
}

/// One tight box per 8-connected nodule component, sorted by `(y, x)`.
pub fn nodule_bboxes(mask: &LabelMask) -> Vec<BoundingBox> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.labels[start] != NODULE {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if !seen[j] && mask.labels[j] == NODULE {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        boxes.push(BoundingBox {
            x: c0 as u32,
            y: r0 as u32,
            w: (c1 - c0 + 1) as u32,
            h: (r1 - r0 + 1) as u32,
        });
    }
    boxes.sort_by_key(|b| (b.y, b.x, b.h, b.w));
    boxes
}

/// Tight box around every nodule pixel, if any.
pub fn nodule_extent(mask: &LabelMask) -> Option<BoundingBox> {
    let boxes = nodule_bboxes(mask);
    let first = boxes.first()?;
    let (mut x0, mut y0) = (first.x, first.y);
    let (mut x1, mut y1) = (first.x + first.w, first.y + first.h);
    for b in &boxes[1..] {
        x0 = x0.min(b.x);
        y0 = y0.min(b.y);
        x1 = x1.max(b.x + b.w);
        y1 = y1.max(b.y + b.h);
    }
    Some(BoundingBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

/// Shrinks each `factor`×`factor` block to its most frequent label
/// (ties to the lowest label). Averaging labels would not stay in 0..=5.
pub fn downsample_majority(mask: &LabelMask, factor: usize) -> Result<LabelMask> {
    if factor == 0 || mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::shape(format!(
            "{}x{} mask is not divisible by {factor}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height / factor, mask.width / factor);
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut votes = [0usize; 256];
            for dr in 0..factor {
                for dc in 0..factor {
                    votes[mask.get(r * factor + dr, c * factor + dc) as usize] += 1;
                }
            }
            let mut best = 0;
            for l in 1..256 {
                if votes[l] > votes[best] {
                    best = l;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMask::from_raw(h, w, labels)
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.labels.clone())
        .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

/// Reads a label PNG and rejects out-of-range labels.
pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: mask must be 8-bit grayscale, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    LabelMask::new(h as usize, w as usize, gray.into_raw())
}

/// RGB render using [`PALETTE`]; out-of-range labels show as white.
pub fn write_palette_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let mut rgb = Vec::with_capacity(mask.labels.len() * 3);
    for &l in &mask.labels {
        rgb.extend_from_slice(PALETTE.get(l as usize).unwrap_or(&[255, 255, 255]));
    }
    let img = image::RgbImage::from_raw(mask.width as u32, mask.height as u32, rgb)
        .expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_error(path, e))
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
