//! Subcommand implementations. Every command writes into an output
//! directory, echoes its effective configuration there as `config.toml`
//! and is deterministic given that configuration.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lungsynth_autodiff::Tensor;
use ndarray::Axis;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maskcodec::{
    downsample_majority, encode_one_hot, nodule_bboxes, read_mask_png, validate_mask, write_mask_png,
    write_palette_png, LabelMask,
};
use crate::maskgan::{GanTrainState, MaskGanStepLog};
use crate::metrics::{
    embed, fid, gaussian_stats, masked_region_metrics, psnr, resize, ssim, write_embeddings, crop,
    EmbeddingSet, Image, MetricsReport, QualityScores, REPORT_VERSION,
};
use crate::phantomdata::{
    coco_from_masks, load_dataset, read_image_png16, sample_file_stem, sample_rng, write_dataset, write_image_png16,
    write_json, DatasetManifest, ManifestEntry, Split, DATASET_FORMAT_VERSION,
};
use crate::pipeline::checkpoint::{config_hash, load_maskgan, load_translator, save_maskgan, save_translator};
use crate::pipeline::config::RunConfig;
use crate::pipeline::gradcheck::{run_gradcheck, GradcheckReport};
use crate::translator::{lr_schedule_translator, ConvFeatures, PairedSample, TranslatorState, TranslatorStepLog};

pub const MASKGAN_LOG_HEADER: &str = "step,resolution,alpha,critic_loss,gen_loss";
pub const TRANSLATOR_LOG_HEADER: &str = "epoch,step,lr,adversarial,l1,perceptual,total,critic_loss";
/// Offset separating mask GAN batch streams from phantom sample streams.
const BATCH_SEED_OFFSET: u64 = 0x6d61_736b;
/// Palette previews written after mask GAN training.
const PREVIEW_COUNT: usize = 4;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates `out` and writes the effective configuration into it.
pub fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    prepare_out(cfg, out)?;
    let ratio = (cfg.dataset.train_ratio, cfg.dataset.test_ratio);
    write_dataset(out, &cfg.phantom, cfg.dataset.samples, ratio)
}

/// Appends CSV rows, keeping only rows whose step precedes `resume_step`
/// when an earlier log exists.
struct CsvLog {
    file: fs::File,
    path: PathBuf,
}

impl CsvLog {
    fn open(path: &Path, header: &str, resume_step: Option<u64>, step_column: usize) -> Result<Self> {
        let mut text = format!("{header}\n");
        if let (Some(limit), Ok(old)) = (resume_step, fs::read_to_string(path)) {
            for line in old.lines().skip(1) {
                let step = line.split(',').nth(step_column).and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < limit) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
        write_text(path, &text)?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CsvLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub checkpoint: PathBuf,
}

/// Train-split masks as one-hot tensors at resolution `res`.
fn mask_batch_source(masks: &[LabelMask], res: usize) -> Result<Vec<Tensor>> {
    masks
        .iter()
        .map(|m| {
            if m.height() != m.width() || m.height() % res != 0 {
                return Err(Error::config(format!(
                    "{}x{} masks cannot be pooled to {res}x{res}",
                    m.height(),
                    m.width()
                )));
            }
            let small = downsample_majority(m, m.height() / res)?;
            Ok(encode_one_hot(&small)?.0.into_dyn())
        })
        .collect()
}

/// Indices of the batch for `step`, drawn with replacement from a stream
/// that depends only on the seed and the step.
pub fn batch_indices(seed: u64, step: u64, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = sample_rng(seed.wrapping_add(BATCH_SEED_OFFSET), step);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn stack(items: &[&Tensor]) -> Tensor {
    let views: Vec<_> = items.iter().map(|t| t.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

fn fmt_row_maskgan(log: &MaskGanStepLog) -> Vec<String> {
    vec![
        log.step.to_string(),
        log.resolution.to_string(),
        log.alpha.to_string(),
        log.critic_loss.to_string(),
        log.gen_loss.to_string(),
    ]
}

pub fn cmd_train_maskgan(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(dataset)?;
    let masks: Vec<LabelMask> = data.split(Split::Train).into_iter().map(|p| p.mask.clone()).collect();
    if masks.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut state = match resume {
        Some(dir) => {
            let state = load_maskgan(dir)?;
            if config_hash(&state.cfg) != config_hash(&cfg.maskgan) {
                return Err(Error::config(format!(
                    "{} was trained with a different mask GAN configuration",
                    dir.display()
                )));
            }
            state
        }
        None => GanTrainState::new(&cfg.maskgan, cfg.seed)?,
    };
    prepare_out(cfg, out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut log = CsvLog::open(
        &out.join("loss_log.csv"),
        MASKGAN_LOG_HEADER,
        resume.map(|_| state.step),
        0,
    )?;
    let limit = cfg.training.maskgan_steps.unwrap_or_else(|| cfg.maskgan.total_steps());
    let per_stage = cfg.maskgan.steps_per_resolution;
    let mut sources: HashMap<usize, Vec<Tensor>> = HashMap::new();
    let start = state.step;
    let latest = ckpt_dir.join("latest");
    while state.step < limit {
        let (res, _) = state.schedule();
        if !sources.contains_key(&res) {
            sources.insert(res, mask_batch_source(&masks, res)?);
        }
        let source = &sources[&res];
        let idx = batch_indices(cfg.seed, state.step, cfg.maskgan.batch_size, source.len());
        let batch = stack(&idx.iter().map(|&i| &source[i]).collect::<Vec<_>>());
        let entry = match state.train_step(&batch) {
            Ok(entry) => entry,
            Err(e) => {
                save_maskgan(&latest, &state)?;
                return Err(e);
            }
        };
        log.row(&fmt_row_maskgan(&entry))?;
        if state.step % per_stage == 0 {
            save_maskgan(&ckpt_dir.join(format!("stage_{res}")), &state)?;
        }
        let every = cfg.training.checkpoint_every;
        if every > 0 && state.step % every == 0 {
            save_maskgan(&ckpt_dir.join(format!("step_{:08}", state.step)), &state)?;
        }
    }
    save_maskgan(&latest, &state)?;
    let previews = out.join("previews");
    create_dir(&previews)?;
    for (i, mask) in state.sample_masks(PREVIEW_COUNT, cfg.seed)?.iter().enumerate() {
        write_palette_png(&previews.join(format!("{}.png", sample_file_stem(i as u64))), mask)?;
    }
    Ok(TrainSummary {
        steps_run: state.step - start,
        final_step: state.step,
        checkpoint: latest,
    })
}

/// Writes `masks/` and palette `previews/` for `n` sampled masks.
pub fn cmd_sample_masks(cfg: &RunConfig, checkpoint: &Path, n: usize, out: &Path) -> Result<Vec<LabelMask>> {
    let state = load_maskgan(checkpoint)?;
    let masks = state.sample_masks(n, cfg.seed)?;
    prepare_out(cfg, out)?;
    create_dir(&out.join("masks"))?;
    create_dir(&out.join("previews"))?;
    for (i, mask) in masks.iter().enumerate() {
        let report = validate_mask(mask);
        if !report.valid {
            return Err(Error::Format(format!("sampled mask {i} fails validation")));
        }
        let name = format!("{}.png", sample_file_stem(i as u64));
        write_mask_png(&out.join("masks").join(&name), mask)?;
        write_palette_png(&out.join("previews").join(&name), mask)?;
    }
    Ok(masks)
}

fn fmt_row_translator(log: &TranslatorStepLog, lr: f64) -> Vec<String> {
    vec![
        log.epoch.to_string(),
        log.step.to_string(),
        lr.to_string(),
        log.adversarial.to_string(),
        log.l1.to_string(),
        log.perceptual.to_string(),
        log.total.to_string(),
        log.critic_loss.to_string(),
    ]
}

fn training_pairs(dataset: &Path, split: Split, resolution: usize) -> Result<Vec<PairedSample>> {
    let data = load_dataset(dataset)?;
    if data.manifest.size != resolution {
        return Err(Error::config(format!(
            "dataset images are {0}x{0} but the translator runs at {resolution}x{resolution}",
            data.manifest.size
        )));
    }
    data.split(split).into_iter().map(|p| p.to_training_sample()).collect()
}

/// Translator training. `latest` is refreshed at every epoch boundary and
/// at the end; numbered epoch checkpoints follow `checkpoint_every`
/// (counted in epochs).
pub fn cmd_train_translator(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = training_pairs(dataset, Split::Train, cfg.translator.resolution)?;
    if data.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut state = match resume {
        Some(dir) => {
            let state = load_translator(dir)?;
            if config_hash(&state.cfg) != config_hash(&cfg.translator) {
                return Err(Error::config(format!(
                    "{} was trained with a different translator configuration",
                    dir.display()
                )));
            }
            state
        }
        None => TranslatorState::new(&cfg.translator, cfg.seed)?,
    };
    prepare_out(cfg, out)?;
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut log = CsvLog::open(
        &out.join("loss_log.csv"),
        TRANSLATOR_LOG_HEADER,
        resume.map(|_| state.step),
        1,
    )?;
    let n = data.len() as u64;
    let limit = cfg
        .training
        .translator_steps
        .unwrap_or(cfg.translator.epochs as u64 * n);
    let start = state.step;
    let latest = ckpt_dir.join("latest");
    while state.step < limit {
        let mut entry = None;
        if let Err(e) = state.train(&data, 1, |l| entry = Some(l.clone())) {
            save_translator(&latest, &state, state.step / n)?;
            return Err(e);
        }
        let entry = entry.expect("one step logged");
        log.row(&fmt_row_translator(&entry, lr_schedule_translator(entry.epoch, &cfg.translator)))?;
        if state.step % n == 0 {
            let epoch = state.step / n;
            save_translator(&latest, &state, epoch)?;
            let every = cfg.training.checkpoint_every;
            if every > 0 && epoch % every == 0 {
                save_translator(&ckpt_dir.join(format!("epoch_{epoch:04}")), &state, epoch)?;
            }
        }
    }
    save_translator(&latest, &state, state.step / n)?;
    Ok(TrainSummary {
        steps_run: state.step - start,
        final_step: state.step,
        checkpoint: latest,
    })
}

fn translate_masks(state: &TranslatorState, masks: &[LabelMask]) -> Result<Vec<Image>> {
    let r = state.cfg.resolution;
    masks
        .iter()
        .map(|m| {
            if m.height() != r || m.width() != r {
                return Err(Error::config(format!(
                    "{}x{} mask does not match translator resolution {r}",
                    m.height(),
                    m.width()
                )));
            }
            let cond = encode_one_hot(m)?.0.into_dyn();
            let out = state.translate(&[&cond])?;
            Ok(out
                .index_axis_move(Axis(0), 0)
                .index_axis_move(Axis(0), 0)
                .into_dimensionality()
                .expect("H×W"))
        })
        .collect()
}

/// PNG files of `dir` keyed by file stem, in name order.
fn png_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            let stem = path.file_stem().expect("file").to_string_lossy().into_owned();
            out.insert(stem, path);
        }
    }
    Ok(out)
}

/// Translates every mask PNG in `masks_dir` into `out/images/<stem>.png`.
pub fn cmd_translate(cfg: &RunConfig, checkpoint: &Path, masks_dir: &Path, out: &Path) -> Result<usize> {
    let state = load_translator(checkpoint)?;
    let files = png_files(masks_dir)?;
    if files.is_empty() {
        return Err(Error::EmptyInput);
    }
    let masks = files.values().map(|p| read_mask_png(p)).collect::<Result<Vec<_>>>()?;
    let images = translate_masks(&state, &masks)?;
    prepare_out(cfg, out)?;
    create_dir(&out.join("images"))?;
    for (stem, image) in files.keys().zip(&images) {
        write_image_png16(&out.join("images").join(format!("{stem}.png")), image)?;
    }
    Ok(images.len())
}

/// Samples masks, translates them and writes a dataset directory with a
/// manifest and COCO annotations derived from the emitted masks.
pub fn cmd_compose(
    cfg: &RunConfig,
    mask_checkpoint: &Path,
    translator_checkpoint: &Path,
    n: usize,
    out: &Path,
) -> Result<DatasetManifest> {
    let gan = load_maskgan(mask_checkpoint)?;
    let translator = load_translator(translator_checkpoint)?;
    let (rm, rt) = (gan.cfg.target_resolution, translator.cfg.resolution);
    if rm != rt {
        return Err(Error::config(format!(
            "mask GAN produces {rm}x{rm} masks but the translator expects {rt}x{rt}"
        )));
    }
    let masks = gan.sample_masks(n, cfg.seed)?;
    let images = translate_masks(&translator, &masks)?;
    prepare_out(cfg, out)?;
    create_dir(&out.join("masks"))?;
    create_dir(&out.join("images"))?;
    let mut samples = Vec::with_capacity(n);
    for (i, (mask, image)) in masks.iter().zip(&images).enumerate() {
        if !validate_mask(mask).valid {
            return Err(Error::Format(format!("composed mask {i} fails validation")));
        }
        let stem = sample_file_stem(i as u64);
        let entry = ManifestEntry {
            id: i as u64,
            mask: format!("masks/{stem}.png"),
            image: format!("images/{stem}.png"),
            split: Split::Train,
        };
        write_mask_png(&out.join(&entry.mask), mask)?;
        write_image_png16(&out.join(&entry.image), image)?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        version: DATASET_FORMAT_VERSION,
        seed: cfg.seed,
        config_hash: config_hash(&(&gan.cfg, &translator.cfg)),
        size: rm,
        samples,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    let coco = coco_from_masks(
        manifest
            .samples
            .iter()
            .zip(&masks)
            .map(|(s, m)| (s.id, s.image.clone(), m)),
    );
    write_json(&out.join("annotations.json"), &coco)?;
    debug_assert!(coco.annotations.len() == masks.iter().map(|m| nodule_bboxes(m).len()).sum::<usize>());
    Ok(manifest)
}

/// `[−1,1]` images mapped affinely onto `[0, top]`.
fn rescale(image: &Image, top: f64) -> Image {
    image.mapv(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * top)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn read_images(files: &BTreeMap<String, PathBuf>) -> Result<BTreeMap<String, Image>> {
    files
        .iter()
        .map(|(k, p)| read_image_png16(p).map(|img| (k.clone(), img)))
        .collect()
}

fn fid_of(real: &EmbeddingSet, synth: &EmbeddingSet) -> Result<f64> {
    fid(&gaussian_stats(real)?, &gaussian_stats(synth)?)
}

/// Full-image and nodule-region quality of `synth/images` against
/// `real/images`. PSNR and SSIM average over files whose stems appear in
/// both directories; FID compares the two whole sets. Region scores use
/// the masks in `real/masks`.
pub fn cmd_eval(cfg: &RunConfig, real: &Path, synth: &Path, out: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let real_images = read_images(&png_files(&real.join("images"))?)?;
    let synth_images = read_images(&png_files(&synth.join("images"))?)?;
    if real_images.is_empty() || synth_images.is_empty() {
        return Err(Error::EmptyInput);
    }
    let stems: Vec<&String> = real_images.keys().filter(|k| synth_images.contains_key(*k)).collect();
    if stems.is_empty() {
        return Err(Error::Pairing(format!("{} and {}", real.display(), synth.display())));
    }
    let phi = ConvFeatures::from_config(&cfg.translator);
    let to_vec = |m: &BTreeMap<String, Image>| m.values().cloned().collect::<Vec<_>>();
    let real_embed = embed(&to_vec(&real_images), &phi)?;
    let synth_embed = embed(&to_vec(&synth_images), &phi)?;

    let ssim_cfg = cfg.metrics.ssim;
    let region = cfg.metrics.region;
    let (mut p255, mut p4095, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    let (mut rp255, mut rp4095, mut rss) = (Vec::new(), Vec::new(), Vec::new());
    let (mut real_crops, mut synth_crops) = (Vec::new(), Vec::new());
    for stem in &stems {
        let (x, y) = (&real_images[*stem], &synth_images[*stem]);
        let (x255, y255) = (rescale(x, 255.0), rescale(y, 255.0));
        let (x4095, y4095) = (rescale(x, 4095.0), rescale(y, 4095.0));
        p255.push(psnr(&x255, &y255, 255.0)?);
        p4095.push(psnr(&x4095, &y4095, 4095.0)?);
        ss.push(ssim(&x255, &y255, &ssim_cfg)?);
        let mask = read_mask_png(&real.join("masks").join(format!("{stem}.png")))?;
        match masked_region_metrics(&x255, &y255, &mask, &region, 255.0, &ssim_cfg) {
            Ok(scores) => {
                rp255.push(scores.psnr);
                rss.push(scores.ssim);
                let b = scores.region;
                rp4095.push(psnr(&crop(&x4095, &b), &crop(&y4095, &b), 4095.0)?);
                let side = region.embed_size;
                real_crops.push(resize(&crop(x, &b), side, side)?);
                synth_crops.push(resize(&crop(y, &b), side, side)?);
            }
            Err(Error::NoNoduleRegion) => {}
            Err(e) => return Err(e),
        }
    }
    let region_fid = if real_crops.len() >= 2 {
        fid_of(&embed(&real_crops, &phi)?, &embed(&synth_crops, &phi)?)?
    } else {
        f64::NAN
    };
    let region_scores = if rss.is_empty() {
        QualityScores {
            fid: region_fid,
            psnr_255: f64::NAN,
            psnr_4095: f64::NAN,
            ssim: f64::NAN,
            pairs: 0,
        }
    } else {
        QualityScores {
            fid: region_fid,
            psnr_255: mean(&rp255),
            psnr_4095: mean(&rp4095),
            ssim: mean(&rss),
            pairs: rss.len(),
        }
    };
    let report = MetricsReport {
        version: REPORT_VERSION,
        real_count: real_images.len(),
        synthetic_count: synth_images.len(),
        full_image: QualityScores {
            fid: fid_of(&real_embed, &synth_embed)?,
            psnr_255: mean(&p255),
            psnr_4095: mean(&p4095),
            ssim: mean(&ss),
            pairs: stems.len(),
        },
        masked_region: region_scores,
    };
    prepare_out(cfg, out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_embeddings(&out.join("embeddings_real.bin"), &real_embed)?;
    write_embeddings(&out.join("embeddings_synth.bin"), &synth_embed)?;
    Ok(report)
}

#[derive(Serialize)]
struct VersionedGradcheck<'a> {
    version: u32,
    #[serde(flatten)]
    report: &'a GradcheckReport,
}

pub const GRADCHECK_REPORT_VERSION: u32 = 1;

/// Runs the selected finite-difference checks and writes `gradcheck.json`.
/// The report is returned even when a check fails.
pub fn cmd_gradcheck(cfg: &RunConfig, selector: &str, out: &Path) -> Result<GradcheckReport> {
    let report = run_gradcheck(selector, cfg.seed)?;
    prepare_out(cfg, out)?;
    write_json(
        &out.join("gradcheck.json"),
        &VersionedGradcheck {
            version: GRADCHECK_REPORT_VERSION,
            report: &report,
        },
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_indices_depend_only_on_seed_and_step() {
        let a = batch_indices(3, 10, 8, 5);
        assert_eq!(a, batch_indices(3, 10, 8, 5));
        assert_ne!(a, batch_indices(3, 11, 8, 5));
        assert!(a.iter().all(|&i| i < 5));
    }

    #[test]
    fn csv_log_truncates_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        {
            let mut log = CsvLog::open(&path, "step,x", None, 0).unwrap();
            for s in 0..5 {
                log.row(&[s.to_string(), "1".into()]).unwrap();
            }
        }
        CsvLog::open(&path, "step,x", Some(3), 0).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,x\n0,1\n1,1\n2,1\n");
    }

    #[test]
    fn rescale_maps_endpoints() {
        let img = ndarray::arr2(&[[-1.0, 1.0], [0.0, 2.0]]);
        assert_eq!(rescale(&img, 255.0), ndarray::arr2(&[[0.0, 255.0], [127.5, 255.0]]));
    }
}
