use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lungsynth::maskcodec::{nodule_bboxes, read_mask_png, validate_mask};
use lungsynth::phantomdata::{import_coco, read_image_png16, read_json, CocoFile, DatasetManifest};
use lungsynth::pipeline::config::RunConfig;
use lungsynth::translator::lr_schedule_translator;

const CONFIG: &str = r#"
seed = 5

[dataset]
samples = 10

[phantom]
size = 16
diameter_min = 2
diameter_max = 4

[maskgan]
latent_dim = 8
style_dim = 8
mapping_depth = 2
channels = 4
target_resolution = 16
steps_per_resolution = 3
batch_size = 2

[translator]
resolution = 16
base_width = 4
max_width = 8
heads = 2
epochs = 3
decay_start = 1
feature_widths = [4, 4]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lungsynth"));
    c.env_remove("LUNGSYNTH_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → file bytes for every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, format!("{CONFIG}\n{extra}")).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, out: &str, args: &[&str]) -> Output {
        let out_path = self.path(out);
        let mut all = vec!["--config", p(&self.config), "--out", p(&out_path)];
        all.extend_from_slice(args);
        run(&all)
    }

    fn data(&self) -> PathBuf {
        let d = self.path("data");
        if !d.exists() {
            self.cmd("data", &["synth-data"]);
        }
        d
    }
}

#[test]
fn synth_data_counts_and_is_byte_reproducible() {
    let f = Fixture::new("");
    f.cmd("a", &["synth-data"]);
    f.cmd("b", &["synth-data"]);
    let (a, b) = (snapshot(&f.path("a")), snapshot(&f.path("b")));
    assert_eq!(a, b);
    let manifest: DatasetManifest = read_json(&f.path("a/manifest.json")).unwrap();
    assert_eq!(manifest.samples.len(), 10);
    assert_eq!(fs::read_dir(f.path("a/masks")).unwrap().count(), 10);
    assert_eq!(fs::read_dir(f.path("a/images")).unwrap().count(), 10);
    assert!(f.path("a/annotations.json").exists());
    let echoed = RunConfig::load(&f.path("a/config.toml")).unwrap();
    assert_eq!(echoed.seed, 5);
    assert_eq!(echoed.phantom.seed, 5);

    f.cmd("c", &["--seed", "6", "synth-data"]);
    assert_ne!(snapshot(&f.path("c"))[Path::new("images/00000.png")], a[Path::new("images/00000.png")]);
}

#[test]
fn invalid_key_fails_naming_the_key() {
    let f = Fixture::new("[training]\ncheckpoint_evry = 3\n");
    let out = bin()
        .args(["--config", p(&f.config), "--out", p(&f.path("x")), "synth-data"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint_evry"));
}

#[test]
fn env_var_sets_default_output_root() {
    let f = Fixture::new("");
    let out = bin()
        .args(["--config", p(&f.config), "synth-data"])
        .env("LUNGSYNTH_OUT", f.path("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(f.path("root/synth-data/manifest.json").exists());
}

#[test]
fn maskgan_training_logs_every_step_and_resumes_exactly() {
    let f = Fixture::new("");
    let data = f.data();
    f.cmd("full", &["train-maskgan", "--dataset", p(&data)]);
    let log = fs::read_to_string(f.path("full/loss_log.csv")).unwrap();
    // stages 4, 8, 16 at 3 steps each
    assert_eq!(log.lines().count(), 1 + 9);
    for line in log.lines().skip(1) {
        assert!(line.split(',').skip(3).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    for stage in ["stage_4", "stage_8", "stage_16", "latest"] {
        assert!(f.path("full/checkpoints").join(stage).join("meta.json").exists(), "{stage}");
    }
    assert_eq!(fs::read_dir(f.path("full/previews")).unwrap().count(), 4);

    let g = Fixture::new("[training]\nmaskgan_steps = 4\n");
    g.cmd("part", &["train-maskgan", "--dataset", p(&data)]);
    let resume = f.path("resumed");
    fs::create_dir_all(&resume).unwrap();
    fs::copy(g.path("part/loss_log.csv"), resume.join("loss_log.csv")).unwrap();
    let ckpt = g.path("part/checkpoints/latest");
    f.cmd("resumed", &["train-maskgan", "--dataset", p(&data), "--resume", p(&ckpt)]);
    assert_eq!(
        fs::read(f.path("resumed/checkpoints/latest/tensors.bin")).unwrap(),
        fs::read(f.path("full/checkpoints/latest/tensors.bin")).unwrap()
    );
    assert_eq!(
        fs::read(f.path("resumed/checkpoints/latest/meta.json")).unwrap(),
        fs::read(f.path("full/checkpoints/latest/meta.json")).unwrap()
    );
    assert_eq!(fs::read_to_string(f.path("resumed/loss_log.csv")).unwrap(), log);

    f.cmd("again", &["train-maskgan", "--dataset", p(&data)]);
    assert_eq!(snapshot(&f.path("again")), snapshot(&f.path("full")));

    let ck = f.path("full/checkpoints/latest");
    f.cmd("s1", &["sample-masks", "--checkpoint", p(&ck), "--n", "5"]);
    f.cmd("s2", &["sample-masks", "--checkpoint", p(&ck), "--n", "5"]);
    assert_eq!(snapshot(&f.path("s1")), snapshot(&f.path("s2")));
    let masks: Vec<_> = fs::read_dir(f.path("s1/masks")).unwrap().collect();
    assert_eq!(masks.len(), 5);
    for m in masks {
        let mask = read_mask_png(&m.unwrap().path()).unwrap();
        assert!(validate_mask(&mask).valid);
        assert_eq!(mask.height(), 16);
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let f = Fixture::new("[training]\nmaskgan_steps = 1\n");
    let data = f.data();
    f.cmd("gan", &["train-maskgan", "--dataset", p(&data)]);
    let ck = f.path("gan/checkpoints/latest");
    let tensors = ck.join("tensors.bin");
    let bytes = fs::read(&tensors).unwrap();
    fs::write(&tensors, &bytes[..bytes.len() / 2]).unwrap();
    let out = bin()
        .args(["--out", p(&f.path("s")), "sample-masks", "--checkpoint", p(&ck)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad file format"));
}

#[test]
fn translator_logs_schedule_and_resumes_exactly() {
    let f = Fixture::new("");
    let data = f.data();
    f.cmd("full", &["train-translator", "--dataset", p(&data)]);
    let log = fs::read_to_string(f.path("full/loss_log.csv")).unwrap();
    let header = log.lines().next().unwrap();
    for col in ["lr", "adversarial", "l1", "perceptual", "total"] {
        assert!(header.split(',').any(|c| c == col), "{col}");
    }
    let cfg = RunConfig::load(&f.config).unwrap();
    let manifest: DatasetManifest = read_json(&data.join("manifest.json")).unwrap();
    let n_train = manifest.ids(lungsynth::phantomdata::Split::Train).len();
    assert_eq!(log.lines().count(), 1 + 3 * n_train);
    for line in log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let epoch: usize = cols[0].parse().unwrap();
        assert_eq!(cols[2].parse::<f64>().unwrap(), lr_schedule_translator(epoch, &cfg.translator));
    }

    let g = Fixture::new("[training]\ntranslator_steps = 5\n");
    g.cmd("part", &["train-translator", "--dataset", p(&data)]);
    let resume = f.path("resumed");
    fs::create_dir_all(&resume).unwrap();
    fs::copy(g.path("part/loss_log.csv"), resume.join("loss_log.csv")).unwrap();
    let ck = g.path("part/checkpoints/latest");
    f.cmd("resumed", &["train-translator", "--dataset", p(&data), "--resume", p(&ck)]);
    assert_eq!(
        fs::read(f.path("resumed/checkpoints/latest/tensors.bin")).unwrap(),
        fs::read(f.path("full/checkpoints/latest/tensors.bin")).unwrap()
    );
    assert_eq!(fs::read_to_string(f.path("resumed/loss_log.csv")).unwrap(), log);
}

#[test]
fn compose_translate_and_eval() {
    let f = Fixture::new("[training]\nmaskgan_steps = 2\ntranslator_steps = 3\n");
    let data = f.data();
    f.cmd("gan", &["train-maskgan", "--dataset", p(&data)]);
    f.cmd("tr", &["train-translator", "--dataset", p(&data)]);
    let (gan, tr) = (f.path("gan/checkpoints/latest"), f.path("tr/checkpoints/latest"));
    let compose = ["compose", "--mask-checkpoint", p(&gan), "--translator-checkpoint", p(&tr), "--n", "4"];
    f.cmd("c1", &compose);
    f.cmd("c2", &compose);
    assert_eq!(snapshot(&f.path("c1")), snapshot(&f.path("c2")));
    let coco: CocoFile = read_json(&f.path("c1/annotations.json")).unwrap();
    let boxes = import_coco(&coco).unwrap();
    assert_eq!(boxes.len(), 4);
    for id in 0..4u64 {
        let mask = read_mask_png(&f.path(&format!("c1/masks/{id:05}.png"))).unwrap();
        assert!(validate_mask(&mask).valid);
        assert_eq!(boxes[&id], nodule_bboxes(&mask));
        let image = read_image_png16(&f.path(&format!("c1/images/{id:05}.png"))).unwrap();
        assert!(image.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    f.cmd("t", &["translate", "--checkpoint", p(&tr), "--masks", p(&data.join("masks"))]);
    assert_eq!(fs::read_dir(f.path("t/images")).unwrap().count(), 10);

    f.cmd("self", &["eval", "--real", p(&data), "--synth", p(&data)]);
    let report: serde_json::Value = read_json(&f.path("self/metrics.json")).unwrap();
    assert_eq!(report["version"], 1);
    assert!(report["full_image"]["fid"].as_f64().unwrap() <= 1e-6);
    assert_eq!(report["full_image"]["psnr_255"], "inf");
    assert_eq!(report["full_image"]["psnr_4095"], "inf");
    assert!((report["full_image"]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    for key in ["fid", "psnr_255", "psnr_4095", "ssim", "pairs"] {
        assert!(report["masked_region"].get(key).is_some(), "{key}");
    }

    // synthetic images paired by file stem; dropping one changes FID only
    let synth = f.path("synth");
    fs::create_dir_all(&synth).unwrap();
    copy_dir(&f.path("t/images"), &synth.join("images"));
    f.cmd("e1", &["eval", "--real", p(&data), "--synth", p(&synth)]);
    fs::remove_file(synth.join("images/00003.png")).unwrap();
    f.cmd("e2", &["eval", "--real", p(&data), "--synth", p(&synth)]);
    let r1: serde_json::Value = read_json(&f.path("e1/metrics.json")).unwrap();
    let r2: serde_json::Value = read_json(&f.path("e2/metrics.json")).unwrap();
    assert_ne!(r1["full_image"]["fid"], r2["full_image"]["fid"]);
    assert_eq!(r1["full_image"]["pairs"], 10);
    assert_eq!(r2["full_image"]["pairs"], 9);

    let other = f.path("other/images");
    fs::create_dir_all(&other).unwrap();
    fs::copy(synth.join("images/00000.png"), other.join("zzz.png")).unwrap();
    let out = bin()
        .args(["--out", p(&f.path("e3")), "eval", "--real", p(&data), "--synth", p(&f.path("other"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no overlapping ids"));
}

#[test]
fn compose_rejects_mismatched_resolutions() {
    let f = Fixture::new("[training]\nmaskgan_steps = 1\ntranslator_steps = 1\n");
    let data = f.data();
    f.cmd("tr", &["train-translator", "--dataset", p(&data)]);
    let g = Fixture::new("[training]\nmaskgan_steps = 1\n");
    fs::write(&g.config, CONFIG.replace("target_resolution = 16", "target_resolution = 8")).unwrap();
    g.cmd("gan", &["train-maskgan", "--dataset", p(&data)]);
    let out = bin()
        .args([
            "--out",
            p(&f.path("c")),
            "compose",
            "--mask-checkpoint",
            p(&g.path("gan/checkpoints/latest")),
            "--translator-checkpoint",
            p(&f.path("tr/checkpoints/latest")),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
}

#[test]
fn gradcheck_reports_one_entry_per_target() {
    let f = Fixture::new("");
    let out = f.cmd("gc", &["gradcheck", "--select", "all"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().count(), lungsynth::pipeline::gradcheck::TARGETS.len());
    let report: serde_json::Value = read_json(&f.path("gc/gradcheck.json")).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["entries"].as_array().unwrap().len(), 10);
    let again = f.cmd("gc2", &["gradcheck", "--select", "all"]);
    assert_eq!(again.stdout, out.stdout);
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        fs::copy(&path, to.join(path.file_name().unwrap())).unwrap();
    }
}
