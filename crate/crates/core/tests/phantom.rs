use lungsynth::maskcodec::{nodule_bboxes, validate_mask, LabelMask, NODULE};
use lungsynth::phantomdata::{
    export_coco, generate_phantom_pair, import_coco, load_dataset, sample_rng, split_dataset, write_dataset,
    DatasetManifest, ManifestEntry, PhantomConfig, Split,
};

fn is_lung(l: u8) -> bool {
    l == 2 || l == 3
}

/// Row/column bounds of lung-or-nodule pixels.
fn lung_bounds(mask: &LabelMask) -> (usize, usize, usize, usize) {
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let l = mask.get(r, c);
            if is_lung(l) || l == NODULE {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    (r0, r1, c0, c1)
}

#[test]
fn thousand_sample_construction_sweep() {
    let cfg = PhantomConfig {
        size: 64,
        diameter_min: 3.0,
        diameter_max: 12.0,
        seed: 11,
        ..Default::default()
    };
    let (mut nodule_sum, mut nodule_n, mut lung_sum, mut lung_n) = (0.0, 0usize, 0.0, 0usize);
    let mut with_nodules = 0;
    for id in 0..1000 {
        let pair = generate_phantom_pair(&mut sample_rng(cfg.seed, id), &cfg).unwrap();
        let report = validate_mask(&pair.mask);
        assert!(report.valid, "sample {id}");
        assert_eq!(pair.boxes, nodule_bboxes(&pair.mask));
        assert!(pair.boxes.len() <= 3);
        with_nodules += usize::from(!pair.boxes.is_empty());
        let (r0, r1, c0, c1) = lung_bounds(&pair.mask);
        for b in &pair.boxes {
            assert!(b.y as usize >= r0 && (b.y + b.h - 1) as usize <= r1, "sample {id}");
            assert!(b.x as usize >= c0 && (b.x + b.w - 1) as usize <= c1, "sample {id}");
        }
        let m = &pair.mask;
        for r in 0..m.height() {
            for c in 0..m.width() {
                let l = m.get(r, c);
                if l == NODULE {
                    for (dr, dc) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                        let n = m.get((r as i64 + dr) as usize, (c as i64 + dc) as usize);
                        assert!(is_lung(n) || n == NODULE, "sample {id} at ({r},{c})");
                    }
                    nodule_sum += pair.image[[r, c]];
                    nodule_n += 1;
                } else if is_lung(l) {
                    lung_sum += pair.image[[r, c]];
                    lung_n += 1;
                }
            }
        }
        assert!(pair.image.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(with_nodules > 800);
    assert!(nodule_sum / nodule_n as f64 > lung_sum / lung_n as f64);
}

#[test]
fn fixed_seed_pairs_are_identical() {
    let cfg = PhantomConfig::default();
    for id in [0, 7, 999] {
        let a = generate_phantom_pair(&mut sample_rng(3, id), &cfg).unwrap();
        let b = generate_phantom_pair(&mut sample_rng(3, id), &cfg).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn noiseless_render_is_piecewise_constant() {
    let cfg = PhantomConfig {
        size: 32,
        diameter_min: 2.0,
        diameter_max: 6.0,
        noise_sigma: 0.0,
        texture_scale: 0.0,
        ..Default::default()
    };
    for id in 0..50 {
        let pair = generate_phantom_pair(&mut sample_rng(1, id), &cfg).unwrap();
        let mut distinct: Vec<u64> = pair.image.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 6);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(pair.image[[r, c]], cfg.intensities[pair.mask.get(r, c) as usize]);
            }
        }
    }
}

fn manifest(n: usize) -> DatasetManifest {
    DatasetManifest {
        version: 1,
        seed: 0,
        config_hash: String::new(),
        size: 16,
        samples: (0..n as u64)
            .map(|id| ManifestEntry {
                id,
                mask: format!("masks/{id:05}.png"),
                image: format!("images/{id:05}.png"),
                split: Split::Train,
            })
            .collect(),
    }
}

#[test]
fn split_counts_and_partition() {
    let m = split_dataset(&manifest(1186), (4, 1), 9).unwrap();
    assert_eq!(m.ids(Split::Train).len(), 949);
    assert_eq!(m.ids(Split::Test).len(), 237);
    let small = split_dataset(&manifest(5), (4, 1), 9).unwrap();
    assert_eq!((small.ids(Split::Train).len(), small.ids(Split::Test).len()), (4, 1));
    assert_eq!(split_dataset(&manifest(1186), (4, 1), 9).unwrap(), m);
    for n in 2..60 {
        let s = split_dataset(&manifest(n), (4, 1), n as u64).unwrap();
        let (tr, te) = (s.ids(Split::Train), s.ids(Split::Test));
        assert_eq!(tr.len() + te.len(), n);
        assert!(tr.iter().all(|id| !te.contains(id)));
        assert!((tr.len() as f64 - n as f64 * 0.8).abs() <= 1.0);
    }
    assert!(split_dataset(&manifest(1), (4, 1), 0).is_err());
}

#[test]
fn written_dataset_reloads_and_coco_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        size: 32,
        diameter_min: 2.0,
        diameter_max: 6.0,
        seed: 4,
        ..Default::default()
    };
    let m = write_dataset(dir.path(), &cfg, 20, (4, 1)).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    assert_eq!(data.manifest, m);
    let coco = export_coco(&m, dir.path()).unwrap();
    let boxes = import_coco(&coco).unwrap();
    let total: usize = boxes.values().map(Vec::len).sum();
    assert_eq!(coco.annotations.len(), total);
    assert_eq!(coco.images.len(), 20);
    for (id, pair) in &data.pairs {
        assert_eq!(boxes[id], pair.boxes);
        // images are stored with 16-bit precision
        let regenerated = generate_phantom_pair(&mut sample_rng(4, *id), &cfg).unwrap();
        assert_eq!(regenerated.mask, pair.mask);
        let err = (&regenerated.image - &pair.image).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err <= 1.0 / 65535.0 + 1e-12);
    }
    let on_disk: lungsynth::phantomdata::CocoFile =
        lungsynth::phantomdata::read_json(&dir.path().join("annotations.json")).unwrap();
    assert_eq!(on_disk, coco);
    let text = serde_json::to_string(&coco).unwrap();
    let back: lungsynth::phantomdata::CocoFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back, coco);
}
