use std::path::PathBuf;

use lungsynth::attention::{
    dwmh_forward, lia_forward, random_dwmh_weights, random_lia_weights, soft_pool, DwmhWeights, LiaWeights,
};
use lungsynth::layers::init_normal;
use lungsynth::pipeline::checkpoint::{read_tensors, write_tensors, DType};
use lungsynth_autodiff::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dwmh_with_zero_gamma_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..3);
        let window = rng.random_range(1..6);
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let scale = [1e-3, 1.0, 30.0][rng.random_range(0..3)];
        let x = Var::constant(init_normal(&mut rng, &[2, c, h, w], scale));
        let wt = random_dwmh_weights(&mut rng, c, heads, 0.0);
        let out = dwmh_forward(&x, &wt, heads, window).unwrap();
        assert_eq!(out.value(), x.value());
    }
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/attention.bin")
}

fn named(prefix: &str, pairs: &[(&str, &Var)]) -> Vec<(String, Tensor)> {
    pairs
        .iter()
        .map(|(n, v)| (format!("{prefix}/{n}"), v.value().clone()))
        .collect()
}

fn lia_named(w: &LiaWeights) -> Vec<(&'static str, &Var)> {
    vec![
        ("compress.weight", &w.compress.0),
        ("compress.bias", &w.compress.1),
        ("down.weight", &w.down.0),
        ("down.bias", &w.down.1),
        ("restore.weight", &w.restore.0),
        ("restore.bias", &w.restore.1),
    ]
}

fn dwmh_named(w: &DwmhWeights) -> Vec<(&'static str, &Var)> {
    vec![
        ("query.weight", &w.query.0),
        ("query.bias", &w.query.1),
        ("key.weight", &w.key.0),
        ("key.bias", &w.key.1),
        ("value.weight", &w.value.0),
        ("value.bias", &w.value.1),
        ("head_weights", &w.head_weights),
        ("gamma", &w.gamma),
    ]
}

/// Input, parameter and output triples for the three operators.
fn build_fixture() -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut out = Vec::new();

    let x = Var::constant(init_normal(&mut rng, &[1, 3, 16, 16], 1.0));
    let y = soft_pool(&x, 7, 3).unwrap();
    out.extend(named("soft_pool", &[("input", &x), ("output", &y)]));

    let x = Var::constant(init_normal(&mut rng, &[1, 4, 14, 14], 1.0));
    let w = random_lia_weights(&mut rng, 4);
    let y = lia_forward(&x, &w, 7, 3).unwrap();
    let mut items = vec![("input", &x)];
    items.extend(lia_named(&w));
    items.push(("output", &y));
    out.extend(named("lia", &items));

    let x = Var::constant(init_normal(&mut rng, &[1, 4, 10, 10], 1.0));
    let w = random_dwmh_weights(&mut rng, 4, 2, 0.5);
    let y = dwmh_forward(&x, &w, 2, 4).unwrap();
    let mut items = vec![("input", &x)];
    items.extend(dwmh_named(&w));
    items.push(("output", &y));
    out.extend(named("dwmh", &items));
    out
}

#[test]
fn operator_fixture_regression() {
    let path = fixture_path();
    if std::env::var_os("LUNGSYNTH_REGENERATE_FIXTURES").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        write_tensors(&path, &build_fixture(), DType::F64).unwrap();
    }
    let stored = read_tensors(&path).unwrap();
    let get = |name: &str| -> Var {
        Var::constant(
            stored
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("fixture lacks {name}"))
                .1
                .clone(),
        )
    };
    let close = |a: &Var, b: &Var| {
        assert_eq!(a.shape(), b.shape());
        let err = a.value().iter().zip(b.value().iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err < 1e-12, "max deviation {err}");
    };

    close(&soft_pool(&get("soft_pool/input"), 7, 3).unwrap(), &get("soft_pool/output"));

    let lia = LiaWeights {
        compress: (get("lia/compress.weight"), get("lia/compress.bias")),
        down: (get("lia/down.weight"), get("lia/down.bias")),
        restore: (get("lia/restore.weight"), get("lia/restore.bias")),
    };
    close(&lia_forward(&get("lia/input"), &lia, 7, 3).unwrap(), &get("lia/output"));

    let dwmh = DwmhWeights {
        query: (get("dwmh/query.weight"), get("dwmh/query.bias")),
        key: (get("dwmh/key.weight"), get("dwmh/key.bias")),
        value: (get("dwmh/value.weight"), get("dwmh/value.bias")),
        head_weights: get("dwmh/head_weights"),
        gamma: get("dwmh/gamma"),
    };
    close(&dwmh_forward(&get("dwmh/input"), &dwmh, 2, 4).unwrap(), &get("dwmh/output"));

    let rebuilt = build_fixture();
    assert_eq!(rebuilt.len(), stored.len());
    for ((na, ta), (nb, tb)) in rebuilt.iter().zip(&stored) {
        assert_eq!(na, nb);
        assert_eq!(ta.shape(), tb.shape());
    }
}
