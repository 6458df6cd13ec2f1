use proptest::prelude::*;

use super::*;
use crate::backbone::FrozenModel;
use crate::profile::ModelDims;
use crate::taskgen::{generate, GenConfig};
use crate::training::{fit, TrainConfig};

fn mask(side: usize, f: impl Fn(usize, usize) -> bool) -> ImageGrid {
    ImageGrid::from_fn(side, |y, x| if f(y, x) { [1.0; 3] } else { [0.0; 3] })
}

fn square(x0: usize, y0: usize, s: usize) -> impl Fn(usize, usize) -> bool {
    move |y, x| (y0..y0 + s).contains(&y) && (x0..x0 + s).contains(&x)
}

#[test]
fn miou_examples() {
    let gt = mask(16, square(3, 4, 6));
    assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
    let inv = mask(16, |y, x| !square(3, 4, 6)(y, x));
    assert_eq!(miou(&inv, &gt).unwrap(), 0.0);
    let blank = mask(16, |_, _| false);
    assert_eq!(miou(&blank, &blank).unwrap(), 1.0);
    assert!(miou(&gt, &mask(8, |_, _| false)).is_err());
}

#[test]
fn half_overlapping_squares_match_pixel_counts() {
    let (side, s) = (40usize, 8usize);
    let a = square(4, 6, s);
    let b = square(4 + s / 2, 6, s);
    let (pred, gt) = (mask(side, &a), mask(side, &b));
    // Independent count over coordinates.
    let (mut fg_i, mut fg_u, mut bg_i, mut bg_u) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..side {
        for x in 0..side {
            let (p, g) = (a(y, x), b(y, x));
            fg_i += (p && g) as u8 as f64;
            fg_u += (p || g) as u8 as f64;
            bg_i += (!p && !g) as u8 as f64;
            bg_u += (!p || !g) as u8 as f64;
        }
    }
    assert_eq!(fg_i / fg_u, 1.0 / 3.0);
    let want = (fg_i / fg_u + bg_i / bg_u) / 2.0;
    assert_eq!(miou(&pred, &gt).unwrap(), want);
    let total = (side * side) as f64;
    let bg = (total - 96.0) / (total - 32.0);
    assert!((want - (1.0 / 3.0 + bg) / 2.0).abs() < 1e-15);
}

#[test]
fn mse_examples() {
    let black = ImageGrid::filled(8, [0.0; 3]);
    let white = ImageGrid::filled(8, [1.0; 3]);
    let gray = ImageGrid::filled(8, [0.5; 3]);
    assert_eq!(mse_color(&black, &black).unwrap(), 0.0);
    assert_eq!(mse_color(&black, &white).unwrap(), 1.0);
    assert_eq!(mse_color(&gray, &black).unwrap(), 0.25);
    assert_eq!(mse_color(&gray, &white).unwrap(), 0.25);
    assert!(mse_color(&black, &ImageGrid::filled(4, [0.0; 3])).is_err());
}

proptest! {
    #[test]
    fn miou_is_bounded_and_relabel_symmetric(bits in proptest::collection::vec(any::<(bool, bool)>(), 64)) {
        let p = mask(8, |y, x| bits[y * 8 + x].0);
        let g = mask(8, |y, x| bits[y * 8 + x].1);
        let np = mask(8, |y, x| !bits[y * 8 + x].0);
        let ng = mask(8, |y, x| !bits[y * 8 + x].1);
        let m = miou(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert_eq!(m, miou(&np, &ng).unwrap());
        prop_assert!(mse_color(&p, &g).unwrap() >= 0.0);
    }
}

#[test]
fn names_parse_and_print() {
    for v in ["condense", "mean_pool", "full_ca", "output_fusion", "no_pa", "no_tp"] {
        assert_eq!(v.parse::<Variant>().unwrap().to_string(), v);
    }
    for m in ["condense", "mean_pool", "full_ca", "output_fusion"] {
        assert_eq!(m.parse::<Mode>().unwrap().to_string(), m);
    }
    assert!("vote".parse::<Variant>().is_err());
    let base = TrainConfig::default();
    assert_eq!(Variant::NoPa.training_config(&base).unwrap().lambda, 0.0);
    assert!(!Variant::NoTp.training_config(&base).unwrap().use_tp);
    assert_eq!(Variant::FullCa.training_config(&base).unwrap().fusion, Fusion::Full);
    assert!(Variant::MeanPool.training_config(&base).is_err());
}

fn tiny() -> ModelDims {
    ModelDims {
        side: 16,
        patch: 4,
        dim: 8,
        n_tokens: 16,
        layers: 2,
        heads: 1,
    }
}

fn trained(ds: &Dataset) -> Checkpoint {
    let frozen = FrozenModel::seeded(tiny(), 4).unwrap();
    let cfg = TrainConfig {
        k: 2,
        epochs: 1,
        batch: 4,
        seed: 1,
        ..TrainConfig::default()
    };
    fit(&cfg, ds, &frozen, Exec::Parallel).unwrap().checkpoint
}

fn dataset() -> Dataset {
    generate(Task::Seg, &GenConfig::new(8, 24, 36, 16), Exec::Parallel).unwrap()
}

#[test]
fn reports_have_one_line_per_query_plus_aggregate() {
    let ds = dataset();
    let ck = trained(&ds);
    for mode in [Mode::Condense, Mode::MeanPool, Mode::FullCa, Mode::OutputFusion] {
        let cfg = EvalConfig::from_checkpoint(&ck, 3, mode);
        let a = run_eval(&ds, &ck, &cfg, Exec::Parallel).unwrap();
        let b = run_eval(&ds, &ck, &cfg, Exec::Sequential).unwrap();
        let values = |r: &EvalReport| r.records.iter().map(|q| q.value).collect::<Vec<_>>();
        assert_eq!(values(&a), values(&b), "{mode}");
        let text = a.to_jsonl(&serde_json::json!({"note": 1})).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), ds.test_queries.len() + 1);
        let mean = lines[..lines.len() - 1].iter().map(|l| l["value"].as_f64().unwrap()).sum::<f64>()
            / ds.test_queries.len() as f64;
        let agg = &lines[lines.len() - 1];
        assert!((agg["aggregate"]["mean"].as_f64().unwrap() - mean).abs() < 1e-9);
        assert_eq!(agg["config"]["mode"], mode.as_str());
        assert!(a.aggregate.mean >= 0.0 && a.aggregate.mean <= 1.0);
    }
}

#[test]
fn predictions_are_stable_and_shaped() {
    let ds = dataset();
    let ck = trained(&ds);
    let q = &ds.test_queries[0];
    for mode in [Mode::Condense, Mode::OutputFusion] {
        let a = predict_query_label(&q.image, &ds, &ck, 2, mode).unwrap();
        let b = predict_query_label(&q.image, &ds, &ck, 2, mode).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.side(), 16);
    }
    assert!(predict_query_label(&q.image, &ds, &ck, 37, Mode::Condense).is_err());
}

#[test]
fn single_prompt_fusion_is_the_raw_canvas() {
    let ds = dataset();
    let ck = trained(&ds);
    let p = Predictor::new(&ck, &ds.prompt_db, Backend::Pixel, 0, Exec::Sequential).unwrap();
    let q = &ds.test_queries[1];
    let c = p.retrieve(&q.image, 1, 0).unwrap();
    // Output fusion of one prompt is the backbone on the pasted prompt;
    // mean pooling of one prompt feeds the same features.
    let fused = p.predict_with(&q.image, &c, Mode::OutputFusion).unwrap();
    let pooled = p.predict_with(&q.image, &c, Mode::MeanPool).unwrap();
    assert_eq!(fused, pooled);
}

#[test]
fn attention_rows_are_distributions() {
    let ds = dataset();
    let ck = trained(&ds);
    let p = Predictor::new(&ck, &ds.prompt_db, Backend::Pixel, 0, Exec::Sequential).unwrap();
    let q = &ds.test_queries[0];
    for k in [1, 3] {
        let c = p.retrieve(&q.image, k, 0).unwrap();
        let (_, maps) = p.condensed(&q.image, &c, Mode::Condense).unwrap();
        let maps = maps.unwrap();
        assert_eq!(maps.image.dims(), &[16, k]);
        for t in [&maps.image, &maps.label] {
            for row in t.data().chunks(k) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                if k == 1 {
                    assert_eq!(row[0], 1.0);
                }
            }
        }
    }
}

#[test]
fn bench_rows_follow_the_k_list() {
    let ds = generate(Task::Seg, &GenConfig::new(8, 84, 36, 16), Exec::Parallel).unwrap();
    let ck = trained(&ds);
    let rows = bench_k_scaling(&ds, &ck, &[4, 1, 2], 20).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 4]);
    assert!(rows.iter().all(|r| r.condense_ms > 0.0 && r.fusion_ms > 0.0));
    let csv = bench_csv(&rows);
    assert!(csv.starts_with("k,condense_ms,fusion_ms\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(bench_k_scaling(&ds, &ck, &[1], 19).is_err());
    assert!(bench_k_scaling(&dataset(), &ck, &[1], 20).is_err());
}
