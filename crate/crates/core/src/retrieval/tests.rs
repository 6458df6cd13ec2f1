use proptest::prelude::*;

use super::*;
use crate::profile::Profile;
use crate::taskgen::gen_segmentation_set;

fn sample(id: &str, img: ImageGrid) -> Sample {
    Sample {
        id: id.into(),
        label: img.clone(),
        image: img,
        class_tag: "x".into(),
    }
}

#[test]
fn signatures_are_scale_free_unit_vectors() {
    let white = signature(&ImageGrid::filled(32, [1.0; 3])).unwrap();
    let gray = signature(&ImageGrid::filled(32, [0.4; 3])).unwrap();
    for (a, b) in white.iter().zip(&gray) {
        assert!((a - b).abs() < 1e-6);
    }
    let ds = gen_segmentation_set(1, 4, 12, 32).unwrap();
    for s in &ds.prompt_db {
        let v = signature(&s.image).unwrap();
        let n: f64 = v.iter().map(|&x| (x as f64).powi(2)).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
    }
    assert!(matches!(signature(&ImageGrid::filled(8, [0.0; 3])), Err(Error::Domain(_))));
}

#[test]
fn checkerboard_signature_matches_hand_computation() {
    let img = ImageGrid::from_fn(2, |y, x| if y == x { [1.0; 3] } else { [0.0; 3] });
    let v = signature_with_grid(&img, 2).unwrap();
    let r = std::f32::consts::FRAC_1_SQRT_2;
    let expect = [r, 0.0, 0.0, r];
    for (a, b) in v.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{v:?}");
    }
    // 4×4 checkerboard of 2×2 blocks sampled on a 2×2 grid: cell centres sit
    // at pixel 1.5, i.e. the mean of a 2×2 block.
    let img = ImageGrid::from_fn(4, |y, x| if (y / 2) == (x / 2) { [1.0; 3] } else { [0.0; 3] });
    let v = signature_with_grid(&img, 2).unwrap();
    for (a, b) in v.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{v:?}");
    }
}

#[test]
fn exact_match_ranks_first() {
    let ds = gen_segmentation_set(4, 4, 24, 32).unwrap();
    for backend in [Backend::Pixel, Backend::Feature] {
        let emb = PatchEmbedding::new(Profile::Desk.dims(), 1).unwrap();
        let q = &ds.prompt_db[7];
        let c = retrieve_topk(&q.image, &ds.prompt_db, 3, backend, Some(&emb), 0).unwrap();
        assert_eq!(c.entries[0].0, q.id);
        assert!((c.entries[0].1 - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_retrieval_is_sorted_with_id_tiebreak() {
    let db: Vec<Sample> = ["c", "a", "b"]
        .iter()
        .map(|id| sample(id, ImageGrid::filled(8, [0.5; 3])))
        .collect();
    let c = retrieve_topk(&ImageGrid::filled(8, [0.2; 3]), &db, 3, Backend::Pixel, None, 0).unwrap();
    assert_eq!(c.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
    assert!(retrieve_topk(&db[0].image, &db, 4, Backend::Pixel, None, 0)
        .unwrap_err()
        .is_config());
    assert!(retrieve_topk(&db[0].image, &db, 2, Backend::Feature, None, 0)
        .unwrap_err()
        .is_config());
}

#[test]
fn random_backend_is_seeded() {
    let ds = gen_segmentation_set(4, 4, 24, 16).unwrap();
    let r = Retriever::new(Backend::Random, &ds.prompt_db, None, 11, Exec::Sequential).unwrap();
    let q = &ds.train_queries[0].image;
    let a = r.topk(q, 10, 3).unwrap();
    assert_eq!(a, r.topk(q, 10, 3).unwrap());
    assert_ne!(a, r.topk(q, 10, 4).unwrap());
}

#[test]
fn pixel_top1_usually_shares_the_class() {
    let ds = gen_segmentation_set(21, 240, 256, 32).unwrap();
    let r = Retriever::new(Backend::Pixel, &ds.prompt_db, None, 0, Exec::default()).unwrap();
    let hits = ds
        .train_queries
        .iter()
        .filter(|q| {
            let c = r.topk(&q.image, 1, 0).unwrap();
            let top = ds.prompt_db.iter().find(|p| p.id == c.entries[0].0).unwrap();
            top.class_tag == q.class_tag
        })
        .count();
    let rate = hits as f64 / ds.train_queries.len() as f64;
    assert!(rate >= 0.60, "top-1 class agreement {rate:.3}");
}

#[test]
fn cache_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("signatures.bin");
    let entries = vec![("p00000".to_string(), vec![0.5f32, -1.0]), ("p00001".into(), vec![])];
    save_signatures(&path, &entries).unwrap();
    assert_eq!(load_signatures(&path).unwrap(), entries);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"SIGC1");
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_signatures(&path), Err(Error::Malformed { .. })));
    std::fs::write(&path, b"SIGC2\0\0\0\0").unwrap();
    assert!(matches!(load_signatures(&path), Err(Error::Malformed { .. })));
}

#[test]
fn cached_signatures_rank_identically() {
    let ds = gen_segmentation_set(5, 4, 24, 32).unwrap();
    let live = Retriever::new(Backend::Pixel, &ds.prompt_db, None, 0, Exec::default()).unwrap();
    let cached: Vec<(String, Vec<f32>)> = live.db_vectors().map(|(id, v)| (id.to_string(), v.to_vec())).collect();
    let from_cache = Retriever::with_signatures(&ds.prompt_db, &cached).unwrap();
    for q in &ds.train_queries {
        assert_eq!(live.topk(&q.image, 5, 0).unwrap(), from_cache.topk(&q.image, 5, 0).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn smaller_k_is_a_prefix(seed in 0u64..500, k in 1usize..12, extra in 1usize..12, b in 0usize..3) {
        let ds = gen_segmentation_set(seed, 1, 24, 16).unwrap();
        let backend = [Backend::Pixel, Backend::Feature, Backend::Random][b];
        let dims = crate::profile::ModelDims { side: 16, ..Profile::Desk.dims() };
        let emb = PatchEmbedding::new(dims, seed).unwrap();
        let r = Retriever::new(backend, &ds.prompt_db, Some(&emb), seed, Exec::Sequential).unwrap();
        let q = &ds.train_queries[0].image;
        let small = r.topk(q, k, 1).unwrap();
        let large = r.topk(q, (k + extra).min(24), 1).unwrap();
        prop_assert_eq!(&large.entries[..k], &small.entries[..]);
        for w in large.entries.windows(2) {
            prop_assert!(w[0].1 >= w[1].1);
        }
    }
}
