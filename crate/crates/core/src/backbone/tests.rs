use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::prefit::{prefit, PrefitConfig};
use super::*;
use crate::canvas::{slice_quadrant, MASK_FILL};
use crate::condenser::{CondensedPrompt, Condenser, Fusion};
use crate::par::Exec;
use crate::profile::Profile;
use crate::taskgen::gen_segmentation_set;

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

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> ImageGrid {
    ImageGrid::from_fn(side, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

#[test]
fn seeded_codebook_has_distinct_rows() {
    let cb = Codebook::seeded(&tiny(), 3);
    assert_eq!(cb.len(), 16);
    let rows: Vec<&[f32]> = cb.centroids().data().chunks(48).collect();
    for i in 0..rows.len() {
        for j in 0..i {
            assert_ne!(rows[i], rows[j]);
        }
    }
    assert_eq!(Codebook::seeded(&tiny(), 3), cb);
    assert!(cb.centroids().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn centroid_tiles_tokenize_to_their_index() {
    let cb = Codebook::seeded(&tiny(), 1);
    for j in [1u32, 7, 16] {
        let grid = TokenGrid::new(4, 4, vec![j; 16]).unwrap();
        let img = cb.detokenize(&grid).unwrap();
        let patch = cb.centroid(j).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let off = ((y % 4) * 4 + x % 4) * 3;
                assert_eq!(img.pixel(y, x), [patch[off], patch[off + 1], patch[off + 2]]);
            }
        }
        assert_eq!(cb.tokenize_image(&img).unwrap(), grid);
    }
    let bad = TokenGrid::new(1, 1, vec![17]).unwrap();
    assert!(matches!(cb.detokenize(&bad), Err(crate::Error::Index(_))));
}

#[test]
fn tokenization_is_patch_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cb = Codebook::seeded(&tiny(), 1);
    let (a, b, c, d) = (
        random_image(&mut rng, 16),
        random_image(&mut rng, 16),
        random_image(&mut rng, 16),
        random_image(&mut rng, 16),
    );
    let one = cb.tokenize(&assemble_canvas(&a, &b, &c, Some(&d)).unwrap()).unwrap();
    let other = random_image(&mut rng, 16);
    let two = cb.tokenize(&assemble_canvas(&other, &other, &c, Some(&d)).unwrap()).unwrap();
    for q in [Quadrant::BL, Quadrant::BR] {
        assert_eq!(one.slice_quadrant(q).unwrap(), two.slice_quadrant(q).unwrap());
    }
    assert_eq!(one, cb.tokenize(&assemble_canvas(&a, &b, &c, Some(&d)).unwrap()).unwrap());
}

#[test]
fn labeled_targets_depend_only_on_the_query_label() {
    let ds = gen_segmentation_set(4, 2, 12, 32).unwrap();
    let dims = Profile::Desk.dims();
    let cb = Codebook::seeded(&dims, 1);
    let q = &ds.train_queries[0];
    let expect = cb.tokenize_image(&q.label).unwrap();
    assert_eq!((expect.h, expect.w), (8, 8));
    for p in &ds.prompt_db[..4] {
        let t = build_labeled_targets(&p.image, &p.label, &q.image, &q.label, &cb).unwrap();
        assert_eq!(t, expect);
        let other_img = &ds.train_queries[1].image;
        let t2 = build_labeled_targets(&p.image, &p.label, other_img, &q.label, &cb).unwrap();
        assert_eq!(t2, expect);
    }
}

#[test]
fn fitted_codebook_represents_label_patches() {
    let ds = gen_segmentation_set(4, 32, 24, 32).unwrap();
    let dims = Profile::Desk.dims();
    let mut patches = Vec::new();
    for s in &ds.train_queries {
        patches.extend_from_slice(crate::canvas::patchify(&s.label, 4).unwrap().data());
    }
    let cb = Codebook::fit(&dims, 1, &patches, 20).unwrap();
    assert_eq!(cb.len(), 64);
    let mut agree = 0usize;
    let mut total = 0usize;
    for s in &ds.train_queries {
        let back = cb.detokenize(&cb.tokenize_image(&s.label).unwrap()).unwrap();
        for (a, b) in back.binarize().iter().zip(s.label.binarize()) {
            agree += (*a == b) as usize;
            total += 1;
        }
    }
    assert!(agree as f64 / total as f64 > 0.97, "{agree}/{total}");
}

fn frozen_tiny(seed: u64) -> FrozenModel {
    FrozenModel::seeded(tiny(), seed).unwrap()
}

fn random_cp(rng: &mut ChaCha8Rng, dims: &ModelDims) -> CondensedPrompt {
    let g = dims.grid();
    let mut t = || Tensor::from_fn(&[g, g, dims.dim], |_| rng.gen_range(-1.0f32..1.0));
    CondensedPrompt {
        image: t(),
        label: t(),
    }
}

#[test]
fn contextual_features_layout() {
    let frozen = frozen_tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cp = random_cp(&mut rng, &frozen.dims);
    let fq = Tensor::from_fn(&[4, 4, 8], |_| rng.gen_range(-1.0f32..1.0));
    let feats = assemble_contextual_features(&cp, &fq, &frozen).unwrap();
    assert_eq!(feats.dims(), &[8, 8, 8]);
    assert_eq!(slice_quadrant(&feats, Quadrant::TL).unwrap(), cp.image);
    assert_eq!(slice_quadrant(&feats, Quadrant::TR).unwrap(), cp.label);
    assert_eq!(slice_quadrant(&feats, Quadrant::BL).unwrap(), fq);
    let br = slice_quadrant(&feats, Quadrant::BR).unwrap();
    let pos = frozen.embedding.quadrant_positions(Quadrant::BR);
    let token = frozen.backbone.get(MASK_TOKEN).unwrap().data();
    for (row, p) in br.data().chunks(8).zip(pos.data().chunks(8)) {
        for i in 0..8 {
            assert!((row[i] - p[i] - token[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn forward_gives_distributions_and_is_frozen() {
    let frozen = frozen_tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cp = random_cp(&mut rng, &frozen.dims);
    let fq = Tensor::from_fn(&[4, 4, 8], |_| rng.gen_range(-1.0f32..1.0));
    let feats = assemble_contextual_features(&cp, &fq, &frozen).unwrap();
    let p = backbone_forward(&feats, &frozen).unwrap();
    assert_eq!(p.dims(), &[8, 8, 16]);
    for row in p.data().chunks(16) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(p, backbone_forward(&feats, &frozen).unwrap());

    // a tensor bound as frozen never receives a gradient buffer
    let mut g = Graph::<f32>::new();
    let b = frozen.backbone.bind(&mut g, false);
    let x = g.param(feats.clone().reshape(&[64, 8]).unwrap());
    let probs = forward_graph(&mut g, &b, &frozen.dims, x, None).unwrap();
    let loss = g.cross_entropy(probs, &vec![3; 64]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(b.iter().all(|(_, v)| grads.get(v).is_none()));
    let gx = grads.get(x).unwrap();
    assert!(gx.iter().any(|&v| v != 0.0));
}

#[test]
fn context_reaches_the_answer_region() {
    let frozen = frozen_tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cp = random_cp(&mut rng, &frozen.dims);
    let fq = Tensor::from_fn(&[4, 4, 8], |_| rng.gen_range(-1.0f32..1.0));
    let base = backbone_forward(&assemble_contextual_features(&cp, &fq, &frozen).unwrap(), &frozen).unwrap();
    let mut poked = cp.clone();
    poked.image.data_mut()[5] += 0.5;
    let moved = backbone_forward(&assemble_contextual_features(&poked, &fq, &frozen).unwrap(), &frozen).unwrap();
    let a = slice_quadrant(&base, Quadrant::BR).unwrap();
    let b = slice_quadrant(&moved, Quadrant::BR).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn restricted_rows_match_the_full_forward() {
    let frozen = frozen_tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_fn(&[64, 8], |_| rng.gen_range(-1.0f32..1.0));
    let rows: Vec<usize> = (48..64).collect();
    let mut g = Graph::<f32>::new();
    let b = frozen.backbone.bind(&mut g, false);
    let xv = g.constant(x);
    let full = forward_graph(&mut g, &b, &frozen.dims, xv, None).unwrap();
    let part = forward_graph(&mut g, &b, &frozen.dims, xv, Some(&rows)).unwrap();
    let full = g.value(full).data()[48 * 16..].to_vec();
    let part = g.value(part).data().to_vec();
    for (a, b) in full.iter().zip(&part) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn gradient_reaches_condensed_features_through_the_backbone() {
    let frozen = FrozenModel::seeded(Profile::Desk.dims(), 5).unwrap();
    let ds = gen_segmentation_set(5, 1, 12, 32).unwrap();
    let c = Condenser::new(frozen.dims, 5).unwrap();
    let prompts: Vec<&crate::taskgen::Sample> = ds.prompt_db.iter().take(2).collect();
    let cp = c.condense(&frozen.embedding, &ds.train_queries[0].image, &prompts, Fusion::Patchwise).unwrap();
    let mut g = Graph::<f32>::new();
    let b = frozen.backbone.bind(&mut g, false);
    let hw = frozen.dims.quadrant_len();
    let ci = g.param(cp.image.clone());
    let cl = g.param(cp.label.clone());
    let fq = g.constant(frozen.embedding.embed_quadrant(&ds.train_queries[0].image, Quadrant::BL).unwrap());
    let mask = g.constant(frozen.mask_rows());
    let x = context_graph(&mut g, ci, cl, fq, mask, frozen.dims.dim).unwrap();
    let rows = frozen.answer_rows();
    let probs = forward_graph(&mut g, &b, &frozen.dims, x, Some(&rows)).unwrap();
    let t = frozen.label_targets(&ds.train_queries[0].label).unwrap().zero_based();
    assert_eq!(t.len(), hw);
    let loss = g.cross_entropy(probs, &t).unwrap();
    let grads = g.backward(loss).unwrap();
    for v in [ci, cl] {
        let n: f64 = grads.get(v).unwrap().iter().map(|&x| (x as f64).powi(2)).sum();
        assert!(n > 0.0);
    }
}

#[test]
fn unlabeled_canvas_tokens_of_the_mask_are_uniform() {
    let cb = Codebook::seeded(&tiny(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_image(&mut rng, 16);
    let canvas = assemble_canvas(&a, &a, &a, None).unwrap();
    let br = cb.tokenize(&canvas).unwrap().slice_quadrant(Quadrant::BR).unwrap();
    let fill = cb.encode_patch(&[MASK_FILL; 48]);
    assert!(br.tokens.iter().all(|&t| t == fill));
}

#[test]
fn frozen_model_round_trips_through_params() {
    let frozen = frozen_tiny(6);
    let back = FrozenModel::from_params(tiny(), &frozen.to_params()).unwrap();
    assert_eq!(back, frozen);
    let mut broken = frozen.to_params();
    broken.insert("backbone/head/w", Tensor::zeros(&[3, 3]));
    assert!(matches!(
        FrozenModel::from_params(tiny(), &broken),
        Err(crate::Error::Tensor { .. })
    ));
}

#[test]
fn prefit_lowers_the_loss_and_is_deterministic() {
    let dims = ModelDims {
        side: 16,
        ..tiny()
    };
    let ds = gen_segmentation_set(3, 24, 24, 16).unwrap();
    let cfg = PrefitConfig {
        epochs: 4,
        batch: 4,
        kmeans_iters: 5,
        ..PrefitConfig::default()
    };
    let (a, rep) = prefit(dims, &ds, &cfg, Exec::Parallel).unwrap();
    let (b, _) = prefit(dims, &ds, &cfg, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    assert!(rep.epoch_losses.last().unwrap() < &rep.epoch_losses[0], "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detokenize_then_tokenize_is_identity(seed in 0u64..1000, tokens in proptest::collection::vec(1u32..=16, 16)) {
        let cb = Codebook::seeded(&tiny(), seed);
        let grid = TokenGrid::new(4, 4, tokens).unwrap();
        let img = cb.detokenize(&grid).unwrap();
        prop_assert_eq!(cb.tokenize_image(&img).unwrap(), grid);
    }
}
