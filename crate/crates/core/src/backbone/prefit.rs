//! Optional fitting of the frozen parts before Condenser training: a k-means
//! codebook over label patches, then the transformer on single-prompt
//! canvases with the raw prompt pasted in. Everything is frozen afterwards.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{forward_graph, init_params, Codebook, FrozenModel, MASK_TOKEN};
use crate::canvas::{patchify, PatchEmbedding, Quadrant};
use crate::condenser::{embed_prompts, embed_queries};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::optim::{cosine_lr, Adam, GradSum};
use crate::par::{self, Exec};
use crate::profile::ModelDims;
use crate::retrieval::{Backend, Retriever};
use crate::rng::{mix, stream};
use crate::taskgen::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrefitConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Each step pastes one prompt drawn from the query's top retrievals.
    pub prompt_pool: usize,
    pub kmeans_iters: usize,
    /// Patches sampled for k-means.
    pub kmeans_patches: usize,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch: 8,
            lr: 0.003,
            prompt_pool: 4,
            kmeans_iters: 25,
            kmeans_patches: 24_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrefitReport {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Label patches of queries and prompts, evenly subsampled to `limit`.
fn label_patches(ds: &Dataset, dims: &ModelDims, limit: usize, seed: u64) -> Result<Vec<f32>> {
    let mut all = Vec::new();
    for s in ds.train_queries.iter().chain(&ds.prompt_db) {
        all.extend_from_slice(patchify(&s.label, dims.patch)?.data());
    }
    let pl = dims.patch_len();
    let n = all.len() / pl;
    if n <= limit {
        return Ok(all);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, 0x6b6d));
    idx.truncate(limit);
    idx.sort_unstable();
    Ok(idx.iter().flat_map(|&i| all[i * pl..(i + 1) * pl].iter().copied()).collect())
}

pub fn prefit(dims: ModelDims, ds: &Dataset, cfg: &PrefitConfig, exec: Exec) -> Result<(FrozenModel, PrefitReport)> {
    dims.validate()?;
    if cfg.epochs == 0 || cfg.batch == 0 || cfg.prompt_pool == 0 {
        return Err(Error::Config("pre-fit needs epochs, batch and prompt pool >= 1".into()));
    }
    if ds.train_queries.is_empty() {
        return Err(Error::Config("pre-fit needs training queries".into()));
    }
    let embedding = PatchEmbedding::new(dims, cfg.seed)?;
    let patches = label_patches(ds, &dims, cfg.kmeans_patches, cfg.seed)?;
    let codebook = Codebook::fit(&dims, cfg.seed, &patches, cfg.kmeans_iters)?;
    let mut params = init_params::<f32>(&dims, cfg.seed);

    let prompts = embed_prompts(&embedding, &ds.prompt_db, exec)?;
    let queries = embed_queries(&embedding, &ds.train_queries, exec)?;
    let targets: Vec<Vec<usize>> = ds
        .train_queries
        .iter()
        .map(|q| Ok(codebook.tokenize_image(&q.label)?.zero_based()))
        .collect::<Result<_>>()?;
    let pool = cfg.prompt_pool.min(ds.prompt_db.len());
    let retriever = Retriever::new(Backend::Pixel, &ds.prompt_db, None, cfg.seed, exec)?;
    let index = |id: &str| ds.prompt_db.iter().position(|p| p.id == id).expect("retrieved from db");
    let pools: Vec<Vec<usize>> = par::map_slice(exec, &ds.train_queries, |q| {
        retriever
            .topk(&q.image, pool, 0)
            .map(|c| c.ids().map(index).collect::<Vec<_>>())
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let br_pos = embedding.quadrant_positions(Quadrant::BR);
    let hw = dims.quadrant_len();
    let out_rows: Vec<usize> = (3 * hw..4 * hw).collect();
    let n = ds.train_queries.len();
    let steps_per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let mut report = PrefitReport::default();

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(mix(cfg.seed, 0x5052), epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let results = par::try_map_range(exec, chunk.len(), |j| {
                let qi = chunk[j];
                let mut rng = stream(mix(cfg.seed, epoch as u64), qi as u64);
                let p = &prompts[pools[qi][rng.gen_range(0..pools[qi].len())]];
                let mut g = Graph::<f32>::new();
                let b = params.bind(&mut g, true);
                let mask = g.broadcast_rows(b.get(MASK_TOKEN)?, hw)?;
                let pos = g.constant(br_pos.clone());
                let mask = g.add(mask, pos)?;
                let tl = g.constant(p.image.clone());
                let tr = g.constant(p.label.clone());
                let bl = g.constant(queries[qi].clone());
                let x = g.concat(&[tl, tr, bl, mask])?;
                let probs = forward_graph(&mut g, &b, &dims, x, Some(&out_rows))?;
                let loss = g.cross_entropy(probs, &targets[qi])?;
                let value = g.value(loss).item() as f64;
                let grads = g.backward(loss)?;
                let mut sum = GradSum::new();
                sum.add(&b, &grads);
                Ok::<_, Error>((value, sum))
            })?;
            let mut grads = GradSum::new();
            for (loss, g) in results {
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("pre-fit loss at epoch {epoch}")));
                }
                epoch_loss += loss;
                grads.merge(g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            let lr = cosine_lr(cfg.lr, step, total)?;
            adam.step(&mut params, &grads, lr)?;
            step += 1;
        }
        report.epoch_losses.push(epoch_loss / n as f64);
    }

    let frozen = FrozenModel {
        dims,
        embedding,
        codebook,
        backbone: params,
    };
    Ok((frozen, report))
}

/// Mean cross-entropy of the frozen model on single-prompt canvases built
/// from each query's top retrieval.
pub fn single_prompt_loss(frozen: &FrozenModel, ds: &Dataset, exec: Exec) -> Result<f64> {
    let dims = frozen.dims;
    let prompts = embed_prompts(&frozen.embedding, &ds.prompt_db, exec)?;
    let retriever = Retriever::new(Backend::Pixel, &ds.prompt_db, None, 0, exec)?;
    let mask = frozen.mask_rows();
    let hw = dims.quadrant_len();
    let rows: Vec<usize> = (3 * hw..4 * hw).collect();
    let losses = par::try_map_range(exec, ds.test_queries.len(), |i| {
        let q = &ds.test_queries[i];
        let top = retriever.topk(&q.image, 1, 0)?;
        let pi = ds.prompt_db.iter().position(|p| p.id == top.entries[0].0).expect("in db");
        let fq = frozen.embedding.embed_quadrant(&q.image, Quadrant::BL)?.reshape(&[hw, dims.dim])?;
        let mut g = Graph::<f32>::new();
        let b = frozen.backbone.bind(&mut g, false);
        let parts: Vec<Tensor<f32>> = vec![prompts[pi].image.clone(), prompts[pi].label.clone(), fq, mask.clone()];
        let vars: Vec<_> = parts.into_iter().map(|t| g.constant(t)).collect();
        let x = g.concat(&vars)?;
        let probs = forward_graph(&mut g, &b, &dims, x, Some(&rows))?;
        let t = frozen.codebook.tokenize_image(&q.label)?.zero_based();
        let l = g.cross_entropy(probs, &t)?;
        Ok::<_, Error>(g.value(l).item() as f64)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}
