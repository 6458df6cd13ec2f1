//! Condenser training: token prediction through the frozen backbone, feature
//! pre-alignment, SGD with a per-step cosine schedule, and checkpoints.

mod checkpoint;
pub mod losses;

pub use checkpoint::{write_atomic, Checkpoint, ConfigEcho};
pub use losses::{pre_alignment_graph, token_prediction_graph, total_loss};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_labeled_targets, context_graph, forward_graph, FrozenModel, TokenGrid};
use crate::canvas::Quadrant;
use crate::condenser::{condense_graph, embed_prompts, embed_queries, Condenser, Fusion, PromptEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor};
use crate::optim::{cosine_lr, sgd_update, GradSum};
use crate::par::{self, Exec};
use crate::profile::Profile;
use crate::retrieval::{Backend, Retriever};
use crate::rng::{mix, stream};
use crate::taskgen::{Dataset, Task};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub lr0: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub task: Task,
    pub profile: Profile,
    pub retrieval: Backend,
    pub fusion: Fusion,
    /// Turning this off drops the token-prediction term from the objective.
    pub use_tp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            k: 4,
            lambda: 0.4,
            lr0: 0.03,
            epochs: profile.epochs(),
            batch: profile.batch(),
            seed: 0,
            task: Task::Seg,
            profile,
            retrieval: Backend::Pixel,
            fusion: Fusion::Patchwise,
            use_tp: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("K must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr0));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be >= 1".into());
        }
        if self.lambda == 0.0 && !self.use_tp {
            return bad("λ = 0 with token prediction disabled leaves no objective".into());
        }
        if self.fusion == Fusion::MeanPool {
            return bad("mean pooling has no parameters to train".into());
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_tp: f64,
    pub loss_pa: f64,
    pub loss_total: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
}

/// One cosine-scheduled SGD step; returns the learning rate used.
pub fn sgd_cosine_step(params: &mut crate::numerics::ParamStore<f32>, grads: &GradSum, t: usize, total: usize, lr0: f64) -> Result<f64> {
    let lr = cosine_lr(lr0, t, total)?;
    sgd_update(params, grads, lr)?;
    Ok(lr)
}

/// Everything about one training query that does not change across epochs.
struct QueryData {
    fq: Tensor<f32>,
    /// Alignment targets: the query image at the prompt-image slot and the
    /// query label at the prompt-label slot.
    align_image: Tensor<f32>,
    align_label: Tensor<f32>,
    candidates: Vec<usize>,
    targets: Vec<TokenGrid>,
}

fn prepare(cfg: &TrainConfig, ds: &Dataset, frozen: &FrozenModel, exec: Exec) -> Result<Vec<QueryData>> {
    let dims = frozen.dims;
    let (hw, d) = (dims.quadrant_len(), dims.dim);
    let emb = &frozen.embedding;
    let retriever = Retriever::new(cfg.retrieval, &ds.prompt_db, Some(emb), cfg.seed, exec)?;
    let queries = embed_queries(emb, &ds.train_queries, exec)?;
    let index = |id: &str| ds.prompt_db.iter().position(|p| p.id == id).expect("retrieved from db");
    let out = par::try_map_range(exec, ds.train_queries.len(), |i| {
        let q = &ds.train_queries[i];
        let cands = retriever.topk(&q.image, cfg.k, i as u64)?;
        let candidates: Vec<usize> = cands.ids().map(index).collect();
        let targets = candidates
            .iter()
            .map(|&c| {
                let p = &ds.prompt_db[c];
                build_labeled_targets(&p.image, &p.label, &q.image, &q.label, &frozen.codebook)
            })
            .collect::<Result<_>>()?;
        Ok::<_, Error>(QueryData {
            fq: queries[i].clone(),
            align_image: emb.embed_quadrant(&q.image, Quadrant::TL)?.reshape(&[hw, d])?,
            align_label: emb.embed_quadrant(&q.label, Quadrant::TR)?.reshape(&[hw, d])?,
            candidates,
            targets,
        })
    })?;
    Ok(out)
}

struct StepOut {
    l_tp: f64,
    l_pa: f64,
    total: f64,
    grads: GradSum,
}

fn query_step(
    cfg: &TrainConfig,
    condenser: &Condenser,
    frozen: &FrozenModel,
    prompts: &[PromptEmbedding],
    mask: &Tensor<f32>,
    rows: &[usize],
    q: &QueryData,
) -> Result<StepOut> {
    let dims = &frozen.dims;
    let mut g = Graph::<f32>::new();
    let cb = condenser.params.bind(&mut g, true);
    let bb = frozen.backbone.bind(&mut g, false);
    let fq = g.constant(q.fq.clone());
    let chosen: Vec<&PromptEmbedding> = q.candidates.iter().map(|&c| &prompts[c]).collect();
    let cv = condense_graph(&mut g, &cb, dims, fq, &chosen, cfg.fusion)?;

    let m = g.constant(mask.clone());
    let x = context_graph(&mut g, cv.image, cv.label, fq, m, dims.dim)?;
    let probs = forward_graph(&mut g, &bb, dims, x, Some(rows))?;
    let tp = token_prediction_graph(&mut g, probs, &q.targets)?;

    let ai = g.constant(q.align_image.clone());
    let al = g.constant(q.align_label.clone());
    let pa = pre_alignment_graph(&mut g, cv.image, cv.label, ai, al)?;

    let weighted_pa = g.scale(pa, cfg.lambda as f32)?;
    let objective = if cfg.use_tp { g.add(tp, weighted_pa)? } else { weighted_pa };
    let l_tp = g.value(tp).item() as f64;
    let l_pa = g.value(pa).item() as f64;
    let total = g.value(objective).item() as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("training loss (l_tp {l_tp}, l_pa {l_pa})")));
    }
    let grads = g.backward(objective)?;
    let mut sum = GradSum::new();
    sum.add(&cb, &grads);
    Ok(StepOut { l_tp, l_pa, total, grads: sum })
}

/// Trained Condenser plus the metrics stream.
#[derive(Clone, Debug)]
pub struct Fitted {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh Condenser against `frozen`. `on_epoch` sees each metrics
/// record as soon as the epoch ends.
pub fn fit_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    frozen: &FrozenModel,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Fitted> {
    cfg.validate()?;
    ds.check_coverage(cfg.k)?;
    if ds.train_queries.is_empty() {
        return Err(Error::Config("no training queries".into()));
    }
    let dims = frozen.dims;
    if ds.side() != Some(dims.side) {
        return Err(Error::Config(format!(
            "dataset side {:?} does not match model side {}",
            ds.side(),
            dims.side
        )));
    }
    let mut condenser = Condenser::new(dims, cfg.seed)?;
    let prompts = embed_prompts(&frozen.embedding, &ds.prompt_db, exec)?;
    let data = prepare(cfg, ds, frozen, exec)?;
    let mask = frozen.mask_rows();
    let rows = frozen.answer_rows();

    let n = data.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(mix(cfg.seed, 0x5452), epoch as u64));
        let (mut sum_tp, mut sum_pa, mut sum_total) = (0.0, 0.0, 0.0);
        let mut first_lr = None;
        for chunk in order.chunks(cfg.batch) {
            let outs = par::try_map_range(exec, chunk.len(), |j| {
                query_step(cfg, &condenser, frozen, &prompts, &mask, &rows, &data[chunk[j]])
            })?;
            let mut grads = GradSum::new();
            for o in outs {
                sum_tp += o.l_tp;
                sum_pa += o.l_pa;
                sum_total += o.total;
                grads.merge(o.grads);
            }
            grads.scale(1.0 / chunk.len() as f32);
            let lr = sgd_cosine_step(&mut condenser.params, &grads, step, total_steps, cfg.lr0)?;
            first_lr.get_or_insert(lr);
            step += 1;
        }
        let record = EpochMetrics {
            epoch: epoch + 1,
            loss_tp: sum_tp / n as f64,
            loss_pa: sum_pa / n as f64,
            loss_total: sum_total / n as f64,
            lr: first_lr.unwrap_or(0.0),
        };
        on_epoch(&record);
        metrics.push(record);
    }

    let checkpoint = Checkpoint {
        echo: ConfigEcho {
            dims,
            train: Some(*cfg),
            run: serde_json::Value::Null,
        },
        frozen: frozen.clone(),
        condenser: Some(condenser),
        seed: cfg.seed,
        epoch: cfg.epochs as u32,
    };
    Ok(Fitted { checkpoint, metrics })
}

pub fn fit(cfg: &TrainConfig, ds: &Dataset, frozen: &FrozenModel, exec: Exec) -> Result<Fitted> {
    fit_with(cfg, ds, frozen, exec, |_| {})
}

/// Wraps a frozen model (for example a pre-fit one) as a checkpoint with no
/// Condenser.
pub fn backbone_checkpoint(frozen: &FrozenModel, seed: u64, run: serde_json::Value) -> Checkpoint {
    Checkpoint {
        echo: ConfigEcho {
            dims: frozen.dims,
            train: None,
            run,
        },
        frozen: frozen.clone(),
        condenser: None,
        seed,
        epoch: 0,
    }
}
