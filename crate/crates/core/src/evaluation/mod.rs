//! Inference, metrics, evaluation reports and the K-scaling benchmark.

mod bench;
mod metrics;

pub use bench::{bench_csv, bench_k_scaling, write_bench_csv, BenchRow, MIN_QUERIES};
pub use metrics::{miou, mse_color};

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_graph, FrozenModel, TokenGrid};
use crate::canvas::Quadrant;
use crate::condenser::{embed_prompts, AttentionMaps, CondensedPrompt, Condenser, Fusion, PromptEmbedding, PromptFeatures};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::par::{self, Exec};
use crate::retrieval::{Backend, CandidateSet, Retriever};
use crate::taskgen::{Dataset, Sample, Task};
use crate::training::{write_atomic, Checkpoint, TrainConfig};

/// How the `K` retrieved prompts reach the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Condense,
    MeanPool,
    FullCa,
    /// `K` single-prompt passes with averaged answer probabilities.
    OutputFusion,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Condense => "condense",
            Mode::MeanPool => "mean_pool",
            Mode::FullCa => "full_ca",
            Mode::OutputFusion => "output_fusion",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condense" => Ok(Mode::Condense),
            "mean_pool" => Ok(Mode::MeanPool),
            "full_ca" => Ok(Mode::FullCa),
            "output_fusion" => Ok(Mode::OutputFusion),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (condense|mean_pool|full_ca|output_fusion)"
            ))),
        }
    }
}

/// A row of the ablation table: an inference mode, possibly combined with a
/// change to the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Condense,
    MeanPool,
    FullCa,
    OutputFusion,
    /// Trained without the alignment term.
    NoPa,
    /// Trained without the token-prediction term.
    NoTp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::NoPa => "no_pa",
            Variant::NoTp => "no_tp",
            other => other.mode().as_str(),
        }
    }

    /// How predictions are made.
    pub fn mode(self) -> Mode {
        match self {
            Variant::MeanPool => Mode::MeanPool,
            Variant::FullCa => Mode::FullCa,
            Variant::OutputFusion => Mode::OutputFusion,
            Variant::Condense | Variant::NoPa | Variant::NoTp => Mode::Condense,
        }
    }

    /// Whether the variant needs its own Condenser, as opposed to reusing a
    /// trained one or none at all.
    pub fn needs_training(self) -> bool {
        matches!(self, Variant::FullCa | Variant::NoPa | Variant::NoTp)
    }

    /// Applies the variant to a training config. Parameter-free variants have
    /// nothing to train and give a config error.
    pub fn training_config(self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = *base;
        match self {
            Variant::Condense => {}
            Variant::FullCa => cfg.fusion = Fusion::Full,
            Variant::NoPa => cfg.lambda = 0.0,
            Variant::NoTp => cfg.use_tp = false,
            Variant::MeanPool | Variant::OutputFusion => {
                return Err(Error::Config(format!("variant `{}` has no parameters to train", self.as_str())))
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_pa" => Ok(Variant::NoPa),
            "no_tp" => Ok(Variant::NoTp),
            _ => match s.parse::<Mode>() {
                Ok(Mode::Condense) => Ok(Variant::Condense),
                Ok(Mode::MeanPool) => Ok(Variant::MeanPool),
                Ok(Mode::FullCa) => Ok(Variant::FullCa),
                Ok(Mode::OutputFusion) => Ok(Variant::OutputFusion),
                Err(_) => Err(Error::Config(format!(
                    "unknown variant `{s}` (condense|mean_pool|full_ca|output_fusion|no_pa|no_tp)"
                ))),
            },
        }
    }
}

/// Index of the largest entry; ties go to the smaller index.
fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inference state for one checkpoint and prompt database: embedded prompts,
/// their cached post-self-attention features and a retriever.
pub struct Predictor<'a> {
    frozen: &'a FrozenModel,
    condenser: Option<&'a Condenser>,
    db: &'a [Sample],
    index: HashMap<&'a str, usize>,
    prompts: Vec<PromptEmbedding>,
    features: Vec<PromptFeatures>,
    retriever: Retriever<'a>,
    mask: Tensor<f32>,
    rows: Vec<usize>,
}

impl<'a> Predictor<'a> {
    pub fn new(ckpt: &'a Checkpoint, db: &'a [Sample], retrieval: Backend, seed: u64, exec: Exec) -> Result<Self> {
        let frozen = &ckpt.frozen;
        if let Some(s) = db.first() {
            if s.image.side() != frozen.dims.side {
                return Err(Error::Config(format!(
                    "prompt side {} does not match checkpoint side {}",
                    s.image.side(),
                    frozen.dims.side
                )));
            }
        }
        let condenser = ckpt.condenser.as_ref();
        let prompts = embed_prompts(&frozen.embedding, db, exec)?;
        let features = match condenser {
            Some(c) => par::map_slice(exec, &prompts, |p| c.encode_prompt(p))
                .into_iter()
                .collect::<Result<_>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            frozen,
            condenser,
            db,
            index: db.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect(),
            prompts,
            features,
            retriever: Retriever::new(retrieval, db, Some(&frozen.embedding), seed, exec)?,
            mask: frozen.mask_rows(),
            rows: frozen.answer_rows(),
        })
    }

    pub fn retrieve(&self, query: &ImageGrid, k: usize, stream_id: u64) -> Result<Vec<usize>> {
        Ok(self.candidates(query, k, stream_id)?.ids().map(|id| self.index[id]).collect())
    }

    pub fn candidates(&self, query: &ImageGrid, k: usize, stream_id: u64) -> Result<CandidateSet> {
        if k > self.db.len() {
            return Err(Error::Config(format!("K = {k} exceeds the {} prompts", self.db.len())));
        }
        self.retriever.topk(query, k, stream_id)
    }

    fn query_features(&self, query: &ImageGrid) -> Result<Tensor<f32>> {
        let d = &self.frozen.dims;
        self.frozen
            .embedding
            .embed_quadrant(query, Quadrant::BL)?
            .reshape(&[d.quadrant_len(), d.dim])
    }

    fn condenser(&self) -> Result<&Condenser> {
        self.condenser
            .ok_or_else(|| Error::Config("this mode needs a trained Condenser".into()))
    }

    /// Condensed prompt for the given candidates, plus attention maps when
    /// the mode has them.
    pub fn condensed(
        &self,
        query: &ImageGrid,
        candidates: &[usize],
        mode: Mode,
    ) -> Result<(CondensedPrompt, Option<AttentionMaps>)> {
        let fq = self.query_features(query)?;
        match mode {
            Mode::Condense | Mode::FullCa => {
                let fusion = if mode == Mode::Condense { Fusion::Patchwise } else { Fusion::Full };
                let condenser = self.condenser()?;
                let feats: Vec<&PromptFeatures> = candidates.iter().map(|&c| &self.features[c]).collect();
                condenser.condense_cached(&fq, &feats, fusion)
            }
            Mode::MeanPool => {
                let pooler = Condenser {
                    dims: self.frozen.dims,
                    params: ParamStore::new(),
                };
                let pe: Vec<&PromptEmbedding> = candidates.iter().map(|&c| &self.prompts[c]).collect();
                pooler.condense_embedded(&fq, &pe, Fusion::MeanPool)
            }
            Mode::OutputFusion => Err(Error::Config("output fusion does not condense".into())),
        }
    }

    /// Answer-region probabilities `[hw, N_t]` for one context.
    fn answer_probs(&self, image: &Tensor<f32>, label: &Tensor<f32>, fq: &Tensor<f32>) -> Result<Vec<f32>> {
        let dims = &self.frozen.dims;
        let (hw, d) = (dims.quadrant_len(), dims.dim);
        let mut g = Graph::<f32>::new();
        let b = self.frozen.backbone.bind(&mut g, false);
        let parts = [image, label, fq, &self.mask]
            .into_iter()
            .map(|t| t.clone().reshape(&[hw, d]).map(|t| g.constant(t)))
            .collect::<Result<Vec<_>>>()?;
        let x = g.concat(&parts)?;
        let p = forward_graph(&mut g, &b, dims, x, Some(&self.rows))?;
        Ok(g.value(p).data().to_vec())
    }

    fn decode(&self, probs: &[f32]) -> Result<ImageGrid> {
        let dims = &self.frozen.dims;
        let tokens = probs.chunks_exact(dims.n_tokens).map(|r| argmax(r) as u32 + 1).collect();
        let grid = TokenGrid::new(dims.grid(), dims.grid(), tokens)?;
        self.frozen.codebook.detokenize(&grid)
    }

    /// Predicted label for `query` from the given candidates.
    pub fn predict_with(&self, query: &ImageGrid, candidates: &[usize], mode: Mode) -> Result<ImageGrid> {
        if candidates.is_empty() {
            return Err(Error::Config("prediction needs at least one prompt".into()));
        }
        let fq = self.query_features(query)?;
        if mode == Mode::OutputFusion {
            let mut acc: Vec<f64> = Vec::new();
            for &c in candidates {
                let p = &self.prompts[c];
                let probs = self.answer_probs(&p.image, &p.label, &fq)?;
                if acc.is_empty() {
                    acc = vec![0.0; probs.len()];
                }
                for (a, &v) in acc.iter_mut().zip(&probs) {
                    *a += v as f64;
                }
            }
            let k = candidates.len() as f64;
            let mean: Vec<f32> = acc.into_iter().map(|a| (a / k) as f32).collect();
            return self.decode(&mean);
        }
        let (cp, _) = self.condensed(query, candidates, mode)?;
        let probs = self.answer_probs(&cp.image, &cp.label, &fq)?;
        self.decode(&probs)
    }

    /// Retrieves `k` prompts and predicts.
    pub fn predict(&self, query: &ImageGrid, k: usize, mode: Mode, stream_id: u64) -> Result<ImageGrid> {
        let c = self.retrieve(query, k, stream_id)?;
        self.predict_with(query, &c, mode)
    }
}

/// One-shot prediction; builds a [`Predictor`] over the whole database, so
/// prefer a predictor when labelling many queries.
pub fn predict_query_label(query_img: &ImageGrid, ds: &Dataset, ckpt: &Checkpoint, k: usize, mode: Mode) -> Result<ImageGrid> {
    let (backend, seed) = retrieval_of(ckpt);
    let p = Predictor::new(ckpt, &ds.prompt_db, backend, seed, Exec::Sequential)?;
    p.predict(query_img, k, mode, 0)
}

fn retrieval_of(ckpt: &Checkpoint) -> (Backend, u64) {
    match &ckpt.echo.train {
        Some(t) => (t.retrieval, t.seed),
        None => (Backend::Pixel, ckpt.seed),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Miou,
    Mse,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        if task.is_binary() {
            Metric::Miou
        } else {
            Metric::Mse
        }
    }

    pub fn score(self, pred: &ImageGrid, gt: &ImageGrid) -> Result<f64> {
        match self {
            Metric::Miou => miou(pred, gt),
            Metric::Mse => mse_color(pred, gt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub mode: Mode,
    pub task: Task,
    pub retrieval: Backend,
    pub seed: u64,
}

impl EvalConfig {
    /// Task and retrieval settings from the checkpoint's training config,
    /// falling back to segmentation with pixel retrieval.
    pub fn from_checkpoint(ckpt: &Checkpoint, k: usize, mode: Mode) -> Self {
        let (retrieval, seed) = retrieval_of(ckpt);
        Self {
            k,
            mode,
            task: ckpt.echo.train.map(|t| t.task).unwrap_or_default(),
            retrieval,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub value: f64,
    pub ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: Metric,
    pub n: usize,
    pub mean: f64,
    pub ms_per_query: f64,
    /// Peak resident set size of the process, where the OS reports it.
    pub peak_rss_kb: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub records: Vec<QueryRecord>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// One JSON object per query, then the aggregate with the config echo.
    /// `extra` is merged into the echo.
    pub fn to_jsonl(&self, extra: &serde_json::Value) -> Result<String> {
        let enc = |e: serde_json::Error| Error::Format(e.to_string());
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(enc)?);
            out.push('\n');
        }
        let line = serde_json::json!({
            "aggregate": self.aggregate,
            "config": self.config,
            "run": extra,
        });
        out.push_str(&serde_json::to_string(&line).map_err(enc)?);
        out.push('\n');
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path, extra: &serde_json::Value) -> Result<()> {
        write_atomic(path, self.to_jsonl(extra)?.as_bytes())
    }
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Scores every test query.
pub fn run_eval(ds: &Dataset, ckpt: &Checkpoint, cfg: &EvalConfig, exec: Exec) -> Result<EvalReport> {
    if ds.test_queries.is_empty() {
        return Err(Error::Config("no test queries to evaluate".into()));
    }
    let predictor = Predictor::new(ckpt, &ds.prompt_db, cfg.retrieval, cfg.seed, exec)?;
    let metric = Metric::for_task(cfg.task);
    let records = par::try_map_range(exec, ds.test_queries.len(), |i| {
        let q = &ds.test_queries[i];
        let t = Instant::now();
        let pred = predictor.predict(&q.image, cfg.k, cfg.mode, i as u64)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        Ok::<_, Error>(QueryRecord {
            id: q.id.clone(),
            value: metric.score(&pred, &q.label)?,
            ms,
        })
    })?;
    let n = records.len();
    let aggregate = Aggregate {
        metric,
        n,
        mean: records.iter().map(|r| r.value).sum::<f64>() / n as f64,
        ms_per_query: records.iter().map(|r| r.ms).sum::<f64>() / n as f64,
        peak_rss_kb: peak_rss_kb(),
    };
    Ok(EvalReport {
        config: cfg.clone(),
        records,
        aggregate,
    })
}

#[cfg(test)]
mod tests;
