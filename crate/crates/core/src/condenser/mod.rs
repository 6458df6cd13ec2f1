//! The trainable Condenser.
//!
//! Per-stream self-attention (one block for the query, one block shared by
//! prompt images and prompt labels), a `[K, hw, D] -> [hw, K, D]` permutation,
//! then patch-wise cross-attention: each query patch attends over the `K`
//! prompt patches at the same grid position. Image and label outputs use
//! separate projections but score against the same inputs, prompt images
//! serving as keys for both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::canvas::{PatchEmbedding, Quadrant};
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, AttnShape};
use crate::numerics::{xavier, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use crate::profile::ModelDims;
use crate::taskgen::Sample;

pub const PREFIX: &str = "condenser";

/// How the `K` prompt feature pairs become one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Patch-wise cross-attention over the candidates at each grid position.
    #[default]
    Patchwise,
    /// Cross-attention over every position of every candidate.
    Full,
    /// Average of the embedded prompts; no parameters.
    MeanPool,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Patchwise => "condense",
            Fusion::Full => "full_ca",
            Fusion::MeanPool => "mean_pool",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "condense" => Ok(Fusion::Patchwise),
            "full_ca" => Ok(Fusion::Full),
            "mean_pool" => Ok(Fusion::MeanPool),
            _ => Err(Error::Config(format!("unknown fusion `{s}`"))),
        }
    }
}

/// Seeded Xavier initialisation of every Condenser tensor. Layer norms start
/// at unit gain and zero bias.
pub fn init_params<T: Scalar>(dims: &ModelDims, seed: u64) -> ParamStore<T> {
    let d = dims.dim;
    let mut p = ParamStore::new();
    nn::init_attention(&mut p, seed, &format!("{PREFIX}/sa1"), d);
    nn::init_attention(&mut p, seed, &format!("{PREFIX}/sa2"), d);
    for i in 1..=6 {
        nn::init_layer_norm(&mut p, &format!("{PREFIX}/ln{i}"), d);
    }
    for stream in ["pca_i", "pca_l"] {
        for w in ["w_q", "w_k", "w_v"] {
            let name = format!("{PREFIX}/{stream}/{w}");
            p.insert(name.clone(), xavier(seed, &name, d, d));
        }
    }
    p
}

/// Every tensor name [`init_params`] produces.
pub fn param_names(dims: &ModelDims) -> Vec<String> {
    init_params::<f32>(dims, 0).names().map(str::to_string).collect()
}

/// Graph handles of one condensed prompt, `[hw, D]` each, plus the attention
/// distributions that produced them (`[hw, 1, K]` for patch-wise fusion,
/// `[1, hw, K·hw]` for full cross-attention).
#[derive(Clone, Copy, Debug)]
pub struct CondensedVars {
    pub image: Var,
    pub label: Var,
    pub attn_image: Option<Var>,
    pub attn_label: Option<Var>,
}

/// Residual block `LN_out(SA(LN_in(x)) + x)` over `batch` sequences.
fn attend_block<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    sa: &str,
    ln_in: &str,
    ln_out: &str,
    x: Var,
    shape: AttnShape,
) -> Result<Var> {
    let h = nn::layer_norm(g, b, &format!("{PREFIX}/{ln_in}"), x)?;
    let a = nn::self_attention(g, b, &format!("{PREFIX}/{sa}"), h, shape, None)?;
    let r = g.add(a, x)?;
    nn::layer_norm(g, b, &format!("{PREFIX}/{ln_out}"), r)
}

/// Query stream through SA1, `[hw, D]`.
pub fn attend_query<T: Scalar>(g: &mut Graph<T>, b: &Bound, dims: &ModelDims, fq: Var) -> Result<Var> {
    let shape = AttnShape {
        batch: 1,
        n: dims.quadrant_len(),
        d: dims.dim,
        heads: dims.heads,
    };
    attend_block(g, b, "sa1", "ln1", "ln4", fq, shape)
}

/// Both prompt streams through the shared SA2, each `[K·hw, D]`.
pub fn attend_prompts<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    dims: &ModelDims,
    fc_i: Var,
    fc_l: Var,
    k: usize,
) -> Result<(Var, Var)> {
    let shape = AttnShape {
        batch: k,
        n: dims.quadrant_len(),
        d: dims.dim,
        heads: dims.heads,
    };
    let i1 = attend_block(g, b, "sa2", "ln2", "ln5", fc_i, shape)?;
    let l1 = attend_block(g, b, "sa2", "ln3", "ln6", fc_l, shape)?;
    Ok((i1, l1))
}

pub fn self_attend_streams<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    dims: &ModelDims,
    fq: Var,
    fc_i: Var,
    fc_l: Var,
    k: usize,
) -> Result<(Var, Var, Var)> {
    if k == 0 {
        return Err(Error::Config("the Condenser needs at least one prompt".into()));
    }
    let hw = dims.quadrant_len();
    for (v, rows, what) in [(fq, hw, "query"), (fc_i, k * hw, "prompt images"), (fc_l, k * hw, "prompt labels")] {
        let dv = g.dims(v);
        if g.value(v).len() != rows * dims.dim || *dv.last().unwrap() != dims.dim {
            return Err(shape_err!("{what} features {dv:?}, expected {rows} rows of width {}", dims.dim));
        }
    }
    let fq1 = attend_query(g, b, dims, fq)?;
    let (i1, l1) = attend_prompts(g, b, dims, fc_i, fc_l, k)?;
    Ok((fq1, i1, l1))
}

/// `[K, hw, D] -> [hw, K, D]`.
pub fn permute_prompts<T: Scalar>(g: &mut Graph<T>, f: Var, k: usize, hw: usize, d: usize) -> Result<Var> {
    g.swap_axes(f, 1, k, hw, d, &[hw, k, d])
}

/// Plain-tensor form of [`permute_prompts`] and its inverse.
pub fn permute_tensor<T: Scalar>(f: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let d = f.dims();
    if d.len() != 4 {
        return Err(shape_err!("expected [a, h, w, D] features, got {d:?}"));
    }
    let mut g = Graph::new();
    let x = g.constant(f.clone());
    let out = if inverse {
        let (h, w, k, dd) = (d[0], d[1], d[2], d[3]);
        g.swap_axes(x, 1, h * w, k, dd, &[k, h, w, dd])?
    } else {
        let (k, h, w, dd) = (d[0], d[1], d[2], d[3]);
        g.swap_axes(x, 1, k, h * w, dd, &[h, w, k, dd])?
    };
    Ok(g.value(out).clone())
}

#[allow(clippy::too_many_arguments)]
/// One stream of patch-wise cross-attention. `keys_src` and `vals_src` are
/// `[hw, K, D]`; the result is `[hw, D]` plus the `[hw, 1, K]` weights.
fn patchwise_stream<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    stream: &str,
    fq1: Var,
    keys_src: Var,
    vals_src: Var,
    hw: usize,
    d: usize,
) -> Result<(Var, Var)> {
    let w = |n: &str| b.get(&format!("{PREFIX}/{stream}/{n}"));
    let q = g.matmul(fq1, w("w_q")?)?;
    let q = g.scale(q, T::one() / T::lit(d as f64).sqrt())?;
    let q = g.reshape(q, &[hw, 1, d])?;
    let keys = g.matmul(keys_src, w("w_k")?)?;
    let vals = g.matmul(vals_src, w("w_v")?)?;
    let scores = g.bmm(q, keys, true)?;
    let attn = g.softmax(scores)?;
    let out = g.bmm(attn, vals, false)?;
    Ok((g.reshape(out, &[hw, d])?, attn))
}

/// Patch-wise cross-attention on post-self-attention features:
/// `fq1` is `[hw, D]`, `fc_i2` and `fc_l2` are `[hw, K, D]`.
pub fn pca_condense<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    fq1: Var,
    fc_i2: Var,
    fc_l2: Var,
) -> Result<CondensedVars> {
    let dv = g.dims(fc_i2).to_vec();
    if dv.len() != 3 || g.dims(fc_l2) != dv.as_slice() || g.value(fq1).len() != dv[0] * dv[2] {
        return Err(shape_err!(
            "pca_condense: query {:?}, prompt images {dv:?}, prompt labels {:?}",
            g.dims(fq1),
            g.dims(fc_l2)
        ));
    }
    let (hw, d) = (dv[0], dv[2]);
    let (image, attn_image) = patchwise_stream(g, b, "pca_i", fq1, fc_i2, fc_i2, hw, d)?;
    let (label, attn_label) = patchwise_stream(g, b, "pca_l", fq1, fc_i2, fc_l2, hw, d)?;
    Ok(CondensedVars {
        image,
        label,
        attn_image: Some(attn_image),
        attn_label: Some(attn_label),
    })
}

/// Cross-attention where each query patch sees all `K·hw` prompt positions.
/// Same parameters and inputs as [`pca_condense`].
pub fn full_cross_attention_condense<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    fq1: Var,
    fc_i2: Var,
    fc_l2: Var,
) -> Result<CondensedVars> {
    let dv = g.dims(fc_i2).to_vec();
    if dv.len() != 3 || g.dims(fc_l2) != dv.as_slice() || g.value(fq1).len() != dv[0] * dv[2] {
        return Err(shape_err!("full_ca: prompt features {dv:?} vs {:?}", g.dims(fc_l2)));
    }
    let (hw, k, d) = (dv[0], dv[1], dv[2]);
    let flat_i = g.reshape(fc_i2, &[1, hw * k, d])?;
    let flat_l = g.reshape(fc_l2, &[1, hw * k, d])?;
    let stream = |g: &mut Graph<T>, name: &str, vals_src: Var| -> Result<(Var, Var)> {
        let w = |n: &str| b.get(&format!("{PREFIX}/{name}/{n}"));
        let q = g.matmul(fq1, w("w_q")?)?;
        let q = g.scale(q, T::one() / T::lit(d as f64).sqrt())?;
        let q = g.reshape(q, &[1, hw, d])?;
        let keys = g.matmul(flat_i, w("w_k")?)?;
        let vals = g.matmul(vals_src, w("w_v")?)?;
        let scores = g.bmm(q, keys, true)?;
        let attn = g.softmax(scores)?;
        let out = g.bmm(attn, vals, false)?;
        Ok((g.reshape(out, &[hw, d])?, attn))
    };
    let (image, attn_image) = stream(g, "pca_i", flat_i)?;
    let (label, attn_label) = stream(g, "pca_l", flat_l)?;
    Ok(CondensedVars {
        image,
        label,
        attn_image: Some(attn_image),
        attn_label: Some(attn_label),
    })
}

/// Embedded features of one prompt: image at the TL offset, label at TR.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

impl PromptEmbedding {
    pub fn new(emb: &PatchEmbedding, prompt: &Sample) -> Result<Self> {
        let flat = |t: Tensor<f32>| {
            let n = t.rows();
            let d = t.last_dim();
            t.reshape(&[n, d])
        };
        Ok(Self {
            image: flat(emb.embed_quadrant(&prompt.image, Quadrant::TL)?)?,
            label: flat(emb.embed_quadrant(&prompt.label, Quadrant::TR)?)?,
        })
    }
}

/// Embeds every prompt of a database.
pub fn embed_prompts(emb: &PatchEmbedding, db: &[Sample], exec: crate::par::Exec) -> Result<Vec<PromptEmbedding>> {
    crate::par::map_slice(exec, db, |p| PromptEmbedding::new(emb, p))
        .into_iter()
        .collect()
}

/// BL-offset features of each query image, `[hw, D]`.
pub fn embed_queries(emb: &PatchEmbedding, qs: &[Sample], exec: crate::par::Exec) -> Result<Vec<Tensor<f32>>> {
    let hw = emb.dims().quadrant_len();
    let d = emb.dims().dim;
    crate::par::map_slice(exec, qs, |q| emb.embed_quadrant(&q.image, Quadrant::BL)?.reshape(&[hw, d]))
        .into_iter()
        .collect()
}

/// Post-SA2 features of one prompt. They depend only on the prompt and the
/// Condenser weights, so inference can compute them once per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptFeatures {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

fn stack<T: Scalar>(parts: impl Iterator<Item = Tensor<T>>, rows: usize, d: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        n += 1;
    }
    Tensor::new(vec![n * rows, d], data)
}

/// Builds the Condenser on graph `g` from embedded inputs. `fq` is the
/// BL-embedded query `[hw, D]`; `prompts` are TL/TR embeddings.
pub fn condense_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    dims: &ModelDims,
    fq: Var,
    prompts: &[&PromptEmbedding],
    fusion: Fusion,
) -> Result<CondensedVars> {
    let k = prompts.len();
    if k == 0 {
        return Err(Error::Config("the Condenser needs at least one prompt".into()));
    }
    let (hw, d) = (dims.quadrant_len(), dims.dim);
    if fusion == Fusion::MeanPool {
        return mean_pool_graph(g, prompts, hw, d);
    }
    let fc_i = g.constant(stack(prompts.iter().map(|p| p.image.cast()), hw, d)?);
    let fc_l = g.constant(stack(prompts.iter().map(|p| p.label.cast()), hw, d)?);
    let (fq1, i1, l1) = self_attend_streams(g, b, dims, fq, fc_i, fc_l, k)?;
    fuse(g, b, fq1, i1, l1, k, hw, d, fusion)
}

#[allow(clippy::too_many_arguments)]
fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    fq1: Var,
    i1: Var,
    l1: Var,
    k: usize,
    hw: usize,
    d: usize,
    fusion: Fusion,
) -> Result<CondensedVars> {
    let i2 = permute_prompts(g, i1, k, hw, d)?;
    let l2 = permute_prompts(g, l1, k, hw, d)?;
    match fusion {
        Fusion::Patchwise => pca_condense(g, b, fq1, i2, l2),
        Fusion::Full => full_cross_attention_condense(g, b, fq1, i2, l2),
        Fusion::MeanPool => unreachable!("handled by the caller"),
    }
}

fn mean_pool_graph<T: Scalar>(
    g: &mut Graph<T>,
    prompts: &[&PromptEmbedding],
    hw: usize,
    d: usize,
) -> Result<CondensedVars> {
    let mean = |sel: fn(&PromptEmbedding) -> &Tensor<f32>| -> Result<Tensor<T>> {
        let mut acc = vec![0.0f64; hw * d];
        for p in prompts {
            for (a, &v) in acc.iter_mut().zip(sel(p).data()) {
                *a += v as f64;
            }
        }
        let k = prompts.len() as f64;
        Tensor::new(vec![hw, d], acc.into_iter().map(|a| T::lit(a / k)).collect())
    };
    let image = g.constant(mean(|p| &p.image)?);
    let label = g.constant(mean(|p| &p.label)?);
    Ok(CondensedVars {
        image,
        label,
        attn_image: None,
        attn_label: None,
    })
}

/// Condensed prompt as plain tensors, `[h, w, D]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct CondensedPrompt {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

/// Attention distributions of one condensation, copied out of the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// `[hw, K]` rows for patch-wise fusion.
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
}

/// Trained Condenser weights together with the geometry they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Condenser {
    pub dims: ModelDims,
    pub params: ParamStore<f32>,
}

impl Condenser {
    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            dims,
            params: init_params(&dims, seed),
        })
    }

    /// Validates that `params` holds exactly the Condenser inventory.
    pub fn from_params(dims: ModelDims, params: ParamStore<f32>) -> Result<Self> {
        dims.validate()?;
        let reference = init_params::<f32>(&dims, 0);
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.dims() != t.dims() {
                return Err(Error::Tensor {
                    name: name.to_string(),
                    reason: format!("expected dims {:?}, found {:?}", t.dims(), got.dims()),
                });
            }
        }
        if let Some(extra) = params.names().find(|n| !reference.contains(n)) {
            return Err(Error::Tensor {
                name: extra.to_string(),
                reason: "unknown Condenser tensor".into(),
            });
        }
        Ok(Self { dims, params })
    }

    /// Condenses embedded inputs and copies the results out of the graph.
    pub fn condense_embedded(
        &self,
        fq: &Tensor<f32>,
        prompts: &[&PromptEmbedding],
        fusion: Fusion,
    ) -> Result<(CondensedPrompt, Option<AttentionMaps>)> {
        let mut g = Graph::<f32>::new();
        let b = self.params.bind(&mut g, false);
        let hw = self.dims.quadrant_len();
        let fq = g.constant(fq.clone().reshape(&[hw, self.dims.dim])?);
        let out = condense_graph(&mut g, &b, &self.dims, fq, prompts, fusion)?;
        Ok(self.extract(&g, out))
    }

    /// Post-SA2 features of one prompt, for [`Condenser::condense_cached`].
    pub fn encode_prompt(&self, p: &PromptEmbedding) -> Result<PromptFeatures> {
        let mut g = Graph::<f32>::new();
        let b = self.params.bind(&mut g, false);
        let i = g.constant(p.image.clone());
        let l = g.constant(p.label.clone());
        let (i1, l1) = attend_prompts(&mut g, &b, &self.dims, i, l, 1)?;
        Ok(PromptFeatures {
            image: g.value(i1).clone(),
            label: g.value(l1).clone(),
        })
    }

    /// Same result as [`Condenser::condense_embedded`], bit for bit, with
    /// the prompt self-attention taken from a cache.
    pub fn condense_cached(
        &self,
        fq: &Tensor<f32>,
        prompts: &[&PromptFeatures],
        fusion: Fusion,
    ) -> Result<(CondensedPrompt, Option<AttentionMaps>)> {
        let k = prompts.len();
        if k == 0 {
            return Err(Error::Config("the Condenser needs at least one prompt".into()));
        }
        if fusion == Fusion::MeanPool {
            return Err(Error::Config("mean pooling works on embeddings, not cached features".into()));
        }
        let (hw, d) = (self.dims.quadrant_len(), self.dims.dim);
        let mut g = Graph::<f32>::new();
        let b = self.params.bind(&mut g, false);
        let fq = g.constant(fq.clone().reshape(&[hw, d])?);
        let fq1 = attend_query(&mut g, &b, &self.dims, fq)?;
        let i1 = g.constant(stack(prompts.iter().map(|p| p.image.clone()), hw, d)?);
        let l1 = g.constant(stack(prompts.iter().map(|p| p.label.clone()), hw, d)?);
        let out = fuse(&mut g, &b, fq1, i1, l1, k, hw, d, fusion)?;
        Ok(self.extract(&g, out))
    }

    fn extract(&self, g: &Graph<f32>, out: CondensedVars) -> (CondensedPrompt, Option<AttentionMaps>) {
        let gsz = self.dims.grid();
        let d = self.dims.dim;
        let grid = |v: Var| g.value(v).clone().reshape(&[gsz, gsz, d]).expect("hw rows");
        let cp = CondensedPrompt {
            image: grid(out.image),
            label: grid(out.label),
        };
        let attn = match (out.attn_image, out.attn_label) {
            (Some(i), Some(l)) => {
                let flat = |v: Var| {
                    let t = g.value(v).clone();
                    let last = t.last_dim();
                    let rows = t.rows();
                    t.reshape(&[rows, last]).expect("same length")
                };
                Some(AttentionMaps {
                    image: flat(i),
                    label: flat(l),
                })
            }
            _ => None,
        };
        (cp, attn)
    }

    /// Embeds the query and prompts, then condenses.
    pub fn condense(
        &self,
        emb: &PatchEmbedding,
        query_img: &crate::image::ImageGrid,
        prompts: &[&Sample],
        fusion: Fusion,
    ) -> Result<CondensedPrompt> {
        let fq = emb.embed_quadrant(query_img, Quadrant::BL)?;
        let pe: Vec<PromptEmbedding> = prompts
            .iter()
            .map(|p| PromptEmbedding::new(emb, p))
            .collect::<Result<_>>()?;
        let refs: Vec<&PromptEmbedding> = pe.iter().collect();
        Ok(self.condense_embedded(&fq, &refs, fusion)?.0)
    }
}

/// Mean of embedded prompt features over the candidates.
pub fn mean_pool_condense(emb: &PatchEmbedding, prompts: &[&Sample]) -> Result<CondensedPrompt> {
    if prompts.is_empty() {
        return Err(Error::Config("mean pooling needs at least one prompt".into()));
    }
    let dims = emb.dims();
    let c = Condenser {
        dims: *dims,
        params: ParamStore::new(),
    };
    let pe: Vec<PromptEmbedding> = prompts
        .iter()
        .map(|p| PromptEmbedding::new(emb, p))
        .collect::<Result<_>>()?;
    let refs: Vec<&PromptEmbedding> = pe.iter().collect();
    let fq = Tensor::zeros(&[dims.quadrant_len(), dims.dim]);
    Ok(c.condense_embedded(&fq, &refs, Fusion::MeanPool)?.0)
}
