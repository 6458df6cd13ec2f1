//! Frozen stand-ins for the inpainting backbone: patch tokenizer, a small
//! pre-norm transformer that maps an embedded canvas to token probabilities,
//! and the decoder back to pixels.

mod codebook;
pub mod prefit;

pub use codebook::{Codebook, TokenGrid, CENTROIDS};

use crate::canvas::{assemble_canvas, quadrant_major_to_canvas, PatchEmbedding, Quadrant};
use crate::condenser::CondensedPrompt;
use crate::error::{shape_err, Result};
use crate::image::ImageGrid;
use crate::nn::{self, AttnShape};
use crate::numerics::{uniform, xavier, Bound, Graph, ParamStore, Scalar, Tensor, Var};
use crate::profile::ModelDims;

pub const PREFIX: &str = "backbone";
pub const MASK_TOKEN: &str = "backbone/mask_token";

/// Hidden width of the MLP relative to `D`.
const MLP_RATIO: usize = 2;

pub fn init_params<T: Scalar>(dims: &ModelDims, seed: u64) -> ParamStore<T> {
    let (d, h) = (dims.dim, dims.dim * MLP_RATIO);
    let mut p = ParamStore::new();
    for l in 0..dims.layers {
        let base = format!("{PREFIX}/layer{l}");
        nn::init_layer_norm(&mut p, &format!("{base}/ln_attn"), d);
        nn::init_attention(&mut p, seed, &format!("{base}/attn"), d);
        nn::init_layer_norm(&mut p, &format!("{base}/ln_mlp"), d);
        let w1 = format!("{base}/mlp/w1");
        p.insert(w1.clone(), xavier(seed, &w1, d, h));
        p.insert(format!("{base}/mlp/b1"), Tensor::zeros(&[h]));
        let w2 = format!("{base}/mlp/w2");
        p.insert(w2.clone(), xavier(seed, &w2, h, d));
        p.insert(format!("{base}/mlp/b2"), Tensor::zeros(&[d]));
    }
    nn::init_layer_norm(&mut p, &format!("{PREFIX}/ln_final"), d);
    let head = format!("{PREFIX}/head/w");
    p.insert(head.clone(), xavier(seed, &head, d, dims.n_tokens));
    p.insert(format!("{PREFIX}/head/b"), Tensor::zeros(&[dims.n_tokens]));
    p.insert(MASK_TOKEN, uniform(seed, MASK_TOKEN, &[d], -0.5, 0.5));
    p
}

/// Transformer over `x` (`[n, D]`), returning `[rows, N_t]` probabilities.
/// With `out_rows`, the last layer and the head run only for those rows;
/// earlier layers always see every token.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    dims: &ModelDims,
    x: Var,
    out_rows: Option<&[usize]>,
) -> Result<Var> {
    let n = g.value(x).rows();
    if g.value(x).last_dim() != dims.dim {
        return Err(shape_err!("backbone width {} fed {:?}", dims.dim, g.dims(x)));
    }
    let shape = AttnShape {
        batch: 1,
        n,
        d: dims.dim,
        heads: dims.heads,
    };
    let mut h = x;
    for l in 0..dims.layers {
        let base = format!("{PREFIX}/layer{l}");
        let rows = if l + 1 == dims.layers { out_rows } else { None };
        let normed = nn::layer_norm(g, b, &format!("{base}/ln_attn"), h)?;
        let a = nn::self_attention(g, b, &format!("{base}/attn"), normed, shape, rows)?;
        let skip = match rows {
            Some(idx) => g.gather_rows(h, idx)?,
            None => h,
        };
        h = g.add(skip, a)?;
        let normed = nn::layer_norm(g, b, &format!("{base}/ln_mlp"), h)?;
        let u = g.matmul(normed, b.get(&format!("{base}/mlp/w1"))?)?;
        let u = g.add_row(u, b.get(&format!("{base}/mlp/b1"))?)?;
        let u = g.gelu(u)?;
        let u = g.matmul(u, b.get(&format!("{base}/mlp/w2"))?)?;
        let u = g.add_row(u, b.get(&format!("{base}/mlp/b2"))?)?;
        h = g.add(h, u)?;
    }
    let h = nn::layer_norm(g, b, &format!("{PREFIX}/ln_final"), h)?;
    let logits = g.matmul(h, b.get(&format!("{PREFIX}/head/w"))?)?;
    let logits = g.add_row(logits, b.get(&format!("{PREFIX}/head/b"))?)?;
    g.softmax(logits)
}

/// Everything that stays fixed while the Condenser trains.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenModel {
    pub dims: ModelDims,
    pub embedding: PatchEmbedding,
    pub codebook: Codebook,
    pub backbone: ParamStore<f32>,
}

impl FrozenModel {
    /// Pure seeded initialisation, no fitting.
    pub fn seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        Ok(Self {
            dims,
            embedding: PatchEmbedding::new(dims, seed)?,
            codebook: Codebook::seeded(&dims, seed),
            backbone: init_params(&dims, seed),
        })
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut p = self.backbone.clone();
        p.extend(self.embedding.to_params());
        p.extend(self.codebook.to_params());
        p
    }

    /// Reads the `backbone/`, `embedding/` and `codebook/` tensors of a
    /// store, checking their shapes against `dims`.
    pub fn from_params(dims: ModelDims, params: &ParamStore<f32>) -> Result<Self> {
        let embedding = PatchEmbedding::from_params(dims, params)?;
        let codebook = Codebook::from_params(&dims, params)?;
        let reference = init_params::<f32>(&dims, 0);
        let mut backbone = ParamStore::new();
        for (name, t) in reference.iter() {
            backbone.insert(name, crate::canvas::expect_dims(params, name, t.dims())?);
        }
        Ok(Self {
            dims,
            embedding,
            codebook,
            backbone,
        })
    }

    /// Mask token plus the answer-region positions, `[hw, D]`.
    pub fn mask_rows(&self) -> Tensor<f32> {
        let mut rows = self.embedding.quadrant_positions(Quadrant::BR);
        let token = self.backbone.get(MASK_TOKEN).expect("inventory checked").data().to_vec();
        for row in rows.data_mut().chunks_exact_mut(self.dims.dim) {
            for (r, &t) in row.iter_mut().zip(&token) {
                *r += t;
            }
        }
        rows
    }

    /// Row indices of the answer region in quadrant-major layout.
    pub fn answer_rows(&self) -> Vec<usize> {
        let hw = self.dims.quadrant_len();
        (3 * hw..4 * hw).collect()
    }

    /// Tokens of the query label as it would sit in the answer region.
    pub fn label_targets(&self, query_lbl: &ImageGrid) -> Result<TokenGrid> {
        self.codebook.tokenize_image(query_lbl)
    }
}

/// Quadrant-major context rows on a graph: condensed prompt image and label,
/// query features, then the mask rows.
pub fn context_graph<T: Scalar>(
    g: &mut Graph<T>,
    cp_image: Var,
    cp_label: Var,
    query: Var,
    mask_rows: Var,
    d: usize,
) -> Result<Var> {
    let parts: Vec<Var> = [cp_image, cp_label, query, mask_rows]
        .into_iter()
        .map(|v| {
            let n = g.value(v).len() / d;
            g.reshape(v, &[n, d])
        })
        .collect::<Result<_>>()?;
    g.concat(&parts)
}

/// `[2h, 2w, D]` contextual features in canvas layout.
pub fn assemble_contextual_features(
    cp: &CondensedPrompt,
    query_feats: &Tensor<f32>,
    frozen: &FrozenModel,
) -> Result<Tensor<f32>> {
    let dims = &frozen.dims;
    let (gs, d) = (dims.grid(), dims.dim);
    let hw = dims.quadrant_len();
    for t in [&cp.image, &cp.label, query_feats] {
        if t.len() != hw * d {
            return Err(shape_err!("quadrant features {:?}, expected {gs}x{gs}x{d}", t.dims()));
        }
    }
    let mask = frozen.mask_rows();
    let parts = [cp.image.data(), cp.label.data(), query_feats.data(), mask.data()];
    let data = crate::canvas::assemble_quadrants_raw(parts, gs, gs, d)?;
    Tensor::new(vec![2 * gs, 2 * gs, d], data)
}

/// Token probabilities for every canvas position, `[2h, 2w, N_t]`.
pub fn backbone_forward(feats: &Tensor<f32>, frozen: &FrozenModel) -> Result<Tensor<f32>> {
    let dims = &frozen.dims;
    let full = 2 * dims.grid();
    if feats.dims() != [full, full, dims.dim] {
        return Err(shape_err!("backbone expects [{full}, {full}, {}], got {:?}", dims.dim, feats.dims()));
    }
    let mut g = Graph::<f32>::new();
    let b = frozen.backbone.bind(&mut g, false);
    let x = g.constant(feats.clone().reshape(&[full * full, dims.dim])?);
    let p = forward_graph(&mut g, &b, dims, x, None)?;
    g.value(p).clone().reshape(&[full, full, dims.n_tokens])
}

/// Answer-region tokens of the labeled canvas built from one candidate.
pub fn build_labeled_targets(
    prompt_img: &ImageGrid,
    prompt_lbl: &ImageGrid,
    query_img: &ImageGrid,
    query_lbl: &ImageGrid,
    cb: &Codebook,
) -> Result<TokenGrid> {
    let canvas = assemble_canvas(prompt_img, prompt_lbl, query_img, Some(query_lbl))?;
    cb.tokenize(&canvas)?.slice_quadrant(Quadrant::BR)
}

/// Reorders quadrant-major rows (`[4hw, c]`) into canvas raster order.
pub fn to_canvas_order<T: Copy>(rows: &[T], grid: usize, c: usize) -> Vec<T> {
    let idx = quadrant_major_to_canvas(grid);
    let mut out = rows.to_vec();
    for (i, &dst) in idx.iter().enumerate() {
        out[dst * c..(dst + 1) * c].copy_from_slice(&rows[i * c..(i + 1) * c]);
    }
    out
}

#[cfg(test)]
mod tests;
