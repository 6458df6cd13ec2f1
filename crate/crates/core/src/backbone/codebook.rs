//! Patch codebook: nearest-centroid tokenizer and its decoder.

use rand::Rng;

use crate::canvas::{patchify, slice_quadrant_raw, unpatchify, Canvas, Quadrant};
use crate::error::{shape_err, Error, Result};
use crate::image::ImageGrid;
use crate::numerics::{ParamStore, Tensor};
use crate::profile::ModelDims;
use crate::rng::named_stream;

pub const CENTROIDS: &str = "codebook/centroids";

/// Token indices over a patch grid, 1-based as in `{1..N_t}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != h * w {
            return Err(shape_err!("{} tokens for a {h}x{w} grid", tokens.len()));
        }
        Ok(Self { h, w, tokens })
    }

    /// Indices shifted to `0..N_t` for the loss.
    pub fn zero_based(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize - 1).collect()
    }

    pub fn slice_quadrant(&self, q: Quadrant) -> Result<TokenGrid> {
        let t = slice_quadrant_raw(&self.tokens, self.h, self.w, 1, q)?;
        TokenGrid::new(self.h / 2, self.w / 2, t)
    }
}

/// `N_t` centroid patches of `P·P·3` values each. Rows are kept distinct so
/// that decoding then re-encoding returns the original tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    patch: usize,
    centroids: Tensor<f32>,
}

impl Codebook {
    /// Seeded uniform rows in `[0, 1]`.
    pub fn seeded(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = named_stream(seed, CENTROIDS);
        let rows: Vec<Vec<f32>> = (0..dims.n_tokens)
            .map(|_| (0..dims.patch_len()).map(|_| rng.gen::<f32>()).collect())
            .collect();
        Self::from_rows(dims.patch, rows, &mut rng)
    }

    /// Lloyd's k-means over `patches` (`[n, P·P·3]`), started from a seeded
    /// k-means++ draw. Unused centroids fall back to seeded uniform rows.
    pub fn fit(dims: &ModelDims, seed: u64, patches: &[f32], iters: usize) -> Result<Self> {
        let (k, pl) = (dims.n_tokens, dims.patch_len());
        if patches.is_empty() || !patches.len().is_multiple_of(pl) {
            return Err(shape_err!("{} values are not whole patches of {pl}", patches.len()));
        }
        let data: Vec<&[f32]> = patches.chunks_exact(pl).collect();
        let mut rng = named_stream(seed, "codebook/kmeans");
        let mut centres: Vec<Vec<f32>> = vec![data[rng.gen_range(0..data.len())].to_vec()];
        let mut d2: Vec<f64> = data.iter().map(|p| sq_dist(p, &centres[0])).collect();
        while centres.len() < k {
            let total: f64 = d2.iter().sum();
            if total <= 0.0 {
                break;
            }
            let mut target = rng.gen::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            let c = data[pick].to_vec();
            for (d, p) in d2.iter_mut().zip(&data) {
                *d = d.min(sq_dist(p, &c));
            }
            centres.push(c);
        }
        let live = centres.len();
        for _ in 0..iters {
            let mut sums = vec![vec![0.0f64; pl]; live];
            let mut counts = vec![0usize; live];
            for p in &data {
                let j = nearest(&centres, p);
                counts[j] += 1;
                for (s, &v) in sums[j].iter_mut().zip(*p) {
                    *s += v as f64;
                }
            }
            let mut moved = false;
            for j in 0..live {
                if counts[j] == 0 {
                    continue;
                }
                let next: Vec<f32> = sums[j].iter().map(|s| (s / counts[j] as f64) as f32).collect();
                moved |= next != centres[j];
                centres[j] = next;
            }
            if !moved {
                break;
            }
        }
        while centres.len() < k {
            centres.push((0..pl).map(|_| rng.gen::<f32>()).collect());
        }
        Ok(Self::from_rows(dims.patch, centres, &mut rng))
    }

    fn from_rows(patch: usize, mut rows: Vec<Vec<f32>>, rng: &mut impl Rng) -> Self {
        // regenerate any row that duplicates an earlier one
        for i in 1..rows.len() {
            while rows[..i].contains(&rows[i]) {
                rows[i] = rows[i].iter().map(|_| rng.gen::<f32>()).collect();
            }
        }
        let (n, pl) = (rows.len(), rows[0].len());
        let centroids = Tensor::new(vec![n, pl], rows.concat()).expect("rows share a width");
        Self { patch, centroids }
    }

    pub fn from_params(dims: &ModelDims, params: &ParamStore<f32>) -> Result<Self> {
        let c = crate::canvas::expect_dims(params, CENTROIDS, &[dims.n_tokens, dims.patch_len()])?;
        let rows: Vec<&[f32]> = c.data().chunks_exact(dims.patch_len()).collect();
        for i in 1..rows.len() {
            if rows[..i].contains(&rows[i]) {
                return Err(Error::Tensor {
                    name: CENTROIDS.into(),
                    reason: format!("row {i} duplicates an earlier centroid"),
                });
            }
        }
        Ok(Self {
            patch: dims.patch,
            centroids: c,
        })
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert(CENTROIDS, self.centroids.clone());
        p
    }

    pub fn len(&self) -> usize {
        self.centroids.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroids(&self) -> &Tensor<f32> {
        &self.centroids
    }

    pub fn centroid(&self, token: u32) -> Result<&[f32]> {
        let pl = self.centroids.last_dim();
        let j = token as usize;
        if j == 0 || j > self.len() {
            return Err(Error::Index(format!("token {token} outside 1..={}", self.len())));
        }
        Ok(&self.centroids.data()[(j - 1) * pl..j * pl])
    }

    /// Token of one flattened patch; ties go to the smaller index.
    pub fn encode_patch(&self, patch: &[f32]) -> u32 {
        let pl = self.centroids.last_dim();
        let mut best = (f64::INFINITY, 0);
        for (j, c) in self.centroids.data().chunks_exact(pl).enumerate() {
            let d = sq_dist(patch, c);
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1 as u32 + 1
    }

    pub fn tokenize_image(&self, img: &ImageGrid) -> Result<TokenGrid> {
        let patches = patchify(img, self.patch)?;
        let g = img.side() / self.patch;
        let tokens = patches
            .data()
            .chunks_exact(self.centroids.last_dim())
            .map(|p| self.encode_patch(p))
            .collect();
        TokenGrid::new(g, g, tokens)
    }

    /// Tokens of a whole canvas; each patch is encoded on its own.
    pub fn tokenize(&self, canvas: &Canvas) -> Result<TokenGrid> {
        self.tokenize_image(&canvas.pixels)
    }

    pub fn detokenize(&self, tokens: &TokenGrid) -> Result<ImageGrid> {
        if tokens.h != tokens.w {
            return Err(shape_err!("token grid {}x{} is not square", tokens.h, tokens.w));
        }
        let mut patches = Vec::with_capacity(tokens.tokens.len() * self.centroids.last_dim());
        for &t in &tokens.tokens {
            patches.extend_from_slice(self.centroid(t)?);
        }
        unpatchify(&patches, tokens.h, self.patch)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum()
}

fn nearest(centres: &[Vec<f32>], p: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centres.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}
