//! The 2×2 canvas, quadrant slicing and the frozen patch embedding.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::image::ImageGrid;
use crate::numerics::{uniform, ParamStore, Scalar, Tensor};
use crate::profile::ModelDims;

/// Pixel value of the unlabeled answer region on every channel.
pub const MASK_FILL: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    /// Prompt image.
    TL,
    /// Prompt label.
    TR,
    /// Query image.
    BL,
    /// Query label or mask fill.
    BR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TL, Quadrant::TR, Quadrant::BL, Quadrant::BR];

    /// `(row, col)` of the quadrant in units of the quadrant side.
    pub fn offset(self) -> (usize, usize) {
        match self {
            Quadrant::TL => (0, 0),
            Quadrant::TR => (0, 1),
            Quadrant::BL => (1, 0),
            Quadrant::BR => (1, 1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub pixels: ImageGrid,
}

impl Canvas {
    pub fn side(&self) -> usize {
        self.pixels.side()
    }

    pub fn quadrant(&self, q: Quadrant) -> ImageGrid {
        let s = self.side() / 2;
        let (r, c) = q.offset();
        self.pixels.crop(r * s, c * s, s).expect("quadrant lies inside the canvas")
    }
}

pub fn mask_image(side: usize) -> ImageGrid {
    ImageGrid::filled(side, [MASK_FILL; 3])
}

/// Places the four sub-images; pass `None` for the query label to get the
/// unlabeled canvas with the mask fill in the answer region.
pub fn assemble_canvas(
    prompt_img: &ImageGrid,
    prompt_lbl: &ImageGrid,
    query_img: &ImageGrid,
    query_lbl: Option<&ImageGrid>,
) -> Result<Canvas> {
    let s = prompt_img.side();
    let fill;
    let br = match query_lbl {
        Some(l) => l,
        None => {
            fill = mask_image(s);
            &fill
        }
    };
    let parts = [prompt_img, prompt_lbl, query_img, br];
    if let Some(bad) = parts.iter().find(|p| p.side() != s) {
        return Err(shape_err!("canvas parts must share side {s}, got {}", bad.side()));
    }
    let mut pixels = ImageGrid::filled(2 * s, [0.0; 3]);
    for (q, img) in Quadrant::ALL.into_iter().zip(parts) {
        let (r, c) = q.offset();
        pixels.paste(img, r * s, c * s)?;
    }
    Ok(Canvas { pixels })
}

/// Extracts quadrant `q` from a row-major `[h_full, w_full, c]` buffer.
pub fn slice_quadrant_raw<T: Copy>(
    data: &[T],
    h_full: usize,
    w_full: usize,
    c: usize,
    q: Quadrant,
) -> Result<Vec<T>> {
    if !h_full.is_multiple_of(2) || !w_full.is_multiple_of(2) || data.len() != h_full * w_full * c {
        return Err(shape_err!(
            "cannot slice a quadrant from [{h_full}, {w_full}, {c}] holding {} values",
            data.len()
        ));
    }
    let (h, w) = (h_full / 2, w_full / 2);
    let (r, col) = q.offset();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let start = ((r * h + y) * w_full + col * w) * c;
        out.extend_from_slice(&data[start..start + w * c]);
    }
    Ok(out)
}

/// Inverse of [`slice_quadrant_raw`]: tiles four `[h, w, c]` blocks given in
/// TL, TR, BL, BR order.
pub fn assemble_quadrants_raw<T: Copy>(parts: [&[T]; 4], h: usize, w: usize, c: usize) -> Result<Vec<T>> {
    if parts.iter().any(|p| p.len() != h * w * c) {
        return Err(shape_err!("quadrant blocks must each hold {h}x{w}x{c} values"));
    }
    let mut out = Vec::with_capacity(4 * h * w * c);
    for half in 0..2 {
        for y in 0..h {
            for p in &parts[half * 2..half * 2 + 2] {
                out.extend_from_slice(&p[y * w * c..(y + 1) * w * c]);
            }
        }
    }
    Ok(out)
}

/// Quadrant `q` of a `[h_full, w_full, c]` tensor.
pub fn slice_quadrant<T: Scalar>(grid: &Tensor<T>, q: Quadrant) -> Result<Tensor<T>> {
    let d = grid.dims();
    if d.len() != 3 {
        return Err(shape_err!("slice_quadrant expects [h, w, c], got {d:?}"));
    }
    let data = slice_quadrant_raw(grid.data(), d[0], d[1], d[2], q)?;
    Tensor::new(vec![d[0] / 2, d[1] / 2, d[2]], data)
}

/// Canvas index of the `i`-th row when the full grid is laid out
/// quadrant-major (all TL rows, then TR, BL, BR, each in raster order).
pub fn quadrant_major_to_canvas(grid: usize) -> Vec<usize> {
    let full = 2 * grid;
    let mut idx = Vec::with_capacity(full * full);
    for q in Quadrant::ALL {
        let (r, c) = q.offset();
        for y in 0..grid {
            for x in 0..grid {
                idx.push((r * grid + y) * full + c * grid + x);
            }
        }
    }
    idx
}

/// Frozen linear patch projection plus a fixed table of absolute canvas
/// positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    dims: ModelDims,
    /// `[P·P·3, D]`.
    projection: Tensor<f32>,
    /// `[(2S/P)², D]`, canvas raster order.
    positions: Tensor<f32>,
}

impl PatchEmbedding {
    pub const PROJECTION: &'static str = "embedding/projection";
    pub const POSITIONS: &'static str = "embedding/positions";

    pub fn new(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let fan_in = dims.patch_len();
        let bound = (3.0 / fan_in as f64).sqrt();
        let projection = uniform(seed, Self::PROJECTION, &[fan_in, dims.dim], -bound, bound);
        let positions = sincos_positions(2 * dims.grid(), dims.dim);
        Ok(Self {
            dims,
            projection,
            positions,
        })
    }

    pub fn from_params(dims: ModelDims, params: &ParamStore<f32>) -> Result<Self> {
        dims.validate()?;
        let full = 2 * dims.grid();
        let projection = expect_dims(params, Self::PROJECTION, &[dims.patch_len(), dims.dim])?;
        let positions = expect_dims(params, Self::POSITIONS, &[full * full, dims.dim])?;
        Ok(Self {
            dims,
            projection,
            positions,
        })
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert(Self::PROJECTION, self.projection.clone());
        p.insert(Self::POSITIONS, self.positions.clone());
        p
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn projection(&self) -> &Tensor<f32> {
        &self.projection
    }

    pub fn positions(&self) -> &Tensor<f32> {
        &self.positions
    }

    /// Positional rows of one quadrant, `[h·w, D]` in raster order.
    pub fn quadrant_positions(&self, q: Quadrant) -> Tensor<f32> {
        let g = self.dims.grid();
        let data = slice_quadrant_raw(self.positions.data(), 2 * g, 2 * g, self.dims.dim, q)
            .expect("positional table is an even square");
        Tensor::new(vec![g * g, self.dims.dim], data).expect("sized above")
    }

    /// Flattens each patch to `P·P·3` values (row-major, RGB interleaved).
    pub fn patchify(&self, img: &ImageGrid) -> Result<Tensor<f32>> {
        let (s, p) = (img.side(), self.dims.patch);
        if s != self.dims.side {
            return Err(shape_err!("expected a sub-image of side {}, got {s}", self.dims.side));
        }
        patchify(img, p)
    }

    /// `[h, w, D]` features of a sub-image placed in quadrant `q`.
    pub fn embed_quadrant(&self, img: &ImageGrid, q: Quadrant) -> Result<Tensor<f32>> {
        let patches = self.patchify(img)?;
        let (g, d) = (self.dims.grid(), self.dims.dim);
        let mut out = self.quadrant_positions(q).into_data();
        let pl = self.dims.patch_len();
        for (row, patch) in out.chunks_exact_mut(d).zip(patches.data().chunks_exact(pl)) {
            crate::numerics::kernels::gemm_nn(patch, self.projection.data(), row, 1, pl, d);
        }
        Tensor::new(vec![g, g, d], out)
    }

    /// Linear part only (no positions), averaged over patches.
    pub fn pooled_content(&self, img: &ImageGrid) -> Result<Vec<f32>> {
        let patches = self.patchify(img)?;
        let (n, d, pl) = (patches.rows(), self.dims.dim, self.dims.patch_len());
        let mut mean = vec![0.0f32; pl];
        for patch in patches.data().chunks_exact(pl) {
            for (m, &v) in mean.iter_mut().zip(patch) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f32);
        let mut out = vec![0.0; d];
        crate::numerics::kernels::gemm_nn(&mean, self.projection.data(), &mut out, 1, pl, d);
        Ok(out)
    }
}

pub(crate) fn expect_dims(params: &ParamStore<f32>, name: &str, dims: &[usize]) -> Result<Tensor<f32>> {
    let t = params.get(name)?;
    if t.dims() != dims {
        return Err(crate::Error::Tensor {
            name: name.to_string(),
            reason: format!("expected dims {dims:?}, found {:?}", t.dims()),
        });
    }
    Ok(t.clone())
}

pub fn patchify(img: &ImageGrid, p: usize) -> Result<Tensor<f32>> {
    let s = img.side();
    if p == 0 || !s.is_multiple_of(p) {
        return Err(shape_err!("side {s} is not divisible by patch {p}"));
    }
    let g = s / p;
    let mut data = Vec::with_capacity(s * s * 3);
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                let start = ((gy * p + y) * s + gx * p) * 3;
                data.extend_from_slice(&img.data()[start..start + p * 3]);
            }
        }
    }
    Tensor::new(vec![g * g, p * p * 3], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], g: usize, p: usize) -> Result<ImageGrid> {
    let pl = p * p * 3;
    if patches.len() != g * g * pl {
        return Err(shape_err!("{} values do not form {g}x{g} patches of side {p}", patches.len()));
    }
    let s = g * p;
    let mut data = vec![0.0; s * s * 3];
    for (i, patch) in patches.chunks_exact(pl).enumerate() {
        let (gy, gx) = (i / g, i % g);
        for y in 0..p {
            let start = ((gy * p + y) * s + gx * p) * 3;
            data[start..start + p * 3].copy_from_slice(&patch[y * p * 3..(y + 1) * p * 3]);
        }
    }
    ImageGrid::new(s, data)
}

/// Fixed 2-D sine/cosine table: the first half of the width encodes the row,
/// the second half the column.
fn sincos_positions(full: usize, d: usize) -> Tensor<f32> {
    let half = d / 2;
    let enc = |pos: usize, out: &mut [f32]| {
        let n = out.len();
        let pairs = n / 2;
        for i in 0..pairs {
            let omega = 1.0 / (full as f64 * 4.0).powf(i as f64 / pairs.max(1) as f64);
            let a = pos as f64 * omega;
            out[i] = a.sin() as f32;
            out[pairs + i] = a.cos() as f32;
        }
        if n % 2 == 1 {
            out[n - 1] = 0.0;
        }
    };
    let mut t = Tensor::zeros(&[full * full, d]);
    for (r, row) in t.data_mut().chunks_exact_mut(d).enumerate() {
        let (a, b) = row.split_at_mut(half);
        enc(r / full, a);
        enc(r % full, b);
    }
    t
}
