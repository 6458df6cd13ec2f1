//! Candidate-prompt retrieval with pluggable similarity backends.

mod cache;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use cache::{load_signatures, save_signatures};

use crate::canvas::PatchEmbedding;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::par::{self, Exec};
use crate::rng::stream;
use crate::taskgen::Sample;

/// Side of the downsampled luminance grid.
pub const SIGNATURE_GRID: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Pixel,
    Feature,
    Random,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Pixel => "pixel",
            Backend::Feature => "feature",
            Backend::Random => "random",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Backend::Pixel),
            "feature" => Ok(Backend::Feature),
            "random" => Ok(Backend::Random),
            _ => Err(Error::Config(format!("unknown retrieval backend `{s}` (pixel|feature|random)"))),
        }
    }
}

/// Retrieved prompts, best first.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CandidateSet {
    pub entries: Vec<(String, f32)>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

/// Luminance of `img`, bilinearly sampled at the centres of a `g×g` grid and
/// scaled to unit length.
pub fn signature_with_grid(img: &ImageGrid, g: usize) -> Result<Vec<f32>> {
    if g == 0 {
        return Err(Error::Config("signature grid must be >= 1".into()));
    }
    let s = img.side();
    let lum = img.luminance_map();
    let at = |y: usize, x: usize| lum[y * s + x] as f64;
    let coord = |i: usize| -> (usize, usize, f64) {
        let c = ((i as f64 + 0.5) * s as f64 / g as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, c - lo as f64)
    };
    let mut v = Vec::with_capacity(g * g);
    for gy in 0..g {
        let (y0, y1, ty) = coord(gy);
        for gx in 0..g {
            let (x0, x1, tx) = coord(gx);
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            v.push(top * (1.0 - ty) + bot * ty);
        }
    }
    normalize(v)
}

pub fn signature(img: &ImageGrid) -> Result<Vec<f32>> {
    signature_with_grid(img, SIGNATURE_GRID)
}

fn normalize(v: Vec<f64>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Domain("signature of an all-black image".into()));
    }
    Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum::<f64>() as f32
}

/// Ranks a prompt database for many queries. Database vectors are computed
/// once at construction.
pub struct Retriever<'a> {
    backend: Backend,
    db: &'a [Sample],
    vectors: Vec<Vec<f32>>,
    embedding: Option<&'a PatchEmbedding>,
    seed: u64,
}

impl<'a> Retriever<'a> {
    /// `embedding` is required by the feature backend; `seed` only affects the
    /// random backend.
    pub fn new(
        backend: Backend,
        db: &'a [Sample],
        embedding: Option<&'a PatchEmbedding>,
        seed: u64,
        exec: Exec,
    ) -> Result<Self> {
        let mut r = Self {
            backend,
            db,
            vectors: Vec::new(),
            embedding,
            seed,
        };
        if backend != Backend::Random {
            if backend == Backend::Feature && embedding.is_none() {
                return Err(Error::Config("feature retrieval needs a patch embedding".into()));
            }
            r.vectors = par::map_slice(exec, db, |s| r.describe(&s.image))
                .into_iter()
                .collect::<Result<_>>()?;
        }
        Ok(r)
    }

    /// Reuses precomputed pixel signatures, e.g. from a cache file. Entries
    /// are matched to the database by id.
    pub fn with_signatures(db: &'a [Sample], cached: &[(String, Vec<f32>)]) -> Result<Self> {
        let map: std::collections::HashMap<&str, &Vec<f32>> =
            cached.iter().map(|(id, v)| (id.as_str(), v)).collect();
        let vectors = db
            .iter()
            .map(|s| {
                map.get(s.id.as_str())
                    .map(|v| (*v).clone())
                    .ok_or_else(|| Error::Config(format!("signature cache has no entry for `{}`", s.id)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            backend: Backend::Pixel,
            db,
            vectors,
            embedding: None,
            seed: 0,
        })
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn db_vectors(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.db.iter().zip(&self.vectors).map(|(s, v)| (s.id.as_str(), v.as_slice()))
    }

    fn describe(&self, img: &ImageGrid) -> Result<Vec<f32>> {
        match self.backend {
            Backend::Pixel => signature(img),
            Backend::Feature => {
                let emb = self.embedding.expect("checked at construction");
                let v = emb.pooled_content(img)?;
                normalize(v.into_iter().map(f64::from).collect())
            }
            Backend::Random => Ok(Vec::new()),
        }
    }

    /// Top-`k` prompts for `query`. `stream_id` keys the random backend so
    /// that different queries get independent shuffles.
    pub fn topk(&self, query: &ImageGrid, k: usize, stream_id: u64) -> Result<CandidateSet> {
        let n = self.db.len();
        if k == 0 || k > n {
            return Err(Error::Config(format!("cannot retrieve K = {k} from {n} prompts")));
        }
        let scores: Vec<f32> = match self.backend {
            Backend::Random => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut stream(self.seed, stream_id));
                let mut s = vec![0.0; n];
                for (rank, &i) in order.iter().enumerate() {
                    s[i] = 1.0 - rank as f32 / n as f32;
                }
                s
            }
            _ => {
                let q = self.describe(query)?;
                self.vectors.iter().map(|v| cosine(&q, v)).collect()
            }
        };
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.db[a].id.cmp(&self.db[b].id))
        });
        Ok(CandidateSet {
            entries: idx[..k]
                .iter()
                .map(|&i| (self.db[i].id.clone(), scores[i]))
                .collect(),
        })
    }
}

/// One-shot retrieval. Builds a [`Retriever`] for a single query; prefer the
/// retriever when ranking many queries.
pub fn retrieve_topk(
    query: &ImageGrid,
    db: &[Sample],
    k: usize,
    backend: Backend,
    embedding: Option<&PatchEmbedding>,
    seed: u64,
) -> Result<CandidateSet> {
    if k == 0 || k > db.len() {
        return Err(Error::Config(format!("cannot retrieve K = {k} from {} prompts", db.len())));
    }
    Retriever::new(backend, db, embedding, seed, Exec::Sequential)?.topk(query, k, 0)
}

#[cfg(test)]
mod tests;
