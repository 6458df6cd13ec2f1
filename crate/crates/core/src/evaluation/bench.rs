//! Per-query latency of condensation against output fusion as `K` grows.

use std::path::Path;
use std::time::Instant;

use super::{Mode, Predictor};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::retrieval::Backend;
use crate::taskgen::Dataset;
use crate::training::{write_atomic, Checkpoint};

/// Fewest timed queries per row.
pub const MIN_QUERIES: usize = 20;
const WARMUP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub condense_ms: f64,
    pub fusion_ms: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median milliseconds per query for each `K`, timed on one thread over the
/// first `n_queries` test queries. Retrieval is done up front and excluded;
/// both modes see the same candidates.
pub fn bench_k_scaling(ds: &Dataset, ckpt: &Checkpoint, ks: &[usize], n_queries: usize) -> Result<Vec<BenchRow>> {
    if n_queries < MIN_QUERIES {
        return Err(Error::Config(format!("timing needs at least {MIN_QUERIES} queries, asked for {n_queries}")));
    }
    if ds.test_queries.len() < n_queries {
        return Err(Error::Config(format!(
            "timing needs {n_queries} test queries, the dataset has {}",
            ds.test_queries.len()
        )));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let predictor = Predictor::new(ckpt, &ds.prompt_db, Backend::Pixel, 0, Exec::Sequential)?;
    let queries = &ds.test_queries[..n_queries];
    let mut rows = Vec::with_capacity(ks.len());
    for &k in &ks {
        let cands = queries
            .iter()
            .map(|q| predictor.retrieve(&q.image, k, 0))
            .collect::<Result<Vec<_>>>()?;
        let time = |mode: Mode| -> Result<f64> {
            for (q, c) in queries.iter().zip(&cands).take(WARMUP) {
                predictor.predict_with(&q.image, c, mode)?;
            }
            let mut ms = Vec::with_capacity(n_queries);
            for (q, c) in queries.iter().zip(&cands) {
                let t = Instant::now();
                let out = predictor.predict_with(&q.image, c, mode)?;
                ms.push(t.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(out);
            }
            Ok(median(ms))
        };
        rows.push(BenchRow {
            k,
            condense_ms: time(Mode::Condense)?,
            fusion_ms: time(Mode::OutputFusion)?,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("k,condense_ms,fusion_ms\n");
    for r in rows {
        out.push_str(&format!("{},{:.4},{:.4}\n", r.k, r.condense_ms, r.fusion_ms));
    }
    out
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    write_atomic(path, bench_csv(rows).as_bytes())
}
