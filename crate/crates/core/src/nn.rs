//! Attention and normalisation blocks built on the autodiff graph. Parameter
//! names are `{prefix}/w_q` etc.; the caller binds a store once per graph.

use crate::error::Result;
use crate::numerics::{xavier, Bound, Graph, ParamStore, Scalar, Tensor, Var, LN_EPS};

pub fn init_attention<T: Scalar>(store: &mut ParamStore<T>, seed: u64, prefix: &str, d: usize) {
    for w in ["w_q", "w_k", "w_v", "w_o"] {
        let name = format!("{prefix}/{w}");
        store.insert(name.clone(), xavier(seed, &name, d, d));
    }
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}/gain"), Tensor::full(&[d], T::one()));
    store.insert(format!("{prefix}/bias"), Tensor::zeros(&[d]));
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let gain = b.get(&format!("{prefix}/gain"))?;
    let bias = b.get(&format!("{prefix}/bias"))?;
    g.layer_norm(x, gain, bias, T::lit(LN_EPS))
}

/// Geometry of one attention call: `batch` independent sequences of `n`
/// tokens of width `d`, split into `heads` heads.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub n: usize,
    pub d: usize,
    pub heads: usize,
}

/// Scaled dot-product self-attention with output projection.
///
/// `x` holds `batch·n` rows. With `query_rows`, only those rows of a single
/// sequence (`batch == 1`) are computed; keys and values still span all `n`.
/// Returns `[rows, d]`.
pub fn self_attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    x: Var,
    shape: AttnShape,
    query_rows: Option<&[usize]>,
) -> Result<Var> {
    let AttnShape { batch, n, d, heads } = shape;
    debug_assert!(query_rows.is_none() || batch == 1);
    let dh = d / heads;
    let w = |name: &str| b.get(&format!("{prefix}/{name}"));
    let xq = match query_rows {
        Some(idx) => g.gather_rows(x, idx)?,
        None => x,
    };
    let m = query_rows.map_or(n, <[usize]>::len);
    let q = g.matmul(xq, w("w_q")?)?;
    let q = g.scale(q, T::one() / T::lit(dh as f64).sqrt())?;
    let k = g.matmul(x, w("w_k")?)?;
    let v = g.matmul(x, w("w_v")?)?;
    let split = |g: &mut Graph<T>, t: Var, len: usize| -> Result<Var> {
        if heads == 1 {
            g.reshape(t, &[batch, len, d])
        } else {
            g.swap_axes(t, batch, len, heads, dh, &[batch * heads, len, dh])
        }
    };
    let (q, k, v) = (split(g, q, m)?, split(g, k, n)?, split(g, v, n)?);
    let scores = g.bmm(q, k, true)?;
    let probs = g.softmax(scores)?;
    let o = g.bmm(probs, v, false)?;
    let o = if heads == 1 {
        g.reshape(o, &[batch * m, d])?
    } else {
        g.swap_axes(o, batch, heads, m, dh, &[batch * m, d])?
    };
    g.matmul(o, w("w_o")?)
}
