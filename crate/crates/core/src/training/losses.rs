//! The two objectives and their combination.

use crate::backbone::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Var};

/// Mean over candidates of the answer-region cross-entropy against each
/// candidate's target grid.
pub fn token_prediction_graph<T: Scalar>(g: &mut Graph<T>, probs_br: Var, targets: &[TokenGrid]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::Config("token prediction needs at least one target grid".into()));
    }
    let mut terms = Vec::with_capacity(targets.len());
    for t in targets {
        terms.push(g.cross_entropy(probs_br, &t.zero_based())?);
    }
    let stacked = g.concat(&terms)?;
    let s = g.sum(stacked)?;
    g.scale(s, T::one() / T::lit(targets.len() as f64))
}

/// `−[cos(cp_image, fq_i) + cos(cp_label, fq_l)]`, each cosine averaged over
/// patches.
pub fn pre_alignment_graph<T: Scalar>(g: &mut Graph<T>, cp_image: Var, cp_label: Var, fq_i: Var, fq_l: Var) -> Result<Var> {
    let a = g.cosine_rows(cp_image, fq_i)?;
    let b = g.cosine_rows(cp_label, fq_l)?;
    let s = g.add(a, b)?;
    g.scale(s, -T::one())
}

/// `l_tp + λ·l_pa`.
pub fn total_loss(l_tp: f64, l_pa: f64, lambda: f64) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("λ must be >= 0, got {lambda}")));
    }
    Ok(l_tp + lambda * l_pa)
}

/// Plain-value wrappers around the graph forms, for callers holding tensors.
pub mod values {
    use super::*;
    use crate::condenser::CondensedPrompt;
    use crate::numerics::Tensor;

    pub fn loss_token_prediction(probs_br: &Tensor<f64>, targets: &[TokenGrid]) -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(probs_br.clone());
        let l = token_prediction_graph(&mut g, p, targets)?;
        Ok(g.value(l).item())
    }

    pub fn loss_pre_alignment(cp: &CondensedPrompt, fq_i: &Tensor<f32>, fq_l: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = [&cp.image, &cp.label, fq_i, fq_l]
            .into_iter()
            .map(|t| g.constant(t.cast()))
            .collect();
        let l = pre_alignment_graph(&mut g, vars[0], vars[1], vars[2], vars[3])?;
        Ok(g.value(l).item())
    }
}
