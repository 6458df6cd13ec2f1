//! Plain SGD with a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Gradients, ParamStore};

/// `lr0 · (1 + cos(π t / T)) / 2`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule over zero steps".into()));
    }
    if t >= total {
        return Err(Error::Config(format!("step {t} outside schedule of {total} steps")));
    }
    Ok(lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()) / 2.0)
}

/// Named gradient sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSum {
    sums: BTreeMap<String, Vec<f32>>,
}

impl GradSum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the gradients of every bound tensor present in `grads`.
    pub fn add(&mut self, bound: &Bound, grads: &Gradients<f32>) {
        for (name, var) in bound.iter() {
            if let Some(g) = grads.get(var) {
                let slot = self.sums.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                for (s, &v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }

    pub fn merge(&mut self, other: GradSum) {
        for (name, g) in other.sums {
            match self.sums.get_mut(&name) {
                Some(slot) => slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v),
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, c: f32) {
        for g in self.sums.values_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.sums.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.sums.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn norm(&self) -> f64 {
        self.sums
            .values()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// `θ ← θ − lr · g` for every tensor named in `grads`. Names absent from
/// `grads` are left untouched, which is how frozen tensors stay fixed.
pub fn sgd_update(params: &mut ParamStore<f32>, grads: &GradSum, lr: f64) -> Result<()> {
    for (name, g) in grads.iter() {
        let t = params.get_mut(name)?;
        for (p, &d) in t.data_mut().iter_mut().zip(g) {
            *p -= (lr * d as f64) as f32;
        }
    }
    Ok(())
}

/// Bias-corrected Adam moments, keyed like the gradients.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &GradSum, lr: f64) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads.iter() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let t = params.get_mut(name)?;
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *p = (*p as f64 - step) as f32;
            }
        }
        Ok(())
    }
}
