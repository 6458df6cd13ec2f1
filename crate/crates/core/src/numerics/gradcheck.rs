use super::{Bound, Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub names: Vec<String>,
}

/// Relative error with a small floor on the denominator so that entries whose
/// true gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h` for every entry of `params`.
///
/// Only `params` are perturbed; anything `f` captures is held fixed.
pub fn grad_check<F>(f: F, params: &ParamStore<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, true);
        let out = f(&mut g, &bound)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = f(&mut g, &bound)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let grads = g.backward(out)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        names: params.names().map(str::to_string).collect(),
    };
    for (name, var) in bound.iter() {
        let n = params.get(name)?.len();
        let analytic: Vec<f64> = match grads.get(var) {
            Some(gv) => gv.to_vec(),
            None => vec![0.0; n],
        };
        for i in 0..n {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.to_string(), i));
                }
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
