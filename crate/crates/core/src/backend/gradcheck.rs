//! Finite-difference verification of reverse-mode gradients.

use std::fmt;

use crate::backend::graph::{Bound, Graph, Var};
use crate::backend::param::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn first_failure(&self) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.max_rel_err > self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let mark = if p.max_rel_err <= self.tol { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<48} n={:<6} max_rel_err={:.3e}", p.name, p.elements, p.max_rel_err)?;
        }
        write!(
            f,
            "{} parameters, max_rel_err={:.3e}, tol={:.1e}: {}",
            self.params.len(),
            self.max_rel_err(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// Compare reverse-mode gradients of a scalar objective against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every element of every
/// trainable parameter.
///
/// When the central estimate disagrees, the one-sided second-order stencils
/// `(∓3f(θ) ± 4f(θ±ε) ∓ f(θ±2ε)) / 2ε` are also tried: a single kink of a
/// piecewise-linear activation can only sit inside the stencils that cross it.
pub fn gradient_check<T, F>(store: &mut ParamStore<T>, objective: F, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g, 's> Fn(&Bound<'g, 's, T>) -> Result<Var<'g, T>>,
{
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("gradient_check: eps must be > 0, got {eps}")));
    }
    let analytic = {
        let graph = Graph::new();
        let bound = graph.bind(store, true);
        let out = objective(&bound)?;
        if !out.item().is_finite() {
            return Err(Error::NonFinite {
                what: "objective",
                name: "<unperturbed>".into(),
            });
        }
        let grads = graph.backward(out)?;
        bound.collect(&grads)
    };

    let eval = |store: &ParamStore<T>, name: &str| -> Result<f64> {
        let graph = Graph::new();
        let bound = graph.bind(store, false);
        let v = objective(&bound)?.item().as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "objective",
                name: name.to_string(),
            });
        }
        Ok(v)
    };

    let f0 = eval(store, "<unperturbed>")?;
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::new();
    for (id, grad) in ids.into_iter().zip(analytic) {
        if !store.get(id).trainable {
            continue;
        }
        let name = store.get(id).name.clone();
        let n = store.get(id).tensor.numel();
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = store.get(id).tensor.data()[i];
            let at = |delta: f64, store: &mut ParamStore<T>| -> Result<f64> {
                store.get_mut(id).tensor.data_mut()[i] = T::lit(orig.as_f64() + delta);
                let v = eval(store, &name);
                store.get_mut(id).tensor.data_mut()[i] = orig;
                v
            };
            let fp = at(eps, store)?;
            let fm = at(-eps, store)?;
            let a = grad.data()[i].as_f64();
            let mut err = rel_err(a, (fp - fm) / (2.0 * eps));
            if err > tol {
                let fp2 = at(2.0 * eps, store)?;
                let fm2 = at(-2.0 * eps, store)?;
                let forward = (-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * eps);
                let backward = (3.0 * f0 - 4.0 * fm + fm2) / (2.0 * eps);
                err = err.min(rel_err(a, forward)).min(rel_err(a, backward));
            }
            worst = worst.max(err);
        }
        params.push(ParamCheck {
            name,
            elements: n,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { eps, tol, params })
}
