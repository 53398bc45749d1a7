//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    Central,
    Forward,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub mode: Difference,
    /// Check at most this many randomly chosen entries per parameter tensor.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, mode: Difference::Central, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub entries_checked: usize,
}

fn eval<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.value(out).item()
}

/// Compare reverse-mode gradients of the scalar built by `f` against finite differences
/// taken by perturbing each entry of `store` in place. `store` is restored on return.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if opts.step <= 0.0 || !opts.step.is_finite() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base = g.value(out).item()?;
    let analytic = g.backward(out)?.param_grads(store);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).numel();
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for j in entries {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + opts.step;
            let plus = eval(&mut f, store);
            let numeric = match opts.mode {
                Difference::Central => {
                    store.get_mut(id).data_mut()[j] = orig - opts.step;
                    let minus = eval(&mut f, store);
                    store.get_mut(id).data_mut()[j] = orig;
                    (plus? - minus?) / (2.0 * opts.step)
                }
                Difference::Forward => {
                    store.get_mut(id).data_mut()[j] = orig;
                    (plus? - base) / opts.step
                }
            };
            let a = analytic[id.index()].data()[j];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    param: store.name(id).to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn store_with(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(Shape::new(1, 1, 1, vals.len()), vals.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn linear_function_is_exact() {
        let mut s = store_with(&[0.3, -1.2, 4.0]);
        let id = s.id("p").unwrap();
        let r = grad_check(
            &mut s,
            |g, st| {
                let p = g.param(st, id);
                let y = g.scale(p, 2.0);
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.entries_checked, 3);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut s = store_with(&[0.0, 0.0]);
        let id = s.id("p").unwrap();
        let mut g = Graph::new();
        let p = g.param(&s, id);
        let y = g.sigmoid(p);
        let out = g.sum(y);
        let grads = g.backward(out).unwrap();
        assert!(grads.get(p).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let r = grad_check(
            &mut s,
            |g, st| {
                let p = g.param(st, id);
                let y = g.sigmoid(p);
                Ok(g.sum(y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(s.get(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let mut s = store_with(&[1.0, 2.0]);
        let id = s.id("p").unwrap();
        let r = grad_check(&mut s, |g, st| Ok(g.param(st, id)), &GradCheckOptions::default());
        assert!(matches!(r, Err(Error::NotScalar(_))));
    }
}
