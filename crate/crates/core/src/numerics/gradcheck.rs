//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Usage(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    Ok(())
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Usage(format!("grad_check needs a scalar function, got shape {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares the reverse-mode gradient of a scalar function of `inputs` with
/// central differences, returning the maximum relative error over all
/// input elements.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_output(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_output(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for e in 0..t.len() {
            let orig = t.data()[e];
            probe[k].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k].data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Result of a parameter-level gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Finite-difference check of parameters held in a store. Up to
/// `max_per_param` evenly spaced elements of each listed parameter are
/// probed. Parameters are checked whether or not they are trainable;
/// trainability is restored afterwards.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    max_per_param: usize,
) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let saved: Vec<bool> = ids.iter().map(|&id| store.get(id).trainable).collect();
    for &id in ids {
        store.set_trainable(id, true);
    }
    let result = (|| {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        scalar_output(&g, out)?;
        g.backward(out)?;
        let grads: Vec<Tensor> = ids
            .iter()
            .map(|&id| {
                let v = g.param(store, id);
                g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
            })
            .collect();

        let eval = |store: &ParamStore| -> Result<f64> {
            let mut g = Graph::new();
            let out = f(&mut g, store)?;
            scalar_output(&g, out)
        };
        let mut report = Vec::with_capacity(ids.len());
        for (&id, grad) in ids.iter().zip(&grads) {
            let n = store.value(id).len();
            let step = (n / max_per_param.max(1)).max(1);
            let mut worst = 0.0f64;
            let mut checked = 0;
            for e in (0..n).step_by(step) {
                let orig = store.value(id).data()[e];
                store.value_mut(id).data_mut()[e] = orig + eps;
                let plus = eval(store)?;
                store.value_mut(id).data_mut()[e] = orig - eps;
                let minus = eval(store)?;
                store.value_mut(id).data_mut()[e] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                worst = worst.max(relative_error(grad.data()[e], numeric));
                checked += 1;
            }
            report.push(ParamCheck {
                name: store.get(id).name.clone(),
                max_rel_error: worst,
                checked,
            });
        }
        Ok(report)
    })();
    for (&id, t) in ids.iter().zip(saved) {
        store.set_trainable(id, t);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(
            |g, xs| {
                let sq = g.mul(xs[0], xs[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let err = grad_check(
            |g, _xs| Ok(g.input(Tensor::scalar(3.0))),
            &[Tensor::vector(vec![0.3, -0.2])],
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_output_is_usage_error() {
        let r = grad_check(|_g, xs| Ok(xs[0]), &[Tensor::vector(vec![1.0, 2.0])], 1e-6);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn eps_out_of_range_is_usage_error() {
        let r = grad_check(|g, xs| Ok(g.sum(xs[0])), &[Tensor::scalar(1.0)], 1e-2);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let err = grad_check(
            |g, xs| {
                let c = g.matmul(xs[0], xs[1])?;
                let wv = g.input(w.clone());
                let p = g.mul(c, wv)?;
                Ok(g.sum(p))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gelu_gradient_at_point_seven() {
        let err = grad_check(
            |g, xs| {
                let y = g.gelu(xs[0]);
                Ok(g.sum(y))
            },
            &[Tensor::scalar(0.7)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_bce_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, xs| {
                let st = g.softmax_temp(xs[0], 0, xs[1])?;
                let su = g.softmax_temp(xs[0], 1, xs[1])?;
                let e = g.mul(st, su)?;
                let p = g.sum_rows(e)?;
                g.bce(p, &[1.0, 0.0, 1.0, 0.0], &[true, true, true, false])
            },
            &[s, Tensor::scalar(0.4)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
