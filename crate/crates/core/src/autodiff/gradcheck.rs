//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::registry::{ParamId, ParameterRegistry};
use super::tensor::Tensor;
use crate::error::Result;

/// Floor for the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

/// Reduces a possibly non-scalar output to a scalar with fixed random
/// weights, so ops whose plain sum is constant (softmax, layernorm without
/// affine) still get a non-trivial check.
fn project(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let n = g.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = g.shape(out).to_vec();
    let w = g.constant(&shape, w)?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_grad(false)))
        .collect();
    let out = f(&mut g, &vars)?;
    let s = project(&mut g, out)?;
    Ok(g.scalar(s))
}

/// Max over all input elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` builds the subgraph from the bound inputs. Every input is treated
/// as requiring grad.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(t.clone().with_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let s = project(&mut g, out)?;
    g.backward(s)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for (j, &orig) in t.data().iter().enumerate() {
            probe[ti].data_mut()[j] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but differentiates with respect to every trainable
/// parameter of `reg` instead of graph inputs.
pub fn param_grad_check<F>(f: F, reg: &ParameterRegistry, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a>, &'a ParameterRegistry) -> Result<Var>,
{
    let eval = |r: &ParameterRegistry| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, r)?;
        let s = project(&mut g, out)?;
        Ok(g.scalar(s))
    };
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new();
        let out = f(&mut g, reg)?;
        let s = project(&mut g, out)?;
        g.backward(s)?;
        g.param_grads()
            .into_iter()
            .map(|(id, d)| (id, d.to_vec()))
            .collect()
    };
    let mut probe = reg.clone();
    let mut worst = 0.0f64;
    for id in reg.ids().filter(|&id| reg.entry(id).trainable()) {
        let grad = analytic
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, d)| d.clone())
            .unwrap_or_else(|| vec![0.0; reg.tensor(id).numel()]);
        for (j, &a) in grad.iter().enumerate() {
            let orig = reg.tensor(id).data()[j];
            probe.tensor_mut(id).data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe.tensor_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
