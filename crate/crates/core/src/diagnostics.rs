//! Central-difference gradient checks for every graph op and for the
//! composed adapter block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapters::AdapterBlock;
use crate::autodiff::{grad_check, param_grad_check, Origin, ParameterRegistry, Tensor};
use crate::error::Result;
use crate::model::layers::multi_head_attention;

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_CHECK_TOL
    }
}

struct Inputs(ChaCha8Rng);

impl Inputs {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), data).expect("nonzero shape")
    }

    /// Entries bounded away from zero, for kinks and denominators.
    fn away_from_zero(&mut self, shape: &[usize], min: f64) -> Tensor {
        let mut t = self.tensor(shape);
        for v in t.data_mut() {
            *v = v.signum() * (v.abs() + min);
        }
        t
    }
}

/// Runs every check; one result per op name, each the worst over its cases.
pub fn gradient_suite() -> Result<Vec<GradCheckResult>> {
    let eps = GRAD_CHECK_EPS;
    let mut x = Inputs(ChaCha8Rng::seed_from_u64(2024));
    let mut out = Vec::new();
    let mut push = |name: &'static str, errs: &[f64]| {
        out.push(GradCheckResult {
            name,
            max_rel_error: errs.iter().copied().fold(0.0, f64::max),
        })
    };

    push(
        "matmul",
        &[
            grad_check(
                |g, v| g.matmul(v[0], v[1]),
                &[x.tensor(&[3, 4]), x.tensor(&[4, 2])],
                eps,
            )?,
            grad_check(
                |g, v| g.matmul(v[0], v[1]),
                &[x.tensor(&[2, 3, 4]), x.tensor(&[4, 5])],
                eps,
            )?,
            grad_check(
                |g, v| g.matmul(v[0], v[1]),
                &[x.tensor(&[2, 3, 4]), x.tensor(&[2, 4, 2])],
                eps,
            )?,
        ],
    );
    push(
        "add",
        &[grad_check(
            |g, v| g.add(v[0], v[1]),
            &[x.tensor(&[3, 4]), x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "sub",
        &[grad_check(
            |g, v| g.sub(v[0], v[1]),
            &[x.tensor(&[3, 4]), x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "mul",
        &[grad_check(
            |g, v| g.mul(v[0], v[1]),
            &[x.tensor(&[3, 4]), x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "div",
        &[grad_check(
            |g, v| g.div(v[0], v[1]),
            &[x.tensor(&[3, 4]), x.away_from_zero(&[3, 4], 0.5)],
            eps,
        )?],
    );
    push(
        "scale",
        &[grad_check(
            |g, v| Ok(g.scale(v[0], -0.7)),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "relu",
        &[grad_check(
            |g, v| Ok(g.relu(v[0])),
            &[x.away_from_zero(&[3, 4], 0.05)],
            eps,
        )?],
    );
    push(
        "gelu",
        &[grad_check(
            |g, v| Ok(g.gelu(v[0])),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "sigmoid",
        &[grad_check(
            |g, v| Ok(g.sigmoid(v[0])),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "softplus",
        &[grad_check(
            |g, v| Ok(g.softplus(v[0])),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "softmax_lastdim",
        &[grad_check(
            |g, v| Ok(g.softmax(v[0])),
            &[x.tensor(&[2, 3, 5])],
            eps,
        )?],
    );
    push(
        "layernorm",
        &[grad_check(
            |g, v| g.layernorm(v[0], v[1], v[2]),
            &[x.tensor(&[3, 6]), x.tensor(&[6]), x.tensor(&[6])],
            eps,
        )?],
    );
    push(
        "transpose",
        &[
            grad_check(|g, v| g.transpose(v[0], 0, 2), &[x.tensor(&[2, 3, 4])], eps)?,
            grad_check(|g, v| g.transpose(v[0], 0, 1), &[x.tensor(&[3, 5])], eps)?,
        ],
    );
    push(
        "reshape",
        &[grad_check(
            |g, v| g.reshape(v[0], &[6, 4]),
            &[x.tensor(&[2, 3, 4])],
            eps,
        )?],
    );
    push(
        "concat",
        &[
            grad_check(
                |g, v| g.concat(&[v[0], v[1]], 1),
                &[x.tensor(&[2, 3]), x.tensor(&[2, 2])],
                eps,
            )?,
            grad_check(
                |g, v| g.concat(&[v[0], v[1]], 0),
                &[x.tensor(&[1, 3]), x.tensor(&[2, 3])],
                eps,
            )?,
        ],
    );
    push(
        "slice",
        &[grad_check(
            |g, v| g.slice(v[0], 1, 1, 3),
            &[x.tensor(&[2, 4, 3])],
            eps,
        )?],
    );
    push(
        "embedding_lookup",
        &[grad_check(
            |g, v| g.embedding(v[0], &[0, 3, 3, 1]),
            &[x.tensor(&[5, 3])],
            eps,
        )?],
    );
    push(
        "mean",
        &[grad_check(
            |g, v| Ok(g.mean(v[0])),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "sum",
        &[grad_check(
            |g, v| Ok(g.sum(v[0])),
            &[x.tensor(&[3, 4])],
            eps,
        )?],
    );
    push(
        "broadcast_add",
        &[
            grad_check(
                |g, v| g.broadcast_add(v[0], v[1]),
                &[x.tensor(&[2, 3, 4]), x.tensor(&[4])],
                eps,
            )?,
            grad_check(
                |g, v| g.broadcast_add(v[0], v[1]),
                &[x.tensor(&[2, 3, 4]), x.tensor(&[3, 4])],
                eps,
            )?,
        ],
    );
    push(
        "attention",
        &[grad_check(
            |g, v| multi_head_attention(g, v[0], v[1], v[2], 2),
            &[
                x.tensor(&[1, 3, 4]),
                x.tensor(&[1, 5, 4]),
                x.tensor(&[1, 5, 4]),
            ],
            eps,
        )?],
    );

    // Adapter with a non-zero up projection so every parameter matters;
    // the input is a trainable parameter too.
    let mut reg = ParameterRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let adapter = AdapterBlock::register(&mut reg, "adapter", 8, 4, &mut rng)?;
    let ids: Vec<_> = reg.ids().collect();
    for id in ids {
        for v in reg.tensor_mut(id).data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let input = reg.register("input", x.tensor(&[3, 8]), Origin::Base, true)?;
    push(
        "adapter_block",
        &[param_grad_check(
            |g, r| {
                let xin = g.param(r, input);
                adapter.forward(g, r, xin)
            },
            &reg,
            eps,
        )?],
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OpKind;

    #[test]
    fn every_op_is_covered_and_passes() {
        let results = gradient_suite().unwrap();
        for op in OpKind::ALL {
            assert!(
                results.iter().any(|r| r.name == op.name()),
                "{op} not checked"
            );
        }
        for r in &results {
            assert!(r.passed(), "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }
}
