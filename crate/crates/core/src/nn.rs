//! Layer norm, linear, softmax, GELU MLP and binary cross-entropy.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Var, MASK_SENTINEL};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Truncated normal, resampled outside `±2σ`.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = normal.sample(rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn init(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), trunc_normal(&[d_in, d_out], INIT_STD, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        LinearParams {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNormParams {
            gamma,
            beta,
            dim,
            eps: LN_EPS,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        MlpParams {
            fc1: LinearParams::init(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: LinearParams::init(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn param_count(dim: usize, hidden: usize) -> usize {
        LinearParams::param_count(dim, hidden) + LinearParams::param_count(hidden, dim)
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams) -> Result<Var> {
    let (_, d) = g.tape.value(x).dims2()?;
    if d != p.dim {
        return Err(Error::mismatch("layer_norm", g.tape.shape(x), &[p.dim]));
    }
    let normed = g.tape.normalize_rows(x, p.eps)?;
    let gamma = g.param(p.gamma);
    let beta = g.param(p.beta);
    let scaled = g.tape.mul_row(normed, gamma)?;
    g.tape.add_row(scaled, beta)
}

/// `x · W + b`.
pub fn linear(g: &mut Graph, x: Var, p: &LinearParams) -> Result<Var> {
    let w = g.param(p.weight);
    let b = g.param(p.bias);
    let xw = g.tape.matmul(x, w)?;
    g.tape.add_row(xw, b)
}

/// Row softmax. Rows made entirely of the mask sentinel are rejected.
pub fn softmax_lastdim(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.tape.value(x);
    let cols = *t.shape().last().unwrap_or(&1);
    if let Some(row) = t.data().chunks(cols).position(|r| r.iter().all(|&v| v == MASK_SENTINEL)) {
        return Err(Error::EmptySelection { head: row });
    }
    g.tape.softmax(x)
}

/// `fc2(GELU(fc1(x)))`.
pub fn gelu_mlp(g: &mut Graph, x: Var, p: &MlpParams) -> Result<Var> {
    let h = linear(g, x, &p.fc1)?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &p.fc2)
}

/// Mean binary cross-entropy of `logits` (one per sample) against labels in
/// `{0, 1}`, as `softplus(l) - y·l`.
pub fn bce_with_logit(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    let n = g.tape.value(logits).numel();
    if n != labels.len() {
        return Err(Error::mismatch("bce_with_logit", g.tape.shape(logits), &[labels.len()]));
    }
    let shape = g.tape.shape(logits).to_vec();
    let sp = g.tape.softplus(logits)?;
    let y = g.tape.constant(Tensor::new(shape, labels.to_vec())?);
    let yl = g.tape.mul(y, logits)?;
    let per = g.tape.sub(sp, yl)?;
    g.tape.mean(per, None)
}
