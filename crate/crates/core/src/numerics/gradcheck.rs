//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::tensor::no_grad;
use super::{Scalar, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Picks up to `max_per_tensor` flat coordinates of each tensor (all of them
/// when the tensor is small enough).
pub fn sample_coords(numels: &[usize], max_per_tensor: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    numels
        .iter()
        .map(|&n| {
            if n <= max_per_tensor {
                (0..n).collect()
            } else {
                let mut v = sample(&mut rng, n, max_per_tensor).into_vec();
                v.sort_unstable();
                v
            }
        })
        .collect()
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` at the given
/// coordinates. Parameter values are restored afterwards.
pub fn finite_differences<T: Scalar>(
    params: &[Tensor<T>],
    coords: &[Vec<usize>],
    step: f64,
    mut loss: impl FnMut() -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(params.len());
    for (p, idx) in params.iter().zip(coords) {
        let mut g = Vec::with_capacity(idx.len());
        for &i in idx {
            let orig = p.data()[i];
            p.update_data(|d| d[i] = T::lit(orig.as_f64() + step));
            let plus = no_grad(&mut loss);
            p.update_data(|d| d[i] = T::lit(orig.as_f64() - step));
            let minus = no_grad(&mut loss);
            p.update_data(|d| d[i] = orig);
            g.push((plus? - minus?) / (2.0 * step));
        }
        out.push(g);
    }
    Ok(out)
}

/// Gradients already stored on `params`, read at `coords` (zeros when absent).
pub fn analytic_at<T: Scalar>(params: &[Tensor<T>], coords: &[Vec<usize>]) -> Vec<Vec<f64>> {
    params
        .iter()
        .zip(coords)
        .map(|(p, idx)| {
            let g = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            idx.iter().map(|&i| g[i].as_f64()).collect()
        })
        .collect()
}

/// Norm-wise relative error per tensor: `|a - n| / max(|a|, |n|)`.
/// Tensors whose gradients are both below `floor` in norm count as exact.
pub fn compare(
    names: &[String],
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    floor: f64,
) -> GradCheckReport {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tensors: Vec<TensorCheck> = names
        .iter()
        .zip(analytic.iter().zip(numeric))
        .map(|(name, (a, n))| {
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            let (na, nn) = (norm(a), norm(n));
            let scale = na.max(nn);
            let rel_error = if scale < floor {
                0.0
            } else {
                norm(&diff) / scale
            };
            TensorCheck {
                name: name.clone(),
                checked: a.len(),
                analytic_norm: na,
                numeric_norm: nn,
                rel_error,
            }
        })
        .collect();
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    GradCheckReport {
        tensors,
        max_rel_error,
    }
}

/// Full check: zero grads, backward through `loss`, compare with central
/// differences of the same closure.
pub fn check_gradients<T: Scalar>(
    named: &[(String, Tensor<T>)],
    max_per_tensor: usize,
    step: f64,
    seed: u64,
    loss: impl Fn() -> Result<Tensor<T>>,
) -> Result<GradCheckReport> {
    let params: Vec<Tensor<T>> = named.iter().map(|(_, t)| t.clone()).collect();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let numels: Vec<usize> = params.iter().map(|p| p.numel()).collect();
    let coords = sample_coords(&numels, max_per_tensor, seed);
    params.iter().for_each(|p| p.zero_grad());
    loss()?.backward()?;
    let analytic = analytic_at(&params, &coords);
    let numeric = finite_differences(&params, &coords, step, || Ok(loss()?.item()?.as_f64()))?;
    Ok(compare(&names, &analytic, &numeric, 1e-12))
}
