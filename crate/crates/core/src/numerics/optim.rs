use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment estimates, aligned with the optimizer's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Scalar> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

/// AdamW with decoupled weight decay and bias correction.
///
/// Parameters are assigned to groups; each step takes one learning rate per group.
pub struct AdamW<T: Scalar> {
    params: Vec<Tensor<T>>,
    groups: Vec<usize>,
    n_groups: usize,
    config: AdamWConfig,
    state: AdamWState<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: Vec<Tensor<T>>, config: AdamWConfig) -> Self {
        let groups = vec![0; params.len()];
        Self::with_groups(params, groups, 1, config).expect("single group is valid")
    }

    pub fn with_groups(
        params: Vec<Tensor<T>>,
        groups: Vec<usize>,
        n_groups: usize,
        config: AdamWConfig,
    ) -> Result<Self> {
        if groups.len() != params.len() {
            bail!(
                Argument,
                "{} group ids for {} parameters",
                groups.len(),
                params.len()
            );
        }
        if let Some(g) = groups.iter().find(|&&g| g >= n_groups) {
            bail!(Argument, "group id {g} >= {n_groups}");
        }
        let state = AdamWState {
            first_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step_count: 0,
        };
        Ok(Self {
            params,
            groups,
            n_groups,
            config,
            state,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn state(&self) -> &AdamWState<T> {
        &self.state
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    /// Replaces the moment state, e.g. after loading a checkpoint.
    pub fn set_state(&mut self, state: AdamWState<T>) -> Result<()> {
        let fits = state.first_moment.len() == self.params.len()
            && state.second_moment.len() == self.params.len()
            && self.params.iter().enumerate().all(|(i, p)| {
                state.first_moment[i].len() == p.numel()
                    && state.second_moment[i].len() == p.numel()
            });
        if !fits {
            bail!(
                Argument,
                "optimizer state does not match the managed parameters"
            );
        }
        self.state = state;
        Ok(())
    }

    /// Zeroes every managed gradient.
    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.zero_grad());
    }

    /// One update using the gradients currently stored on the parameters.
    pub fn step(&mut self, lrs: &[f64]) -> Result<()> {
        if lrs.len() != self.n_groups {
            bail!(
                Argument,
                "{} learning rates for {} groups",
                lrs.len(),
                self.n_groups
            );
        }
        if let Some(lr) = lrs.iter().find(|lr| !(**lr >= 0.0)) {
            bail!(Argument, "learning rate {lr} must be non-negative");
        }
        let grads: Vec<Vec<T>> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| {
                    crate::error::Error::Usage(format!(
                        "parameter {i} (shape {:?}) has no gradient",
                        p.shape()
                    ))
                })
            })
            .collect::<Result<_>>()?;

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, (param, grad)) in self.params.iter().zip(&grads).enumerate() {
            let lr = lrs[self.groups[i]];
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            param.update_data(|theta| {
                for j in 0..theta.len() {
                    let g = grad[j].as_f64();
                    let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * g;
                    let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * g * g;
                    m[j] = T::lit(mj);
                    v[j] = T::lit(vj);
                    let mut th = theta[j].as_f64();
                    th -= lr * weight_decay * th;
                    th -= lr * (mj / bc1) / ((vj / bc2).sqrt() + epsilon);
                    theta[j] = T::lit(th);
                }
            });
        }
        Ok(())
    }
}
