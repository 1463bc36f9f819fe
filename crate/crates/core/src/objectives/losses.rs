use serde::{Deserialize, Serialize};

use super::masking::{MaskPlan, Modality};
use crate::data::{PatchGrid, TokenSequence};
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};

/// Original values at masked positions, aligned with the plan order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReconstructionTargets {
    /// `P*P*C` pixel values per masked patch, concatenated.
    pub image_targets: Vec<f32>,
    pub patch_dim: usize,
    pub text_targets: Vec<u32>,
}

impl ReconstructionTargets {
    pub fn image(grid: &PatchGrid, plan: &MaskPlan) -> Result<Self> {
        if plan.modality != Modality::Image {
            bail!(Argument, "image targets need an image plan");
        }
        let mut image_targets = Vec::with_capacity(plan.len() * grid.patch_dim());
        for &p in &plan.positions {
            if p == 0 || p > grid.len() {
                bail!(
                    Argument,
                    "masked patch position {p} outside 1..={}",
                    grid.len()
                );
            }
            image_targets.extend_from_slice(grid.patch_values(p - 1));
        }
        Ok(Self {
            image_targets,
            patch_dim: grid.patch_dim(),
            text_targets: Vec::new(),
        })
    }

    pub fn text(seq: &TokenSequence, plan: &MaskPlan) -> Result<Self> {
        if plan.modality != Modality::Text {
            bail!(Argument, "text targets need a text plan");
        }
        let mut text_targets = Vec::with_capacity(plan.len());
        for &p in &plan.positions {
            if p == 0 || p > seq.len() {
                bail!(
                    Argument,
                    "masked token position {p} outside 1..={}",
                    seq.len()
                );
            }
            text_targets.push(seq.ids[p - 1]);
        }
        Ok(Self {
            image_targets: Vec::new(),
            patch_dim: 0,
            text_targets,
        })
    }

    pub fn image_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let rows = if self.patch_dim == 0 {
            0
        } else {
            self.image_targets.len() / self.patch_dim
        };
        Tensor::new(
            self.image_targets
                .iter()
                .map(|&v| T::lit(v as f64))
                .collect(),
            &[rows, self.patch_dim],
        )
    }
}

/// Mean squared pixel error over masked patches. No masked patches gives 0.
pub fn mim_loss<T: Scalar>(pred: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != targets.shape() {
        bail!(
            Argument,
            "mim_loss: predictions {:?} vs targets {:?}",
            pred.shape(),
            targets.shape()
        );
    }
    if pred.numel() == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    pred.mse(targets)
}

/// Mean negative log-likelihood of the original ids. No masked tokens gives 0.
pub fn mlm_loss<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Result<Tensor<T>> {
    let t: Vec<usize> = targets.iter().map(|&i| i as usize).collect();
    logits.cross_entropy(&t)
}

/// Binary cross-entropy of matching logits; label 1 means a true pair.
pub fn itm_loss<T: Scalar>(logits: &Tensor<T>, labels: &[bool]) -> Result<Tensor<T>> {
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    logits.bce_with_logits(&y)
}

/// Per-task loss multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub mim: f64,
    pub mlm: f64,
    pub itm: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self {
            mim: 1.0,
            mlm: 1.0,
            itm: 1.0,
        }
    }
}

impl TaskWeights {
    pub fn is_zero(&self) -> bool {
        self.mim == 0.0 && self.mlm == 0.0 && self.itm == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCounts {
    pub masked_patches: usize,
    pub masked_tokens: usize,
    pub itm_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mim: f64,
    pub mlm: f64,
    pub itm: f64,
    pub weights: TaskWeights,
    pub total: f64,
    pub counts: LossCounts,
}

/// Combines per-task losses into the weighted objective. Tasks with a zero
/// weight or nothing to predict are left out of the graph. Returns the
/// total as a tensor (for backward) together with the report.
pub fn combine<T: Scalar>(
    mim: &Tensor<T>,
    mlm: &Tensor<T>,
    itm: &Tensor<T>,
    weights: TaskWeights,
    counts: LossCounts,
) -> Result<(Tensor<T>, LossReport)> {
    let parts = [
        (mim, weights.mim, counts.masked_patches),
        (mlm, weights.mlm, counts.masked_tokens),
        (itm, weights.itm, counts.itm_pairs),
    ];
    let mut total: Option<Tensor<T>> = None;
    let mut values = [0.0; 3];
    let mut total_value = 0.0;
    for (i, (loss, w, n)) in parts.into_iter().enumerate() {
        let v = loss.item()?.as_f64();
        if !v.is_finite() {
            bail!(Argument, "non-finite loss {v} for task {i}");
        }
        values[i] = v;
        if w == 0.0 || n == 0 {
            continue;
        }
        total_value += w * v;
        let term = loss.scale(T::lit(w));
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    let report = LossReport {
        mim: values[0],
        mlm: values[1],
        itm: values[2],
        weights,
        total: total_value,
        counts,
    };
    Ok((total.unwrap_or_else(|| Tensor::scalar(T::zero())), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn mim_examples() {
        let t = Tensor::<f64>::new(rand_vec(12, 1), &[3, 4]).unwrap();
        assert_eq!(mim_loss(&t, &t).unwrap().item().unwrap(), 0.0);
        let shifted = t.add_scalar(0.1);
        assert!((mim_loss(&shifted, &t).unwrap().item().unwrap() - 0.01).abs() < 1e-12);
        let p = Tensor::<f64>::new(rand_vec(12, 2), &[3, 4]).unwrap();
        let (pv, tv) = (p.to_vec(), t.to_vec());
        let mut acc = 0.0;
        for r in 0..3 {
            for c in 0..4 {
                let d = pv[r * 4 + c] - tv[r * 4 + c];
                acc += d * d;
            }
        }
        assert!((mim_loss(&p, &t).unwrap().item().unwrap() - acc / 12.0).abs() < 1e-6);
        assert!(mim_loss(&p, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn mlm_examples() {
        let uniform = Tensor::<f64>::zeros(&[1, 10]);
        assert!((mlm_loss(&uniform, &[3]).unwrap().item().unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 10];
        peaked[7] = 60.0;
        let peaked = Tensor::<f64>::new(peaked, &[1, 10]).unwrap();
        assert!(mlm_loss(&peaked, &[7]).unwrap().item().unwrap() < 1e-20);
        assert_eq!(
            mlm_loss(&Tensor::<f64>::zeros(&[0, 10]), &[])
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );

        let x = rand_vec(30, 3);
        let targets = [1u32, 9, 4];
        let logits = Tensor::<f64>::new(x.clone(), &[3, 10]).unwrap();
        let mut acc = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * 10..(r + 1) * 10];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            acc -= (row[t as usize].exp() / z).ln();
        }
        assert!((mlm_loss(&logits, &targets).unwrap().item().unwrap() - acc / 3.0).abs() < 1e-6);
    }

    #[test]
    fn itm_examples() {
        let half = Tensor::<f64>::zeros(&[1, 1]);
        assert!((itm_loss(&half, &[true]).unwrap().item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let sure = Tensor::<f64>::full(&[1, 1], 50.0);
        assert!(itm_loss(&sure, &[true]).unwrap().item().unwrap() < 1e-20);

        let x = rand_vec(5, 4);
        let labels = [true, false, false, true, true];
        let mut acc = 0.0;
        for (v, &l) in x.iter().zip(&labels) {
            let p = 1.0 / (1.0 + (-v).exp());
            acc -= if l { p.ln() } else { (1.0 - p).ln() };
        }
        let got = itm_loss(&Tensor::<f64>::new(x, &[5, 1]).unwrap(), &labels)
            .unwrap()
            .item()
            .unwrap();
        assert!((got - acc / 5.0).abs() < 1e-12);
    }

    #[test]
    fn combine_weights_and_empty_tasks() {
        let a = Tensor::<f64>::scalar(0.5);
        let b = Tensor::<f64>::scalar(2.0);
        let c = Tensor::<f64>::scalar(0.25);
        let counts = LossCounts {
            masked_patches: 3,
            masked_tokens: 0,
            itm_pairs: 2,
        };
        let w = TaskWeights {
            mim: 2.0,
            mlm: 1.0,
            itm: 0.5,
        };
        let (t, r) = combine(&a, &b, &c, w, counts).unwrap();
        assert!((r.total - (1.0 + 0.125)).abs() < 1e-12);
        assert_eq!(t.item().unwrap(), r.total);
        let zero = TaskWeights {
            mim: 0.0,
            mlm: 0.0,
            itm: 0.0,
        };
        assert_eq!(combine(&a, &b, &c, zero, counts).unwrap().1.total, 0.0);
    }
}
