use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingTables, TokenSequence, Vocabulary};
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

/// What happens to one masked text position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

/// Masked positions of one sample in one modality.
///
/// Positions are sequence row indices: `1..=N` for patches, `1..=M` for
/// content tokens. Row 0 (aggregation / start) and the boundary row are never
/// included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub modality: Modality,
    pub positions: Vec<usize>,
    /// One draw per position for text plans, empty for image plans.
    pub corruption: Vec<Corruption>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn empty(modality: Modality) -> Self {
        Self {
            modality,
            positions: Vec::new(),
            corruption: Vec::new(),
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `ceil(ratio * n)` with a small tolerance so that products like
/// `0.15 * 20` that land a hair above an integer do not round up.
pub fn masked_count(n_maskable: usize, ratio: f64) -> usize {
    let exact = ratio * n_maskable as f64;
    ((exact - 1e-9).ceil().max(0.0) as usize).min(n_maskable)
}

/// Uniform sample without replacement of `ceil(ratio * n)` positions.
///
/// Text plans draw a corruption per position: 80% mask token, 10% random
/// token, 10% unchanged.
pub fn sample_mask_plan(n_maskable: usize, ratio: f64, modality: Modality, seed: u64) -> MaskPlan {
    let ratio = ratio.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = masked_count(n_maskable, ratio);
    let mut positions: Vec<usize> = sample(&mut rng, n_maskable, count)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    positions.sort_unstable();
    let corruption = match modality {
        Modality::Image => Vec::new(),
        Modality::Text => (0..count)
            .map(|_| match rng.random::<f64>() {
                u if u < 0.8 => Corruption::Mask,
                u if u < 0.9 => Corruption::Random,
                _ => Corruption::Keep,
            })
            .collect(),
    };
    MaskPlan {
        modality,
        positions,
        corruption,
        seed,
    }
}

/// Replaces masked patch rows of `xv` by `mask embedding + position embedding`.
pub fn apply_image_mask<T: Scalar>(
    xv: &Tensor<T>,
    plan: &MaskPlan,
    tables: &EmbeddingTables<T>,
) -> Result<Tensor<T>> {
    let (rows, width) = xv.dims2()?;
    if plan.modality != Modality::Image {
        bail!(Argument, "text plan applied to an image");
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p == 0 || p >= rows) {
        bail!(
            Argument,
            "masked patch position {p} outside 1..={}",
            rows - 1
        );
    }
    if plan.is_empty() {
        return Ok(xv.clone());
    }
    let fill = Tensor::zeros(&[plan.len(), width]).add_broadcast(&tables.image_mask)?;
    let fill = fill.add(&tables.vision_positions(&plan.positions)?)?;
    xv.replace_rows(&plan.positions, &fill)
}

/// Applies a text plan's corruption draws to a token sequence.
pub fn apply_text_mask(
    seq: &TokenSequence,
    plan: &MaskPlan,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    if plan.modality != Modality::Text {
        bail!(Argument, "image plan applied to text");
    }
    if plan.corruption.len() != plan.positions.len() {
        bail!(
            Argument,
            "plan has {} corruption draws for {} positions",
            plan.corruption.len(),
            plan.len()
        );
    }
    let m = seq.len();
    if let Some(&p) = plan.positions.iter().find(|&&p| p == 0 || p > m) {
        bail!(Argument, "masked token position {p} outside 1..={m}");
    }
    let regular = vocab.regular_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut out = seq.clone();
    for (&p, &c) in plan.positions.iter().zip(&plan.corruption) {
        match c {
            Corruption::Mask => out.ids[p - 1] = vocab.mask_id(),
            Corruption::Random => {
                if !regular.is_empty() {
                    out.ids[p - 1] = rng.random_range(regular.clone());
                }
            }
            Corruption::Keep => {}
        }
    }
    Ok(out)
}
