//! Masking, representation selection, decoders and the three pre-training
//! losses.

mod decoders;
mod losses;
mod masking;

pub use decoders::{pool_pair, DecoderParams, LanguageDecoder, PairHead, VisionDecoder};
pub use losses::{
    combine, itm_loss, mim_loss, mlm_loss, LossCounts, LossReport, ReconstructionTargets,
    TaskWeights,
};
pub use masking::{
    apply_image_mask, apply_text_mask, masked_count, sample_mask_plan, Corruption, MaskPlan,
    Modality,
};

use crate::error::Result;
use crate::numerics::{Scalar, Tensor};
use crate::transformer::FusionTrace;

/// Z^{vk}: the visual stream at trace index `k`; 0 is the pre-fusion input.
pub fn select_representation<T: Scalar>(trace: &FusionTrace<T>, k: usize) -> Result<Tensor<T>> {
    trace.select_visual(k).cloned()
}
