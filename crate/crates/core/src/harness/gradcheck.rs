use serde::Serialize;

use super::step::{batch_objective, draw_plans, step_rng};
use crate::data::{patchify, Image, Vocabulary};
use crate::error::Result;
use crate::model::{Model, Sample};
use crate::numerics::gradcheck::{
    analytic_at, compare, finite_differences, sample_coords, GradCheckReport,
};
use crate::numerics::Scalar;
use crate::objectives::TaskWeights;
use crate::transformer::{ForwardCtx, ModelConfig};

/// Outcome of the end-to-end gradient check at both precisions.
#[derive(Debug, Clone, Serialize)]
pub struct PretrainGradCheck {
    pub f64_report: GradCheckReport,
    pub f32_report: GradCheckReport,
    pub seconds: f64,
}

/// Two-pair batch on the tiny layout: 8x8 grayscale, 4x4 patches,
/// four-token captions over a 16-token vocabulary.
pub fn gradcheck_fixture(seed: u64) -> Result<(ModelConfig, Vocabulary, Vec<Sample>)> {
    let words = "w0 w1 w2 w3 w4 w5 w6 w7 w8 w9 w10";
    let vocab = Vocabulary::build(&[words], 16)?;
    let config = ModelConfig::tiny(vocab.len());
    let samples = (0..2u64)
        .map(|k| {
            let values = (0..64)
                .map(|i| (((i as u64 * 37 + k * 11 + seed * 5) % 23) as f32) / 23.0)
                .collect();
            Ok(Sample {
                grid: patchify(&Image::new(8, 8, 1, values)?, 4)?,
                text: vocab.tokenize(if k == 0 {
                    "w0 w3 w5 w9"
                } else {
                    "w2 w4 w6 w10"
                }),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((config, vocab, samples))
}

fn loss_fn<T: Scalar>(
    model: &Model<T>,
    batch: &[&Sample],
    records: &[super::step::SamplePlan],
) -> Result<crate::numerics::Tensor<T>> {
    Ok(batch_objective(
        model,
        batch,
        records,
        TaskWeights::default(),
        &mut ForwardCtx::eval(),
    )?
    .0)
}

/// Backward through embed, encoders, fusion, decoders and all three losses,
/// against central differences.
///
/// The 64-bit check differentiates the same graph numerically. The 32-bit
/// check compares 32-bit backward gradients with differences taken on an
/// exact 64-bit copy of the same parameters, since differences of 32-bit
/// losses are dominated by rounding.
pub fn pretrain_gradcheck(
    seed: u64,
    max_per_tensor: usize,
    init_std: f64,
) -> Result<PretrainGradCheck> {
    let start = std::time::Instant::now();
    let (config, vocab, samples) = gradcheck_fixture(seed)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let config = ModelConfig { init_std, ..config };
    let m32 = Model::<f32>::new(&config, seed)?;
    let m64: Model<f64> = m32.cast()?;
    let mut rng = step_rng(seed, 0);
    let records = draw_plans(&m64, &batch, &mut rng, &vocab)?;

    let names: Vec<String> = m64.params.iter().map(|(n, _)| n.to_string()).collect();
    let p64 = m64.params.tensors();
    let p32 = m32.params.tensors();
    let coords = sample_coords(
        &p64.iter().map(|p| p.numel()).collect::<Vec<_>>(),
        max_per_tensor,
        seed,
    );
    let numeric = finite_differences(&p64, &coords, 1e-5, || {
        Ok(loss_fn(&m64, &batch, &records)?.item()?)
    })?;

    m64.params.zero_grad();
    loss_fn(&m64, &batch, &records)?.backward()?;
    let f64_report = compare(&names, &analytic_at(&p64, &coords), &numeric, 1e-9);

    m32.params.zero_grad();
    loss_fn(&m32, &batch, &records)?.backward()?;
    let f32_report = compare(&names, &analytic_at(&p32, &coords), &numeric, 1e-9);

    Ok(PretrainGradCheck {
        f64_report,
        f32_report,
        seconds: start.elapsed().as_secs_f64(),
    })
}
