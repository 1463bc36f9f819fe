use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::data::{TokenSequence, Vocabulary};
use crate::error::{bail, Result};
use crate::model::{Model, Sample};
use crate::numerics::{AdamW, AdamWConfig, LrSchedule, Scalar, Tensor};
use crate::objectives::{
    apply_text_mask, combine, itm_loss, mim_loss, mlm_loss, sample_mask_plan, LossCounts,
    LossReport, MaskPlan, Modality, ReconstructionTargets, TaskWeights,
};
use crate::params::ParamStore;
use crate::transformer::{ForwardCtx, PassInputs};

pub const UNIMODAL: usize = 0;
pub const FUSION: usize = 1;

/// Group of a parameter by name: embeddings and unimodal encoders, or
/// everything trained at the fusion rate.
pub fn param_group(name: &str) -> Result<usize> {
    if name.starts_with("embed.") || name.starts_with("encoder.") {
        Ok(UNIMODAL)
    } else if ["fusion.", "decoder.", "head."]
        .iter()
        .any(|p| name.starts_with(p))
    {
        Ok(FUSION)
    } else {
        bail!(Config, "parameter {name} belongs to no learning-rate group")
    }
}

/// Group id for every parameter in registry order.
pub fn build_param_groups<T: Scalar>(params: &ParamStore<T>) -> Result<Vec<usize>> {
    params.iter().map(|(n, _)| param_group(n)).collect()
}

/// Grouped AdamW over every model parameter, plus one schedule per group.
pub struct Optimizer<T: Scalar> {
    pub adamw: AdamW<T>,
    pub schedules: [LrSchedule; 2],
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(params: &ParamStore<T>, train: &TrainConfig) -> Result<Self> {
        let groups = build_param_groups(params)?;
        let cfg = AdamWConfig {
            weight_decay: train.weight_decay,
            ..AdamWConfig::default()
        };
        Ok(Self {
            adamw: AdamW::with_groups(params.tensors(), groups, 2, cfg)?,
            schedules: [
                LrSchedule::new(train.lr_unimodal, train.total_steps, train.warmup_ratio)?,
                LrSchedule::new(train.lr_fusion, train.total_steps, train.warmup_ratio)?,
            ],
        })
    }

    pub fn lrs_at(&self, step: u64) -> Result<[f64; 2]> {
        Ok([
            self.schedules[0].lr_at(step)?,
            self.schedules[1].lr_at(step)?,
        ])
    }
}

/// Random draws for one sample of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub image_plan: MaskPlan,
    pub text_plan: MaskPlan,
    /// Caption ids after the text plan's corruption.
    pub masked_text: Vec<u32>,
    /// Batch index whose caption the matching pass pairs with this image.
    pub itm_partner: usize,
    pub itm_label: bool,
}

/// Per-sample draws of one step and the encoder inputs behind every
/// forward pass, as logged by the model during the step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepTrace {
    pub plans: Vec<SamplePlan>,
    pub passes: Vec<PassInputs>,
}

/// Per-step random stream, a pure function of the run seed and step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Masks, corrupted text and ITM partners for one batch, all drawn from
/// the step's random stream.
pub fn draw_plans<T: Scalar>(
    model: &Model<T>,
    batch: &[&Sample],
    rng: &mut ChaCha8Rng,
    vocab: &Vocabulary,
) -> Result<Vec<SamplePlan>> {
    let c = &model.config;
    let n = c.num_patches();
    let b = batch.len();
    let mut out = Vec::with_capacity(b);
    for (i, s) in batch.iter().enumerate() {
        let image_plan = sample_mask_plan(n, c.image_mask_ratio, Modality::Image, rng.random());
        let text_plan = sample_mask_plan(
            s.text.len(),
            c.text_mask_ratio,
            Modality::Text,
            rng.random(),
        );
        let masked = apply_text_mask(&s.text, &text_plan, vocab)?;
        let swap = b > 1 && rng.random::<f64>() < 0.5;
        let partner = if swap {
            let j = rng.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        } else {
            i
        };
        out.push(SamplePlan {
            image_plan,
            text_plan,
            masked_text: masked.ids,
            itm_label: batch[partner].text.ids == s.text.ids,
            itm_partner: partner,
        });
    }
    Ok(out)
}

/// Forward passes for one batch and the weighted objective.
///
/// Per sample: MLM sees the full image and the corrupted text, MIM sees the
/// masked image and the raw text, ITM sees the full image and a caption that
/// is swapped with another sample's with probability 0.5. Tasks with zero
/// weight are not run.
pub fn batch_objective<T: Scalar>(
    model: &Model<T>,
    batch: &[&Sample],
    records: &[SamplePlan],
    weights: TaskWeights,
    ctx: &mut ForwardCtx,
) -> Result<(Tensor<T>, LossReport)> {
    if batch.is_empty() {
        bail!(Argument, "empty batch");
    }
    let mut mim_preds = Vec::new();
    let mut mim_targets = Vec::new();
    let mut mlm_logits = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut itm_logits = Vec::new();
    let mut itm_labels = Vec::new();
    let need_text = weights.mim > 0.0 || weights.itm > 0.0;
    let need_image = weights.mlm > 0.0 || weights.itm > 0.0;
    let raw_text: Vec<Option<Tensor<T>>> = batch
        .iter()
        .map(|s| {
            if need_text {
                model.encode_text(&s.text, ctx).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    for (i, (s, rec)) in batch.iter().zip(records).enumerate() {
        ctx.set_sample(i);
        let hv = if need_image {
            Some(model.encode_image(&s.grid, None, ctx)?)
        } else {
            None
        };
        if weights.mlm > 0.0 && !rec.text_plan.is_empty() {
            let masked = TokenSequence {
                ids: rec.masked_text.clone(),
                ..s.text.clone()
            };
            let hl_masked = model.encode_text(&masked, ctx)?;
            mlm_logits.push(model.forward_mlm(
                hv.as_ref().expect("image encoded"),
                &hl_masked,
                &rec.text_plan,
                ctx,
            )?);
            mlm_targets.extend(ReconstructionTargets::text(&s.text, &rec.text_plan)?.text_targets);
        }
        if weights.mim > 0.0 && !rec.image_plan.is_empty() {
            let hv_masked = model.encode_image(&s.grid, Some(&rec.image_plan), ctx)?;
            let hl = raw_text[i].as_ref().expect("text encoded");
            mim_preds.push(model.forward_mim(&hv_masked, hl, &rec.image_plan, ctx)?);
            mim_targets
                .push(ReconstructionTargets::image(&s.grid, &rec.image_plan)?.image_tensor::<T>()?);
        }
        if weights.itm > 0.0 {
            let hl = raw_text[rec.itm_partner].as_ref().expect("text encoded");
            itm_logits.push(model.itm_logit(hv.as_ref().expect("image encoded"), hl, ctx)?);
            itm_labels.push(rec.itm_label);
        }
    }
    let cat = |parts: &[Tensor<T>], cols: usize| -> Result<Tensor<T>> {
        if parts.is_empty() {
            Ok(Tensor::zeros(&[0, cols]))
        } else {
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
        }
    };
    let c = &model.config;
    let pred = cat(&mim_preds, c.patch_dim())?;
    let target = cat(&mim_targets, c.patch_dim())?;
    let logits = cat(&mlm_logits, c.vocab_size)?;
    let itm = cat(&itm_logits, 1)?;
    let counts = LossCounts {
        masked_patches: pred.shape()[0],
        masked_tokens: mlm_targets.len(),
        itm_pairs: itm_labels.len(),
    };
    combine(
        &mim_loss(&pred, &target)?,
        &mlm_loss(&logits, &mlm_targets)?,
        &itm_loss(&itm, &itm_labels)?,
        weights,
        counts,
    )
}

/// One optimization step on `batch`: forward passes, one backward on the
/// weighted sum, one grouped AdamW update at the scheduled rates.
pub fn pretrain_step<T: Scalar>(
    model: &Model<T>,
    opt: &mut Optimizer<T>,
    batch: &[&Sample],
    vocab: &Vocabulary,
    train: &TrainConfig,
    step: u64,
) -> Result<(LossReport, StepTrace)> {
    if batch.is_empty() {
        bail!(Argument, "empty batch");
    }
    if step >= train.total_steps {
        bail!(Argument, "step {step} outside 0..{}", train.total_steps);
    }
    let mut rng = step_rng(train.seed, step);
    let records = draw_plans(model, batch, &mut rng, vocab)?;
    let mut ctx = ForwardCtx::train(model.config.dropout, rng.random()).with_input_log();
    opt.adamw.zero_grad();
    let (total, report) = batch_objective(model, batch, &records, train.task_weights, &mut ctx)?;
    if report.counts.masked_patches + report.counts.masked_tokens + report.counts.itm_pairs > 0
        && !train.task_weights.is_zero()
    {
        total.backward()?;
        opt.adamw.step(&opt.lrs_at(step)?)?;
    }
    Ok((
        report,
        StepTrace {
            plans: records,
            passes: ctx.take_passes(),
        },
    ))
}

/// Deterministic data order: a fresh permutation of the corpus per epoch.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let flat = step * batch_size as u64 + j;
            let epoch = flat / n as u64;
            let pos = (flat % n as u64) as usize;
            if cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..n).collect();
                rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[pos]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{patchify, Image};
    use crate::transformer::ModelConfig;

    fn setup() -> (Vocabulary, Model<f32>, Vec<Sample>) {
        let captions = ["a b c d", "d c b a", "b b a", "c a d d"];
        let vocab = Vocabulary::build(&captions, 16).unwrap();
        let model = Model::<f32>::new(&ModelConfig::tiny(vocab.len()), 1).unwrap();
        let samples = captions
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let values = (0..64)
                    .map(|i| ((i * 7 + k * 13) % 11) as f32 / 11.0)
                    .collect();
                Sample {
                    grid: patchify(&Image::new(8, 8, 1, values).unwrap(), 4).unwrap(),
                    text: vocab.tokenize(c),
                }
            })
            .collect();
        (vocab, model, samples)
    }

    fn train(steps: u64, weights: TaskWeights) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            warmup_ratio: 0.0,
            lr_unimodal: 1e-3,
            lr_fusion: 1e-3,
            batch_size: 4,
            task_weights: weights,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn groups_partition_the_registry() {
        let (_, model, _) = setup();
        let groups = build_param_groups(&model.params).unwrap();
        assert_eq!(groups.len(), model.params.len());
        let count = |g| {
            model
                .params
                .iter()
                .zip(&groups)
                .filter(|(_, &x)| x == g)
                .map(|((_, t), _)| t.numel())
                .sum::<usize>()
        };
        assert_eq!(
            count(UNIMODAL) + count(FUSION),
            model.params.total_elements()
        );
        assert!(param_group("other.weight").is_err());
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let (vocab, model, samples) = setup();
        let cfg = train(
            10,
            TaskWeights {
                mim: 2.0,
                mlm: 0.5,
                itm: 1.5,
            },
        );
        let mut opt = Optimizer::new(&model.params, &cfg).unwrap();
        let batch: Vec<&Sample> = samples.iter().collect();
        let (r, _) = pretrain_step(&model, &mut opt, &batch, &vocab, &cfg, 0).unwrap();
        let expect = 2.0 * r.mim
            + if r.counts.masked_tokens > 0 {
                0.5 * r.mlm
            } else {
                0.0
            }
            + 1.5 * r.itm;
        assert!((r.total - expect).abs() < 1e-6);
        assert!(pretrain_step(&model, &mut opt, &[], &vocab, &cfg, 1).is_err());
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let (vocab, model, samples) = setup();
        let cfg = train(
            5,
            TaskWeights {
                mim: 0.0,
                mlm: 0.0,
                itm: 0.0,
            },
        );
        let before: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| t.to_vec()).collect();
        let mut opt = Optimizer::new(&model.params, &cfg).unwrap();
        let batch: Vec<&Sample> = samples.iter().collect();
        let (r, _) = pretrain_step(&model, &mut opt, &batch, &vocab, &cfg, 0).unwrap();
        assert_eq!(r.total, 0.0);
        let after: Vec<Vec<f32>> = model.params.iter().map(|(_, t)| t.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let (vocab, model, samples) = setup();
            let cfg = train(10, TaskWeights::default());
            let mut opt = Optimizer::new(&model.params, &cfg).unwrap();
            (0..10)
                .map(|s| {
                    let idx = batch_indices(samples.len(), 2, cfg.seed, s);
                    let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                    pretrain_step(&model, &mut opt, &batch, &vocab, &cfg, s)
                        .unwrap()
                        .0
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_batch_losses_decrease() {
        let (vocab, model, samples) = setup();
        let cfg = train(50, TaskWeights::default());
        let mut opt = Optimizer::new(&model.params, &cfg).unwrap();
        let batch: Vec<&Sample> = samples.iter().collect();
        let eval = |m: &Model<f32>| {
            let mut rng = step_rng(99, 0);
            let rec = draw_plans(m, &batch, &mut rng, &vocab).unwrap();
            crate::no_grad(|| {
                batch_objective(
                    m,
                    &batch,
                    &rec,
                    TaskWeights::default(),
                    &mut ForwardCtx::eval(),
                )
            })
            .unwrap()
            .1
        };
        let first = eval(&model);
        for s in 0..50 {
            pretrain_step(&model, &mut opt, &batch, &vocab, &cfg, s).unwrap();
        }
        let last = eval(&model);
        assert!(last.mim < first.mim, "{first:?} {last:?}");
        assert!(last.mlm < first.mlm, "{first:?} {last:?}");
    }

    #[test]
    fn epochs_cover_the_corpus() {
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(10, 2, 7, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
