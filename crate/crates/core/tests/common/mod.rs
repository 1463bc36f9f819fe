#![allow(dead_code)]

use std::path::Path;

use mmae::corpus::distinct_scenes;
use mmae::harness::{batch_objective, draw_plans, step_rng, Corpus, RunConfig};
use mmae::objectives::{Corruption, LossReport, MaskPlan, Modality, TaskWeights};
use mmae::transformer::{ForwardCtx, ModelConfig};
use mmae::{no_grad, Model, Sample};

/// Desk layout trained hard enough to memorize a small corpus: larger init
/// scale, equal 1e-3 rates for both groups, batch 8.
pub const OVERFIT_CONFIG: &str = "\
preset = desk
init_std = 0.1
total_steps = 2000
warmup_ratio = 0.05
lr_unimodal = 1e-3
lr_fusion = 1e-3
batch_size = 8
seed = 0
";

pub fn run_config(text: &str) -> RunConfig {
    RunConfig::parse(text, Path::new(".")).expect("test config parses")
}

/// `n` distinct synthetic scenes as an in-memory corpus.
pub fn scene_corpus(n: usize, seed: u64, run: &RunConfig) -> (Corpus, ModelConfig) {
    let scenes = distinct_scenes(n, seed).unwrap();
    let images: Vec<_> = scenes.iter().map(|s| s.render(16).unwrap()).collect();
    let captions: Vec<String> = scenes.iter().map(|s| s.caption()).collect();
    Corpus::from_pairs(&images, &captions, run).unwrap()
}

/// Full-corpus objective under one fixed draw of masks and swaps.
pub fn fixed_objective(model: &Model<f32>, corpus: &Corpus) -> LossReport {
    let batch: Vec<&Sample> = corpus.samples.iter().collect();
    let mut rng = step_rng(12345, 0);
    let plans = draw_plans(model, &batch, &mut rng, &corpus.vocab).unwrap();
    no_grad(|| {
        batch_objective(
            model,
            &batch,
            &plans,
            TaskWeights::default(),
            &mut ForwardCtx::eval(),
        )
    })
    .unwrap()
    .1
}

/// Masks each caption token in turn (mask token, full image) and counts
/// correct argmax predictions over the whole corpus.
pub fn masked_token_accuracy(model: &Model<f32>, corpus: &Corpus) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    no_grad(|| {
        let ctx = &mut ForwardCtx::eval();
        for s in &corpus.samples {
            let hv = model.encode_image(&s.grid, None, ctx).unwrap();
            for p in 1..=s.text.len() {
                let mut text = s.text.clone();
                text.ids[p - 1] = corpus.vocab.mask_id();
                let hl = model.encode_text(&text, ctx).unwrap();
                let plan = MaskPlan {
                    modality: Modality::Text,
                    positions: vec![p],
                    corruption: vec![Corruption::Mask],
                    seed: 0,
                };
                let logits = model.forward_mlm(&hv, &hl, &plan, ctx).unwrap().to_vec();
                let pred =
                    (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
                hits += usize::from(pred as u32 == s.text.ids[p - 1]);
                total += 1;
            }
        }
    });
    hits as f64 / total as f64
}
