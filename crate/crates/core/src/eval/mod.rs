//! Downstream heads and metrics: pair classification, matching scores,
//! Recall@K retrieval and fine-tuning.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::harness::{param_group, FinetuneConfig};
use crate::model::{Model, Sample};
use crate::numerics::{no_grad, AdamW, AdamWConfig, Scalar, Tensor};
use crate::objectives::PairHead;
use crate::params::{ParamBuilder, ParamStore};
use crate::transformer::ForwardCtx;

/// Pair classifier over `[z_I ; z_T]`, with its own parameter store.
#[derive(Clone)]
pub struct ClassificationHead<T: Scalar> {
    pub head: PairHead<T>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ClassificationHead<T> {
    /// Registers `head.cls.*` with the model's init scale.
    pub fn new(hidden: usize, n_classes: usize, init_std: f64, seed: u64) -> Self {
        let mut b = ParamBuilder::new(seed, init_std);
        let head = PairHead::new(&mut b.root("head").sub("cls"), hidden, n_classes);
        Self {
            head,
            params: b.finish(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.outputs()
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Label distribution for one pair.
pub fn classify<T: Scalar>(
    model: &Model<T>,
    head: &ClassificationHead<T>,
    sample: &Sample,
) -> Result<Vec<f64>> {
    no_grad(|| {
        let pooled = model.pair_features(sample, &mut ForwardCtx::eval())?;
        Ok(softmax_row(&head.head.forward(&pooled)?.to_f64_vec()))
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Matched-pair probability from the pre-training matching head.
pub fn score_pair<T: Scalar>(model: &Model<T>, image: &Sample, text: &Sample) -> Result<f64> {
    let pair = Sample {
        grid: image.grid.clone(),
        text: text.text.clone(),
    };
    no_grad(|| {
        let pooled = model.pair_features(&pair, &mut ForwardCtx::eval())?;
        Ok(sigmoid(
            model.decoders.itm.forward(&pooled)?.item()?.as_f64(),
        ))
    })
}

/// `scores[i][j]`: image `i` against text `j`; the diagonal is ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub n_images: usize,
    pub n_texts: usize,
    pub scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n_images: usize, n_texts: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_images * n_texts {
            bail!(
                Argument,
                "{} scores for a {n_images}x{n_texts} matrix",
                scores.len()
            );
        }
        if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
            bail!(Argument, "non-finite score {v}");
        }
        Ok(Self {
            n_images,
            n_texts,
            scores,
        })
    }

    pub fn at(&self, image: usize, text: usize) -> f64 {
        self.scores[image * self.n_texts + text]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n_images {
            let row: Vec<String> = (0..self.n_texts)
                .map(|j| format!("{:.9}", self.at(i, j)))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

/// Pooled pair rows for every (image, text) combination, `n_images * n_texts`
/// tensors of shape `1 x 2D`, each encoding computed once.
pub fn pair_feature_grid<T: Scalar>(
    model: &Model<T>,
    images: &[Sample],
    texts: &[Sample],
) -> Result<Vec<Tensor<T>>> {
    no_grad(|| {
        let ctx = &mut ForwardCtx::eval();
        let hv: Vec<_> = images
            .iter()
            .map(|s| model.encode_image(&s.grid, None, ctx))
            .collect::<Result<_>>()?;
        let hl: Vec<_> = texts
            .iter()
            .map(|s| model.encode_text(&s.text, ctx))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(hv.len() * hl.len());
        for v in &hv {
            for l in &hl {
                out.push(model.pooled(v, l, ctx)?);
            }
        }
        Ok(out)
    })
}

/// Matching probabilities of a head over a precomputed feature grid.
pub fn score_features<T: Scalar>(
    head: &PairHead<T>,
    features: &[Tensor<T>],
    n_images: usize,
    n_texts: usize,
) -> Result<ScoreMatrix> {
    let scores = no_grad(|| {
        features
            .iter()
            .map(|f| Ok(sigmoid(head.forward(f)?.item()?.as_f64())))
            .collect::<Result<Vec<f64>>>()
    })?;
    ScoreMatrix::new(n_images, n_texts, scores)
}

/// Zero-shot scores with the pre-training matching head.
pub fn score_matrix<T: Scalar>(
    model: &Model<T>,
    images: &[Sample],
    texts: &[Sample],
) -> Result<ScoreMatrix> {
    let f = pair_feature_grid(model, images, texts)?;
    score_features(&model.decoders.itm, &f, images.len(), texts.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Images query, texts are ranked.
    I2T,
    /// Texts query, images are ranked.
    T2I,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
        }
    }
}

/// Fraction of queries whose diagonal match is among the top `k`
/// candidates. Ranking is by descending score, ties by ascending candidate
/// index.
pub fn recall_at_k(scores: &ScoreMatrix, direction: Direction, k: usize) -> Result<f64> {
    let (queries, pool) = match direction {
        Direction::I2T => (scores.n_images, scores.n_texts),
        Direction::T2I => (scores.n_texts, scores.n_images),
    };
    if k == 0 || k > pool {
        bail!(Argument, "K = {k} outside 1..={pool}");
    }
    if queries > pool {
        bail!(
            Argument,
            "{queries} queries but only {pool} candidates; ground truth is the diagonal"
        );
    }
    let s = |q: usize, c: usize| match direction {
        Direction::I2T => scores.at(q, c),
        Direction::T2I => scores.at(c, q),
    };
    let hits = (0..queries)
        .filter(|&q| {
            let truth = s(q, q);
            let ahead = (0..pool)
                .filter(|&c| c != q && (s(q, c) > truth || (s(q, c) == truth && c < q)))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / queries as f64)
}

/// One CSV metric row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub task: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    pub const CSV_HEADER: &'static str = "task,split,metric,value,seed";

    pub fn new(task: &str, split: &str, metric: &str, value: f64, seed: u64) -> Self {
        Self {
            task: task.into(),
            split: split.into(),
            metric: metric.into(),
            value,
            seed,
        }
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{}\n", MetricRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{}",
            r.task, r.split, r.metric, r.value, r.seed
        );
    }
    s
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// Recall@K in both directions for each K; any K above the pool size is
/// an argument error.
pub fn retrieval_rows(
    task: &str,
    split: &str,
    scores: &ScoreMatrix,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for dir in [Direction::I2T, Direction::T2I] {
        for &k in ks {
            let v = recall_at_k(scores, dir, k)?;
            rows.push(MetricRow::new(
                task,
                split,
                &format!("{}_r@{k}", dir.name()),
                v,
                seed,
            ));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneReport {
    pub losses: Vec<f64>,
    /// Training-set accuracy after each pass over the data.
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
}

pub fn accuracy<T: Scalar>(
    model: &Model<T>,
    head: &ClassificationHead<T>,
    data: &[(Sample, usize)],
) -> Result<f64> {
    let mut correct = 0;
    for (s, y) in data {
        let p = classify(model, head, s)?;
        let pred = (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best });
        correct += usize::from(pred == *y);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn check_labels(data: &[(Sample, usize)], n_classes: usize) -> Result<()> {
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= n_classes) {
        bail!(Argument, "label {y} outside 0..{n_classes}");
    }
    Ok(())
}

/// Cross-entropy fine-tuning of `head` (and of the model unless frozen).
///
/// A frozen model is run once under `no_grad` to cache pooled features, so
/// only head parameters receive gradients.
pub fn finetune<T: Scalar>(
    model: &Model<T>,
    head: &ClassificationHead<T>,
    data: &[(Sample, usize)],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    check_labels(data, head.n_classes())?;
    if data.is_empty() {
        bail!(Argument, "empty fine-tuning set");
    }
    let mut report = FinetuneReport::default();
    if cfg.steps == 0 {
        report.final_accuracy = accuracy(model, head, data)?;
        return Ok(report);
    }
    let mut params = head.params.tensors();
    let mut groups = vec![0; params.len()];
    if !cfg.freeze {
        for (name, t) in model.params.iter() {
            param_group(name)?;
            params.push(t.clone());
            groups.push(0);
        }
    }
    let mut opt = AdamW::with_groups(params, groups, 1, AdamWConfig::default())?;
    let cached: Option<Vec<Tensor<T>>> = if cfg.freeze {
        Some(no_grad(|| {
            data.iter()
                .map(|(s, _)| model.pair_features(s, &mut ForwardCtx::eval()))
                .collect::<Result<_>>()
        })?)
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let b = cfg.batch_size.clamp(1, data.len());
    for _ in 0..cfg.steps {
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if cursor == order.len() {
                if !report.losses.is_empty() {
                    report.epoch_accuracy.push(accuracy(model, head, data)?);
                }
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        opt.zero_grad();
        let rows: Vec<Tensor<T>> = match &cached {
            Some(c) => idx.iter().map(|&i| c[i].clone()).collect(),
            None => idx
                .iter()
                .map(|&i| model.pair_features(&data[i].0, &mut ForwardCtx::eval()))
                .collect::<Result<_>>()?,
        };
        let pooled = Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
        let loss = head.head.forward(&pooled)?.cross_entropy(&labels)?;
        loss.backward()?;
        opt.step(&[cfg.lr])?;
        report.losses.push(loss.item()?.as_f64());
    }
    report.final_accuracy = accuracy(model, head, data)?;
    Ok(report)
}

/// Copy of the model's matching head re-trained on matched (diagonal) and
/// mismatched (off-diagonal) pairs of a frozen feature grid.
pub fn finetune_matching<T: Scalar>(
    model: &Model<T>,
    features: &[Tensor<T>],
    n: usize,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<PairHead<T>> {
    if features.len() != n * n || n < 2 {
        bail!(
            Argument,
            "matching fine-tune needs a square pool of at least 2, got {} features for n = {n}",
            features.len()
        );
    }
    let mut b = ParamBuilder::<T>::new(seed, model.config.init_std);
    let head = PairHead::new(&mut b.root("head").sub("itm_ft"), model.config.hidden, 1);
    let params = b.finish();
    let src = &model.decoders.itm;
    for (dst, s) in [
        (&head.hidden.weight, &src.hidden.weight),
        (&head.output.weight, &src.output.weight),
    ] {
        dst.set_data(s.to_vec())?;
    }
    for (dst, s) in [
        (&head.hidden.bias, &src.hidden.bias),
        (&head.output.bias, &src.output.bias),
    ] {
        if let (Some(d), Some(s)) = (dst, s) {
            d.set_data(s.to_vec())?;
        }
    }
    let mut opt = AdamW::new(params.tensors(), AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (cfg.batch_size / 2).max(1);
    for _ in 0..cfg.steps {
        let mut rows = Vec::with_capacity(2 * half);
        let mut labels = Vec::with_capacity(2 * half);
        for _ in 0..half {
            let i = rng.random_range(0..n);
            rows.push(features[i * n + i].clone());
            labels.push(1.0);
            let j = (i + rng.random_range(1..n)) % n;
            rows.push(features[i * n + j].clone());
            labels.push(0.0);
        }
        opt.zero_grad();
        let x = Tensor::concat(&rows.iter().collect::<Vec<_>>(), 0)?;
        head.forward(&x)?.bce_with_logits(&labels)?.backward()?;
        opt.step(&[cfg.lr])?;
    }
    Ok(head)
}
