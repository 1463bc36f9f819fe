//! The desk downstream task, evaluation runs and the two analysis
//! experiments (fusion-layer sweep and MIM x MLM ablation).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::SceneSpec;
use crate::error::{bail, Error, Result};
use crate::eval::{
    finetune, finetune_matching, pair_feature_grid, retrieval_rows, score_features,
    ClassificationHead, MetricRow, ScoreMatrix,
};
use crate::harness::{Corpus, RunConfig, StepMetrics, TrainConfig, Trainer};
use crate::model::{Model, Sample};
use crate::numerics::{no_grad, Scalar};
use crate::objectives::{sample_mask_plan, Modality, TaskWeights};
use crate::transformer::{ForwardCtx, ModelConfig};

/// Classes of the locate task, one per quadrant.
pub const LOCATE_CLASSES: usize = 4;

/// Largest retrieval pool drawn from a split.
pub const POOL_SIZE: usize = 16;

fn scene_of(caption: &str) -> Result<SceneSpec> {
    SceneSpec::from_caption(caption).ok_or_else(|| {
        Error::Config(format!(
            "caption {caption:?} is not a synthetic scene; the desk tasks need a generated corpus"
        ))
    })
}

/// Locate task: given the image and the caption without its position words,
/// predict the quadrant.
pub fn locate_task(corpus: &Corpus, config: &ModelConfig) -> Result<Vec<(Sample, usize)>> {
    corpus
        .captions
        .iter()
        .zip(&corpus.samples)
        .map(|(cap, s)| {
            let scene = scene_of(cap)?;
            let text = corpus
                .vocab
                .tokenize(&scene.description())
                .truncated(config.max_text_len);
            Ok((
                Sample {
                    grid: s.grid.clone(),
                    text,
                },
                scene.quadrant.index(),
            ))
        })
        .collect()
}

/// Scenes of the attribute grid whose captions do not occur in `corpus`,
/// rendered at the model's resolution.
pub fn heldout_corpus(corpus: &Corpus, config: &ModelConfig) -> Result<Corpus> {
    let seen: HashSet<&str> = corpus.captions.iter().map(String::as_str).collect();
    let scenes: Vec<SceneSpec> = SceneSpec::all()
        .into_iter()
        .filter(|s| !seen.contains(s.caption().as_str()))
        .collect();
    if scenes.is_empty() {
        bail!(
            Config,
            "the corpus covers every scene; no held-out split exists"
        );
    }
    let images = scenes
        .iter()
        .map(|s| s.render(config.image_height))
        .collect::<Result<Vec<_>>>()?;
    let captions: Vec<String> = scenes.iter().map(|s| s.caption()).collect();
    Corpus::with_vocab(&images, &captions, corpus.vocab.clone(), config)
}

/// Indices of up to `n` pairs with pairwise distinct captions, in corpus order.
pub fn matched_pool(corpus: &Corpus, n: usize) -> Vec<usize> {
    let mut seen = HashSet::new();
    (0..corpus.len())
        .filter(|&i| seen.insert(corpus.captions[i].as_str()))
        .take(n)
        .collect()
}

/// Trains a fresh model (seeded by `train.seed`) on `corpus`.
pub fn pretrain_model(
    corpus: &Corpus,
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<(Model<f32>, Vec<StepMetrics>)> {
    let model = Model::<f32>::new(config, train.seed)?;
    let mut trainer = Trainer::new(model, train.clone(), corpus)?;
    trainer.run()?;
    Ok((trainer.model, trainer.history))
}

/// Replaces the caption of `pairs` random image-caption pairs with another
/// caption and counts the pairs whose MIM predictions change in any bit.
pub fn mim_caption_sensitivity<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    pairs: usize,
    seed: u64,
) -> Result<usize> {
    let n = samples.len();
    if !(1..n).any(|j| samples[j].text.ids != samples[0].text.ids) {
        bail!(
            Argument,
            "caption replacement needs at least two distinct captions"
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let np = model.config.num_patches();
    let mut changed = 0;
    no_grad(|| -> Result<()> {
        let ctx = &mut ForwardCtx::eval();
        for _ in 0..pairs {
            let (i, j) = loop {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                if samples[i].text.ids != samples[j].text.ids {
                    break (i, j);
                }
            };
            let plan = sample_mask_plan(
                np,
                model.config.image_mask_ratio,
                Modality::Image,
                rng.random(),
            );
            let hv = model.encode_image(&samples[i].grid, Some(&plan), ctx)?;
            let own =
                model.forward_mim(&hv, &model.encode_text(&samples[i].text, ctx)?, &plan, ctx)?;
            let other =
                model.forward_mim(&hv, &model.encode_text(&samples[j].text, ctx)?, &plan, ctx)?;
            let bits = |t: &crate::Tensor<T>| {
                t.to_vec()
                    .iter()
                    .map(|v| v.as_f64().to_bits())
                    .collect::<Vec<_>>()
            };
            if bits(&own) != bits(&other) {
                changed += 1;
            }
        }
        Ok(())
    })?;
    Ok(changed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EvalTask {
    Classify,
    RetrieveZs,
    RetrieveFt,
}

impl EvalTask {
    pub fn name(self) -> &'static str {
        match self {
            EvalTask::Classify => "classify",
            EvalTask::RetrieveZs => "retrieve-zs",
            EvalTask::RetrieveFt => "retrieve-ft",
        }
    }
}

impl FromStr for EvalTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "classify" => EvalTask::Classify,
            "retrieve-zs" => EvalTask::RetrieveZs,
            "retrieve-ft" => EvalTask::RetrieveFt,
            _ => bail!(
                Argument,
                "unknown task {s:?}; expected classify, retrieve-zs or retrieve-ft"
            ),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Split {
    /// The pre-training corpus itself.
    Train,
    /// Grid scenes absent from the corpus.
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "heldout" => Split::Heldout,
            _ => bail!(Argument, "unknown split {s:?}; expected train or heldout"),
        })
    }
}

/// Result of one evaluation: metric rows and, for retrieval, the scores.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub rows: Vec<MetricRow>,
    pub scores: Option<ScoreMatrix>,
}

fn pool_samples(corpus: &Corpus) -> Vec<Sample> {
    matched_pool(corpus, POOL_SIZE)
        .into_iter()
        .map(|i| corpus.samples[i].clone())
        .collect()
}

/// Runs `task` on `split`. Heads are always fitted on the training corpus
/// and then measured on the split.
pub fn evaluate(
    model: &Model<f32>,
    corpus: &Corpus,
    task: EvalTask,
    split: Split,
    ks: &[usize],
    run: &RunConfig,
    seed: u64,
) -> Result<EvalOutput> {
    let config = &model.config;
    let target = match split {
        Split::Train => corpus.clone(),
        Split::Heldout => heldout_corpus(corpus, config)?,
    };
    match task {
        EvalTask::Classify => {
            let train = locate_task(corpus, config)?;
            let head =
                ClassificationHead::new(config.hidden, LOCATE_CLASSES, config.init_std, seed);
            let report = finetune(model, &head, &train, &run.finetune, seed)?;
            let acc = match split {
                Split::Train => report.final_accuracy,
                Split::Heldout => {
                    crate::eval::accuracy(model, &head, &locate_task(&target, config)?)?
                }
            };
            Ok(EvalOutput {
                rows: vec![MetricRow::new(
                    task.name(),
                    split.name(),
                    "accuracy",
                    acc,
                    seed,
                )],
                scores: None,
            })
        }
        EvalTask::RetrieveZs | EvalTask::RetrieveFt => {
            let pool = pool_samples(&target);
            let n = pool.len();
            if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
                bail!(Argument, "K = {k} outside 1..={n} for a pool of {n} pairs");
            }
            let features = pair_feature_grid(model, &pool, &pool)?;
            let scores = if task == EvalTask::RetrieveZs {
                score_features(&model.decoders.itm, &features, n, n)?
            } else {
                let train_pool = pool_samples(corpus);
                let m = train_pool.len();
                let train_features = match split {
                    Split::Train => features.clone(),
                    Split::Heldout => pair_feature_grid(model, &train_pool, &train_pool)?,
                };
                let head = finetune_matching(model, &train_features, m, &run.finetune, seed)?;
                score_features(&head, &features, n, n)?
            };
            Ok(EvalOutput {
                rows: retrieval_rows(task.name(), split.name(), &scores, ks, seed)?,
                scores: Some(scores),
            })
        }
    }
}

/// One configuration of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub label: String,
    pub settings: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Table of an experiment with the resolved configuration it ran under.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// Resolved run configuration in config-file syntax.
    pub config: String,
    pub rows: Vec<ExperimentRow>,
    /// Per-row total pre-training loss by step.
    pub series: BTreeMap<String, Vec<f64>>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    /// Wide CSV: label, settings columns, metric columns, seed.
    pub fn to_csv(&self) -> String {
        let settings: BTreeSet<&str> = self
            .rows
            .iter()
            .flat_map(|r| r.settings.keys().map(String::as_str))
            .collect();
        let metrics: BTreeSet<&str> = self
            .rows
            .iter()
            .flat_map(|r| r.metrics.keys().map(String::as_str))
            .collect();
        let mut header = vec!["experiment", "label"];
        header.extend(settings.iter().copied());
        header.extend(metrics.iter().copied());
        header.push("seed");
        let mut s = format!("{}\n", header.join(","));
        for r in &self.rows {
            let mut cells = vec![self.experiment.clone(), r.label.clone()];
            cells.extend(
                settings
                    .iter()
                    .map(|k| r.settings.get(*k).cloned().unwrap_or_default()),
            );
            cells.extend(metrics.iter().map(|k| {
                r.metrics
                    .get(*k)
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default()
            }));
            cells.push(r.seed.to_string());
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, label: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Pre-trains under `train`, then measures the desk tasks: locate accuracy
/// of a fine-tuned head and zero-shot retrieval on the training pool.
fn train_and_measure(
    corpus: &Corpus,
    config: &ModelConfig,
    train: &TrainConfig,
    run: &RunConfig,
) -> Result<(Model<f32>, BTreeMap<String, f64>, Vec<f64>)> {
    let (model, history) = pretrain_model(corpus, config, train)?;
    let mut metrics = BTreeMap::new();
    if let Some(last) = history.last() {
        let r = &last.report;
        for (k, v) in [
            ("loss_mim", r.mim),
            ("loss_mlm", r.mlm),
            ("loss_itm", r.itm),
            ("loss_total", r.total),
        ] {
            metrics.insert(k.to_string(), v);
        }
    }
    let seed = train.seed;
    let locate = evaluate(
        &model,
        corpus,
        EvalTask::Classify,
        Split::Train,
        &[],
        run,
        seed,
    )?;
    metrics.insert("locate_accuracy".into(), locate.rows[0].value);
    let zs = evaluate(
        &model,
        corpus,
        EvalTask::RetrieveZs,
        Split::Train,
        &[1],
        run,
        seed,
    )?;
    for r in zs.rows {
        metrics.insert(format!("zs_{}", r.metric), r.value);
    }
    let series = history.iter().map(|m| m.report.total).collect();
    Ok((model, metrics, series))
}

fn on_off(w: f64) -> String {
    if w > 0.0 { "on" } else { "off" }.to_string()
}

fn ordering_note(report: &ExperimentReport, metric: &str) -> String {
    let mut rows: Vec<(&str, f64)> = report
        .rows
        .iter()
        .filter_map(|r| Some((r.label.as_str(), *r.metrics.get(metric)?)))
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut text = String::new();
    for (i, (l, v)) in rows.iter().enumerate() {
        if i > 0 {
            text.push_str(if rows[i - 1].1 == *v { " = " } else { " > " });
        }
        text.push_str(&format!("{l} ({v:.4})"));
    }
    format!("{metric} ordering, best first: {text}")
}

/// The {MIM off/on} x {MLM off/on} grid with matching always on. "On"
/// uses the configured weight (1 when the configured weight is 0).
pub fn ablation(
    run: &RunConfig,
    corpus: &Corpus,
    config: &ModelConfig,
) -> Result<ExperimentReport> {
    let base = run.train.task_weights;
    let on = |w: f64| if w > 0.0 { w } else { 1.0 };
    let itm = on(base.itm);
    let mut report = ExperimentReport {
        experiment: "ablation".into(),
        config: run.to_text(),
        rows: Vec::new(),
        series: BTreeMap::new(),
        notes: Vec::new(),
    };
    for (mim, mlm) in [
        (0.0, 0.0),
        (0.0, on(base.mlm)),
        (on(base.mim), 0.0),
        (on(base.mim), on(base.mlm)),
    ] {
        let train = TrainConfig {
            task_weights: TaskWeights { mim, mlm, itm },
            ..run.train.clone()
        };
        let (_, metrics, series) = train_and_measure(corpus, config, &train, run)?;
        let label = format!("mim={} mlm={}", on_off(mim), on_off(mlm));
        let settings = BTreeMap::from([
            ("mim".to_string(), on_off(mim)),
            ("mlm".to_string(), on_off(mlm)),
            ("itm".to_string(), "on".to_string()),
        ]);
        report.series.insert(label.clone(), series);
        report.rows.push(ExperimentRow {
            label,
            settings,
            metrics,
            seed: train.seed,
        });
    }
    report.notes.push(ordering_note(&report, "locate_accuracy"));
    let top = report
        .rows
        .iter()
        .map(|r| r.metrics["locate_accuracy"])
        .fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.metrics["locate_accuracy"] == top)
        .map(|r| r.label.as_str())
        .collect();
    let verdict = match (best.contains(&"mim=on mlm=on"), best.len()) {
        (true, 1) => "is the best row".to_string(),
        (true, n) => format!("ties {n} ways for the best row"),
        (false, _) => "is not the best row".to_string(),
    };
    report.notes.push(format!(
        "both objectives on {verdict} by locate accuracy (best: {})",
        best.join(", ")
    ));
    Ok(report)
}

/// Caption replacements checked per sweep row.
pub const INVARIANCE_PAIRS: usize = 100;

/// One pre-training run per selected MIM layer `k`. Each row records
/// whether MIM predictions are invariant to caption replacement; at k = 0
/// anything else is an integrity error.
pub fn layer_sweep(
    run: &RunConfig,
    corpus: &Corpus,
    config: &ModelConfig,
    layers: &[usize],
) -> Result<ExperimentReport> {
    if layers.is_empty() {
        bail!(Argument, "layer sweep needs at least one k");
    }
    if let Some(&k) = layers.iter().find(|&&k| k > config.fusion_depth) {
        bail!(
            Argument,
            "k = {k} exceeds the fusion depth {}",
            config.fusion_depth
        );
    }
    let mut report = ExperimentReport {
        experiment: "layer-sweep".into(),
        config: run.to_text(),
        rows: Vec::new(),
        series: BTreeMap::new(),
        notes: Vec::new(),
    };
    for &k in layers {
        let cfg = ModelConfig {
            mim_layer: k,
            ..config.clone()
        };
        let (model, mut metrics, series) = train_and_measure(corpus, &cfg, &run.train, run)?;
        let changed =
            mim_caption_sensitivity(&model, &corpus.samples, INVARIANCE_PAIRS, run.train.seed)?;
        if k == 0 && changed > 0 {
            bail!(Integrity, "k = 0 MIM predictions changed under caption replacement for {changed} of {INVARIANCE_PAIRS} pairs");
        }
        metrics.insert("pairs_changed".into(), changed as f64);
        let check = match (k, changed) {
            (0, _) => "pass",
            (_, 0) => "invariant",
            _ => "text-dependent",
        };
        let label = format!("k={k}");
        report.series.insert(label.clone(), series);
        report.rows.push(ExperimentRow {
            label,
            settings: BTreeMap::from([
                ("k".to_string(), k.to_string()),
                ("invariance_check".to_string(), check.to_string()),
            ]),
            metrics,
            seed: run.train.seed,
        });
    }
    report.notes.push(ordering_note(&report, "locate_accuracy"));
    Ok(report)
}
