use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::checkpoint::save_checkpoint;
use super::config::{RunConfig, TrainConfig};
use super::step::{batch_indices, pretrain_step, Optimizer, StepTrace};
use crate::data::{read_manifest, RawImage, Vocabulary};
use crate::error::{bail, Result};
use crate::model::{Model, Sample};
use crate::objectives::LossReport;
use crate::transformer::ModelConfig;

/// Paired corpus in model-ready form.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub captions: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    /// Builds a vocabulary over all captions and prepares every pair.
    pub fn from_pairs(
        images: &[RawImage],
        captions: &[String],
        run: &RunConfig,
    ) -> Result<(Self, ModelConfig)> {
        if images.len() != captions.len() {
            bail!(
                Argument,
                "{} images for {} captions",
                images.len(),
                captions.len()
            );
        }
        if images.is_empty() {
            bail!(Argument, "empty corpus");
        }
        let vocab = Vocabulary::build(captions, run.max_vocab)?;
        let config = run.model_config(vocab.len())?;
        let samples = images
            .iter()
            .zip(captions)
            .map(|(img, cap)| Sample::prepare(img, cap, &vocab, &config))
            .collect::<Result<_>>()?;
        Ok((
            Self {
                vocab,
                captions: captions.to_vec(),
                samples,
            },
            config,
        ))
    }

    /// Prepares pairs against an existing vocabulary, as when evaluating a
    /// checkpoint. Words the vocabulary lacks are a config error.
    pub fn with_vocab(
        images: &[RawImage],
        captions: &[String],
        vocab: Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        if images.len() != captions.len() {
            bail!(
                Argument,
                "{} images for {} captions",
                images.len(),
                captions.len()
            );
        }
        if let Some(cap) = captions.iter().find(|c| {
            c.split_whitespace()
                .any(|w| vocab.id(&w.to_lowercase()).is_none())
        }) {
            bail!(
                Config,
                "caption {cap:?} has words outside the checkpoint vocabulary"
            );
        }
        let samples = images
            .iter()
            .zip(captions)
            .map(|(img, cap)| Sample::prepare(img, cap, &vocab, config))
            .collect::<Result<_>>()?;
        Ok(Self {
            vocab,
            captions: captions.to_vec(),
            samples,
        })
    }

    pub fn load(manifest: &Path, run: &RunConfig) -> Result<(Self, ModelConfig)> {
        let entries = read_manifest(manifest)?;
        let images = entries
            .iter()
            .map(|e| RawImage::load(&e.image))
            .collect::<Result<Vec<_>>>()?;
        let captions: Vec<String> = entries.into_iter().map(|e| e.caption).collect();
        Self::from_pairs(&images, &captions, run)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lrs: [f64; 2],
    pub report: LossReport,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str =
        "step,lr_unimodal,lr_fusion,loss_mim,loss_mlm,loss_itm,total";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:e},{:e},{:.9},{:.9},{:.9},{:.9}",
            self.step, self.lrs[0], self.lrs[1], r.mim, r.mlm, r.itm, r.total
        )
    }
}

/// Drives `pretrain_step` over a corpus with deterministic batches.
pub struct Trainer<'a> {
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub train: TrainConfig,
    pub corpus: &'a Corpus,
    pub step: u64,
    pub history: Vec<StepMetrics>,
    log: Option<fs::File>,
    checkpoint: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model<f32>, train: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        train.validate()?;
        let optimizer = Optimizer::new(&model.params, &train)?;
        Ok(Self {
            model,
            optimizer,
            train,
            corpus,
            step: 0,
            history: Vec::new(),
            log: None,
            checkpoint: None,
        })
    }

    /// Appends one CSV row per step to `path` (header written first).
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{}", StepMetrics::CSV_HEADER)?;
        self.log = Some(f);
        Ok(())
    }

    /// Saves to `path` every `checkpoint_interval` steps and at the end.
    pub fn checkpoint_to(&mut self, path: &Path) {
        self.checkpoint = Some(path.to_path_buf());
    }

    pub fn batch(&self, step: u64) -> Vec<&'a Sample> {
        let corpus: &'a Corpus = self.corpus;
        let b = self.train.batch_size.min(corpus.len());
        batch_indices(corpus.len(), b, self.train.seed, step)
            .into_iter()
            .map(|i| &corpus.samples[i])
            .collect()
    }

    /// Runs one step and returns its metrics and trace.
    pub fn step_once(&mut self) -> Result<(StepMetrics, StepTrace)> {
        let step = self.step;
        let batch = self.batch(step);
        let lrs = self.optimizer.lrs_at(step)?;
        let (report, trace) = pretrain_step(
            &self.model,
            &mut self.optimizer,
            &batch,
            &self.corpus.vocab,
            &self.train,
            step,
        )?;
        let m = StepMetrics { step, lrs, report };
        if let Some(f) = &mut self.log {
            writeln!(f, "{}", m.csv_row())?;
        }
        self.step += 1;
        if let Some(path) = &self.checkpoint {
            let every = self.train.checkpoint_interval;
            if self.step == self.train.total_steps || (every > 0 && self.step % every == 0) {
                self.save(path)?;
            }
        }
        self.history.push(m.clone());
        Ok((m, trace))
    }

    /// Runs until `total_steps`.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.train.total_steps {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let a = &self.optimizer.adamw;
        save_checkpoint(
            path,
            &self.model,
            Some((a.config(), a.state())),
            &self.corpus.vocab,
            self.step,
        )
    }
}
