use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use mmae_core::data;
use mmae_core::eval::{self, Direction, ScoreMatrix};
use mmae_core::experiments::{self, EvalTask, Split};
use mmae_core::harness::{self, batch_indices, pretrain_step, Corpus, Optimizer, RunConfig};
use mmae_core::numerics::LrSchedule;
use mmae_core::objectives::{self, Corruption, Modality};
use mmae_core::transformer;
use mmae_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(format!("{}: {other}", other.kind())),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for mmae_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

#[pyclass(name = "Vocabulary", unsendable)]
struct PyVocabulary {
    inner: data::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (captions, max_size = 1000))]
    fn new(captions: Vec<String>, max_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::Vocabulary::build(&captions, max_size).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.inner.tokenize(text).ids
    }

    fn detokenize(&self, ids: Vec<u32>) -> String {
        self.inner.detokenize(&ids)
    }

    #[getter]
    fn mask_id(&self) -> u32 {
        self.inner.mask_id()
    }
}

#[pyclass(name = "ModelConfig", unsendable)]
struct PyModelConfig {
    inner: transformer::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// D=64, four heads, two layers per stack, 16x16 grayscale.
    #[staticmethod]
    fn desk(vocab_size: usize) -> Self {
        Self {
            inner: transformer::ModelConfig::desk(vocab_size),
        }
    }

    #[staticmethod]
    fn tiny(vocab_size: usize) -> Self {
        Self {
            inner: transformer::ModelConfig::tiny(vocab_size),
        }
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden
    }

    #[getter]
    fn fusion_depth(&self) -> usize {
        self.inner.fusion_depth
    }

    #[getter]
    fn mim_layer(&self) -> usize {
        self.inner.mim_layer
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn patch_dim(&self) -> usize {
        self.inner.patch_dim()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: mmae_core::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: mmae_core::Model::new(&config.inner, seed).py()?,
        })
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.total_elements()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// Learning-rate group per parameter: 0 unimodal, 1 fusion.
    fn param_groups(&self) -> PyResult<HashMap<String, usize>> {
        self.inner
            .params
            .iter()
            .map(|(n, _)| Ok((n.to_string(), harness::param_group(n).py()?)))
            .collect()
    }
}

/// Owns a corpus, model and optimizer; steps through pre-training.
#[pyclass(name = "Pretrainer", unsendable)]
struct PyPretrainer {
    run: RunConfig,
    corpus: Corpus,
    model: mmae_core::Model<f32>,
    optimizer: Optimizer<f32>,
    #[pyo3(get)]
    step: u64,
}

#[pymethods]
impl PyPretrainer {
    /// Reads a run configuration file and the corpus it names.
    #[new]
    #[pyo3(signature = (config_path, seed = None))]
    fn new(config_path: PathBuf, seed: Option<u64>) -> PyResult<Self> {
        let mut run = RunConfig::load(&config_path).py()?;
        if let Some(s) = seed {
            run.train.seed = s;
        }
        run.train.validate().py()?;
        let (corpus, config) = Corpus::load(run.corpus_path().py()?, &run).py()?;
        let model = mmae_core::Model::new(&config, run.train.seed).py()?;
        let optimizer = Optimizer::new(&model.params, &run.train).py()?;
        Ok(Self {
            run,
            corpus,
            model,
            optimizer,
            step: 0,
        })
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.run.train.total_steps
    }

    fn corpus_size(&self) -> usize {
        self.corpus.len()
    }

    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.model.config.clone(),
        }
    }

    /// One optimization step; returns its learning rates and losses.
    fn step_once(&mut self) -> PyResult<HashMap<String, f64>> {
        let train = &self.run.train;
        let b = train.batch_size.min(self.corpus.len());
        let batch: Vec<_> = batch_indices(self.corpus.len(), b, train.seed, self.step)
            .into_iter()
            .map(|i| &self.corpus.samples[i])
            .collect();
        let lrs = self.optimizer.lrs_at(self.step).py()?;
        let (r, _) = pretrain_step(&self.model, &mut self.optimizer, &batch, &self.corpus.vocab, train, self.step).py()?;
        self.step += 1;
        Ok(HashMap::from([
            ("step".to_string(), (self.step - 1) as f64),
            ("lr_unimodal".to_string(), lrs[0]),
            ("lr_fusion".to_string(), lrs[1]),
            ("mim".to_string(), r.mim),
            ("mlm".to_string(), r.mlm),
            ("itm".to_string(), r.itm),
            ("total".to_string(), r.total),
        ]))
    }

    /// Runs `steps` more steps (default: to the end) and returns the totals.
    #[pyo3(signature = (steps = None))]
    fn run(&mut self, steps: Option<u64>) -> PyResult<Vec<f64>> {
        let end = steps.map_or(self.run.train.total_steps, |s| (self.step + s).min(self.run.train.total_steps));
        let mut totals = Vec::new();
        while self.step < end {
            totals.push(self.step_once()?["total"]);
        }
        Ok(totals)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let a = &self.optimizer.adamw;
        harness::save_checkpoint(&path, &self.model, Some((a.config(), a.state())), &self.corpus.vocab, self.step).py()
    }

    /// Metric rows for `task` (classify, retrieve-zs, retrieve-ft) on `split`.
    #[pyo3(signature = (task, split = "train", ks = vec![1, 5, 10]))]
    fn evaluate(&self, task: &str, split: &str, ks: Vec<usize>) -> PyResult<Vec<(String, f64)>> {
        let task: EvalTask = task.parse().py()?;
        let split: Split = split.parse().py()?;
        let out = experiments::evaluate(&self.model, &self.corpus, task, split, &ks, &self.run, self.run.train.seed).py()?;
        Ok(out.rows.into_iter().map(|r| (r.metric, r.value)).collect())
    }

    /// Zero-shot matching scores over the training pool, images by texts.
    fn score_matrix(&self) -> PyResult<Vec<Vec<f64>>> {
        let pool: Vec<_> = experiments::matched_pool(&self.corpus, experiments::POOL_SIZE)
            .into_iter()
            .map(|i| self.corpus.samples[i].clone())
            .collect();
        let m = eval::score_matrix(&self.model, &pool, &pool).py()?;
        Ok(m.scores.chunks(m.n_texts).map(|r| r.to_vec()).collect())
    }
}

/// Writes `n` synthetic pairs into `out_dir`; returns (image path, caption).
#[pyfunction]
fn gen_corpus(n: usize, seed: u64, side: usize, out_dir: PathBuf) -> PyResult<Vec<(String, String)>> {
    let entries = mmae_core::corpus::gen_corpus(n, seed, side, &out_dir).py()?;
    Ok(entries.into_iter().map(|e| (e.image.display().to_string(), e.caption)).collect())
}

#[pyfunction]
fn masked_count(n: usize, ratio: f64) -> usize {
    objectives::masked_count(n, ratio)
}

/// Returns (1-based positions, corruption names).
#[pyfunction]
fn sample_mask_plan(n: usize, ratio: f64, modality: &str, seed: u64) -> PyResult<(Vec<usize>, Vec<String>)> {
    let modality = match modality {
        "image" => Modality::Image,
        "text" => Modality::Text,
        _ => return Err(PyValueError::new_err(format!("modality must be image or text, got {modality:?}"))),
    };
    let plan = objectives::sample_mask_plan(n, ratio, modality, seed);
    let names = plan
        .corruption
        .iter()
        .map(|c| match c {
            Corruption::Mask => "mask",
            Corruption::Random => "random",
            Corruption::Keep => "keep",
        })
        .map(String::from)
        .collect();
    Ok((plan.positions, names))
}

/// Recall@K of a square score matrix with diagonal ground truth.
#[pyfunction]
fn recall_at_k(scores: Vec<Vec<f64>>, direction: &str, k: usize) -> PyResult<f64> {
    let dir = match direction {
        "i2t" => Direction::I2T,
        "t2i" => Direction::T2I,
        _ => return Err(PyValueError::new_err(format!("direction must be i2t or t2i, got {direction:?}"))),
    };
    let n_texts = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != n_texts) {
        return Err(PyValueError::new_err("score rows differ in length"));
    }
    let m = ScoreMatrix::new(scores.len(), n_texts, scores.concat()).py()?;
    eval::recall_at_k(&m, dir, k).py()
}

#[pyfunction]
fn lr_at(step: u64, peak_lr: f64, total_steps: u64, warmup_ratio: f64) -> PyResult<f64> {
    LrSchedule::new(peak_lr, total_steps, warmup_ratio).py()?.lr_at(step).py()
}

/// End-to-end gradient check; returns max relative errors and seconds.
#[pyfunction]
#[pyo3(signature = (seed = 0, max_per_tensor = 6, init_std = 0.1))]
fn grad_check(seed: u64, max_per_tensor: usize, init_std: f64) -> PyResult<HashMap<String, f64>> {
    let r = harness::pretrain_gradcheck(seed, max_per_tensor, init_std).py()?;
    Ok(HashMap::from([
        ("f64_max_rel_error".to_string(), r.f64_report.max_rel_error),
        ("f32_max_rel_error".to_string(), r.f32_report.max_rel_error),
        ("seconds".to_string(), r.seconds),
    ]))
}

/// Verifies a checkpoint and returns (step, config hash, parameter count).
#[pyfunction]
fn checkpoint_info(path: PathBuf) -> PyResult<(u64, String, usize)> {
    let c = harness::load_checkpoint(&path).py()?;
    Ok((c.manifest.step, c.manifest.config_hash, c.manifest.params.len()))
}

#[pymodule]
fn mmae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPretrainer>()?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(masked_count, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask_plan, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_info, m)?)?;
    Ok(())
}
