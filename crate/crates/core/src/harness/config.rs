use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::objectives::TaskWeights;
use crate::transformer::ModelConfig;

/// Optimization settings of one pre-training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub warmup_ratio: f64,
    pub lr_unimodal: f64,
    pub lr_fusion: f64,
    pub batch_size: usize,
    pub task_weights: TaskWeights,
    pub seed: u64,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_interval: u64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            warmup_ratio: 0.1,
            lr_unimodal: 1e-5,
            lr_fusion: 5e-5,
            batch_size: 32,
            task_weights: TaskWeights::default(),
            seed: 0,
            checkpoint_interval: 0,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_unimodal > 0.0 && self.lr_fusion > 0.0) {
            bail!(Config, "learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            bail!(Config, "warmup_ratio {} not in [0, 1]", self.warmup_ratio);
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            bail!(Config, "total_steps and batch_size must be positive");
        }
        let w = self.task_weights;
        if [w.mim, w.mlm, w.itm].iter().any(|v| !(*v >= 0.0)) {
            bail!(Config, "task weights must be non-negative");
        }
        Ok(())
    }
}

/// Downstream fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Train only the head when true.
    pub freeze: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-3,
            batch_size: 16,
            freeze: true,
        }
    }
}

/// Everything a command needs: corpus, model layout, training and
/// fine-tuning settings. Parsed from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub preset: String,
    pub max_vocab: usize,
    /// Model keys in file order, applied on top of the preset.
    pub model_overrides: Vec<(String, String)>,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub sweep_layers: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            preset: "desk".into(),
            max_vocab: 1000,
            model_overrides: Vec::new(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            sweep_layers: Vec::new(),
        }
    }
}

const MODEL_KEYS: &[&str] = &[
    "hidden",
    "heads",
    "vision_depth",
    "text_depth",
    "fusion_depth",
    "patch",
    "image_side",
    "channels",
    "max_text_len",
    "image_mask_ratio",
    "text_mask_ratio",
    "mim_layer",
    "decoder_depth",
    "decoder_width",
    "decoder_heads",
    "ff_mult",
    "init_std",
    "dropout",
    "layer_norm_eps",
];

fn preset(name: &str, vocab_size: usize) -> Option<ModelConfig> {
    match name {
        "base" => Some(ModelConfig::base(vocab_size)),
        "desk" => Some(ModelConfig::desk(vocab_size)),
        "tiny" => Some(ModelConfig::tiny(vocab_size)),
        _ => None,
    }
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn apply_model_key(c: &mut ModelConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "hidden" => c.hidden = num(key, value)?,
        "heads" => c.heads = num(key, value)?,
        "vision_depth" => c.vision_depth = num(key, value)?,
        "text_depth" => c.text_depth = num(key, value)?,
        "fusion_depth" => c.fusion_depth = num(key, value)?,
        "patch" => c.patch = num(key, value)?,
        "image_side" => {
            c.image_height = num(key, value)?;
            c.image_width = c.image_height;
        }
        "channels" => c.channels = num(key, value)?,
        "max_text_len" => c.max_text_len = num(key, value)?,
        "image_mask_ratio" => c.image_mask_ratio = num(key, value)?,
        "text_mask_ratio" => c.text_mask_ratio = num(key, value)?,
        "mim_layer" => c.mim_layer = num(key, value)?,
        "decoder_depth" => c.decoder_depth = num(key, value)?,
        "decoder_width" => c.decoder_width = num(key, value)?,
        "decoder_heads" => c.decoder_heads = num(key, value)?,
        "ff_mult" => c.ff_mult = num(key, value)?,
        "init_std" => c.init_std = num(key, value)?,
        "dropout" => c.dropout = num(key, value)?,
        "layer_norm_eps" => c.layer_norm_eps = num(key, value)?,
        _ => return Err(format!("unknown key {key}")),
    }
    Ok(())
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}")),
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative corpus
    /// paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut model_lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let Some((key, value)) = line.split_once('=') else {
                return Err(err("expected key = value".into()));
            };
            let (key, value) = (key.trim(), value.trim());
            let t = &mut cfg.train;
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "corpus" => {
                        if value.is_empty() {
                            return Err("corpus path is empty".into());
                        }
                        let p = Path::new(value);
                        cfg.corpus = Some(if p.is_absolute() {
                            p.to_path_buf()
                        } else {
                            base.join(p)
                        });
                    }
                    "preset" => {
                        if preset(value, 100).is_none() {
                            return Err(format!("unknown preset {value:?} (base, desk, tiny)"));
                        }
                        cfg.preset = value.to_string();
                    }
                    "max_vocab" => cfg.max_vocab = num(key, value)?,
                    "total_steps" => t.total_steps = num(key, value)?,
                    "warmup_ratio" => t.warmup_ratio = num(key, value)?,
                    "lr_unimodal" => t.lr_unimodal = num(key, value)?,
                    "lr_fusion" => t.lr_fusion = num(key, value)?,
                    "batch_size" => t.batch_size = num(key, value)?,
                    "weight_mim" => t.task_weights.mim = num(key, value)?,
                    "weight_mlm" => t.task_weights.mlm = num(key, value)?,
                    "weight_itm" => t.task_weights.itm = num(key, value)?,
                    "seed" => t.seed = num(key, value)?,
                    "checkpoint_interval" => t.checkpoint_interval = num(key, value)?,
                    "weight_decay" => t.weight_decay = num(key, value)?,
                    "finetune_steps" => cfg.finetune.steps = num(key, value)?,
                    "finetune_lr" => cfg.finetune.lr = num(key, value)?,
                    "finetune_batch_size" => cfg.finetune.batch_size = num(key, value)?,
                    "finetune_freeze" => cfg.finetune.freeze = parse_bool(key, value)?,
                    "sweep_layers" => {
                        cfg.sweep_layers = value
                            .split(',')
                            .map(|v| num(key, v.trim()))
                            .collect::<std::result::Result<_, _>>()?
                    }
                    k if MODEL_KEYS.contains(&k) => {
                        apply_model_key(&mut ModelConfig::desk(100), k, value)?;
                        model_lines.push((line_no, k.to_string(), value.to_string()));
                    }
                    _ => return Err(format!("unknown key {key}")),
                }
                Ok(())
            })();
            r.map_err(err)?;
        }
        cfg.model_overrides = model_lines
            .iter()
            .map(|(_, k, v)| (k.clone(), v.clone()))
            .collect();
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The corpus manifest path, or a config error naming the field.
    pub fn corpus_path(&self) -> Result<&Path> {
        match &self.corpus {
            Some(p) => Ok(p),
            None => bail!(
                Config,
                "missing required field `corpus` (path to a corpus manifest)"
            ),
        }
    }

    /// Resolved model layout for a vocabulary of `vocab_size` tokens.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut c = preset(&self.preset, vocab_size)
            .ok_or_else(|| Error::Config(format!("unknown preset {:?}", self.preset)))?;
        for (k, v) in &self.model_overrides {
            apply_model_key(&mut c, k, v).map_err(Error::Config)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key = value` rendering of every setting, for reports.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let f = &self.finetune;
        let mut lines = Vec::new();
        if let Some(c) = &self.corpus {
            lines.push(format!("corpus = {}", c.display()));
        }
        lines.push(format!("preset = {}", self.preset));
        lines.push(format!("max_vocab = {}", self.max_vocab));
        for (k, v) in &self.model_overrides {
            lines.push(format!("{k} = {v}"));
        }
        lines.extend([
            format!("total_steps = {}", t.total_steps),
            format!("warmup_ratio = {}", t.warmup_ratio),
            format!("lr_unimodal = {}", t.lr_unimodal),
            format!("lr_fusion = {}", t.lr_fusion),
            format!("batch_size = {}", t.batch_size),
            format!("weight_mim = {}", t.task_weights.mim),
            format!("weight_mlm = {}", t.task_weights.mlm),
            format!("weight_itm = {}", t.task_weights.itm),
            format!("seed = {}", t.seed),
            format!("checkpoint_interval = {}", t.checkpoint_interval),
            format!("weight_decay = {}", t.weight_decay),
            format!("finetune_steps = {}", f.steps),
            format!("finetune_lr = {}", f.lr),
            format!("finetune_batch_size = {}", f.batch_size),
            format!("finetune_freeze = {}", f.freeze),
        ]);
        if !self.sweep_layers.is_empty() {
            let ks: Vec<String> = self.sweep_layers.iter().map(|k| k.to_string()).collect();
            lines.push(format!("sweep_layers = {}", ks.join(",")));
        }
        lines.join("\n") + "\n"
    }

    /// Replaces the model override for `key`, keeping file order otherwise.
    pub fn set_model_key(&mut self, key: &str, value: String) -> Result<()> {
        if !MODEL_KEYS.contains(&key) {
            bail!(Config, "unknown model key {key}");
        }
        self.model_overrides.retain(|(k, _)| k != key);
        self.model_overrides.push((key.to_string(), value));
        Ok(())
    }
}
