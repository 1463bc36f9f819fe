use std::any::Any;
use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::numerics::{multi_head_attention, Scalar, Tensor};
use crate::params::Scope;

thread_local! {
    static AUDIT: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Runs `f` with attention-row auditing enabled: every attention call on this
/// thread asserts that each probability row sums to one. Returns `f`'s
/// result and the number of audited rows.
pub fn with_attention_audit<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let prev = AUDIT.with(|a| a.replace(Some(0)));
    let out = f();
    let count = AUDIT.with(|a| a.replace(prev)).unwrap_or(0);
    (out, count)
}

fn audit_rows<T: Scalar>(probs: &[T], keys: usize) {
    AUDIT.with(|a| {
        if let Some(n) = a.get() {
            for row in probs.chunks(keys) {
                let s: f64 = row.iter().map(|p| p.as_f64()).sum();
                assert!((s - 1.0).abs() < 1e-4, "attention row sums to {s}, not 1");
            }
            a.set(Some(n + probs.len() / keys));
        }
    });
}

/// A pre-training forward procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Mlm,
    Mim,
    Itm,
}

/// What an encoder was given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncodedInput {
    /// Masked patch positions; empty for the full image.
    Image(Vec<usize>),
    Text(Vec<u32>),
}

/// Encoder inputs behind the two encodings one pass consumed. `None` when
/// the encoding did not come through a logged encoder call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PassInputs {
    pub pass: Pass,
    pub sample: Option<usize>,
    pub image_mask: Option<Vec<usize>>,
    pub text: Option<Vec<u32>>,
}

#[derive(Default)]
struct InputLog {
    /// (tensor id, input, clone keeping the id alive)
    encodings: Vec<(usize, EncodedInput, Box<dyn Any>)>,
    passes: Vec<PassInputs>,
    sample: Option<usize>,
}

/// Per-forward state: dropout probability and its random stream, plus an
/// optional log of encoder inputs and of which encodings each pass used.
pub struct ForwardCtx {
    dropout: f64,
    rng: ChaCha8Rng,
    log: Option<InputLog>,
}

impl ForwardCtx {
    /// Deterministic, no dropout.
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            log: None,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: None,
        }
    }

    pub fn with_input_log(mut self) -> Self {
        self.log = Some(InputLog::default());
        self
    }

    /// Batch index attached to subsequently logged passes.
    pub fn set_sample(&mut self, sample: usize) {
        if let Some(log) = &mut self.log {
            log.sample = Some(sample);
        }
    }

    pub fn log_encoding<T: Scalar>(&mut self, encoded: &Tensor<T>, input: EncodedInput) {
        if let Some(log) = &mut self.log {
            log.encodings
                .push((encoded.id(), input, Box::new(encoded.clone())));
        }
    }

    pub fn log_pass<T: Scalar>(&mut self, pass: Pass, hv: &Tensor<T>, hl: &Tensor<T>) {
        if let Some(log) = &mut self.log {
            let find = |id: usize| {
                log.encodings
                    .iter()
                    .rev()
                    .find(|e| e.0 == id)
                    .map(|e| e.1.clone())
            };
            let image_mask = match find(hv.id()) {
                Some(EncodedInput::Image(m)) => Some(m),
                _ => None,
            };
            let text = match find(hl.id()) {
                Some(EncodedInput::Text(t)) => Some(t),
                _ => None,
            };
            log.passes.push(PassInputs {
                pass,
                sample: log.sample,
                image_mask,
                text,
            });
        }
    }

    /// Logged passes so far; empty when logging is off.
    pub fn take_passes(&mut self) -> Vec<PassInputs> {
        self.log
            .as_mut()
            .map(|l| std::mem::take(&mut l.passes))
            .unwrap_or_default()
    }

    pub fn dropout<T: Scalar>(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        if self.dropout == 0.0 {
            return Ok(x);
        }
        x.dropout(self.dropout, &mut self.rng)
    }
}

/// Scaled dot-product attention over raw Q, K, V with `heads` heads, no
/// projections. Output has Q's shape.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (out, probs) = multi_head_attention(q, k, v, heads)?;
    audit_rows(&probs, k.shape()[0]);
    Ok(out)
}

#[derive(Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, input: usize, output: usize) -> Self {
        let mut s = scope.sub(name);
        Self {
            weight: s.normal("weight", &[input, output]),
            bias: Some(s.zeros("bias", &[output])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.linear(&self.weight, self.bias.as_ref())
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, width: usize, eps: f64) -> Self {
        let mut s = scope.sub(name);
        Self {
            gain: s.ones("gain", &[width]),
            bias: s.zeros("bias", &[width]),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }
}

/// Two affine maps with GELU in between.
#[derive(Clone)]
pub struct FeedForward<T: Scalar> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, width: usize, hidden: usize) -> Self {
        let mut s = scope.sub(name);
        Self {
            up: Linear::new(&mut s, "up", width, hidden),
            down: Linear::new(&mut s, "down", hidden, width),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.down.forward(&self.up.forward(x)?.gelu())
    }
}

/// Projected multi-head attention: `(Q W_q, K W_k, V W_v)` into the
/// attention core, heads concatenated, then `W_o`.
#[derive(Clone)]
pub struct MultiHeadAttention<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(scope: &mut Scope<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        let mut s = scope.sub(name);
        Self {
            query: Linear::new(&mut s, "query", width, width),
            key: Linear::new(&mut s, "key", width, width),
            value: Linear::new(&mut s, "value", width, width),
            output: Linear::new(&mut s, "output", width, width),
            heads,
        }
    }

    pub fn forward(&self, queries: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, qw) = queries.dims2()?;
        let (_, cw) = context.dims2()?;
        if qw != self.query.input_dim() || cw != self.key.input_dim() {
            bail!(
                Argument,
                "attention inputs {:?} / {:?} do not match width {}",
                queries.shape(),
                context.shape(),
                self.query.input_dim()
            );
        }
        let q = self.query.forward(queries)?;
        let k = self.key.forward(context)?;
        let v = self.value.forward(context)?;
        self.output.forward(&attention(&q, &k, &v, self.heads)?)
    }
}

/// Pre-norm Transformer layer: self-attention then feedforward, each wrapped
/// as `x + f(LN(x))`.
#[derive(Clone)]
pub struct EncoderLayer<T: Scalar> {
    pub attn_norm: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(
        scope: &mut Scope<'_, T>,
        width: usize,
        heads: usize,
        ff_width: usize,
        eps: f64,
    ) -> Self {
        Self {
            attn_norm: LayerNorm::new(scope, "attn_norm", width, eps),
            attn: MultiHeadAttention::new(scope, "attn", width, heads),
            ff_norm: LayerNorm::new(scope, "ff_norm", width, eps),
            ff: FeedForward::new(scope, "ff", width, ff_width),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let h = self.attn_norm.forward(x)?;
        let x = x.add(&ctx.dropout(self.attn.forward(&h, &h)?)?)?;
        let h = self.ff_norm.forward(&x)?;
        x.add(&ctx.dropout(self.ff.forward(&h)?)?)
    }
}

/// A stack of [`EncoderLayer`]s. Depth zero is the identity.
#[derive(Clone)]
pub struct Encoder<T: Scalar> {
    pub layers: Vec<EncoderLayer<T>>,
    pub width: usize,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(
        scope: &mut Scope<'_, T>,
        depth: usize,
        width: usize,
        heads: usize,
        ff_width: usize,
        eps: f64,
    ) -> Self {
        let layers = (0..depth)
            .map(|i| {
                EncoderLayer::new(
                    &mut scope.sub(&format!("layer{i}")),
                    width,
                    heads,
                    ff_width,
                    eps,
                )
            })
            .collect();
        Self { layers, width }
    }

    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let (_, w) = x.dims2()?;
        if w != self.width {
            bail!(Argument, "encoder input width {w}, expected {}", self.width);
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h, ctx)?;
        }
        Ok(h)
    }
}
