use super::layers::{FeedForward, ForwardCtx, LayerNorm, MultiHeadAttention};
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::Scope;

/// Per-layer outputs of both fusion streams.
///
/// Index 0 holds the encoder outputs as given to the fusion module; index `j`
/// holds the stream after fusion layer `j`.
#[derive(Clone)]
pub struct FusionTrace<T: Scalar> {
    pub visual_layers: Vec<Tensor<T>>,
    pub textual_layers: Vec<Tensor<T>>,
}

impl<T: Scalar> FusionTrace<T> {
    /// Number of fusion layers that were run.
    pub fn depth(&self) -> usize {
        self.visual_layers.len() - 1
    }

    /// Z^v: visual stream after the last computed layer.
    pub fn visual(&self) -> &Tensor<T> {
        self.visual_layers.last().expect("trace holds layer 0")
    }

    /// Z^l: textual stream after the last computed layer.
    pub fn textual(&self) -> &Tensor<T> {
        self.textual_layers.last().expect("trace holds layer 0")
    }

    /// Visual stream at trace index `k` (0 = before any fusion).
    pub fn select_visual(&self, k: usize) -> Result<&Tensor<T>> {
        match self.visual_layers.get(k) {
            Some(t) => Ok(t),
            None => bail!(
                Argument,
                "representation layer {k} outside 0..={}",
                self.depth()
            ),
        }
    }
}

/// One stream of a co-attention layer: self-attention, cross-attention to the
/// other stream, feedforward; pre-norm residual around each.
#[derive(Clone)]
pub struct CoAttentionStream<T: Scalar> {
    pub self_norm: LayerNorm<T>,
    pub self_attn: MultiHeadAttention<T>,
    pub cross_norm: LayerNorm<T>,
    pub context_norm: LayerNorm<T>,
    pub cross_attn: MultiHeadAttention<T>,
    pub ff_norm: LayerNorm<T>,
    pub ff: FeedForward<T>,
}

impl<T: Scalar> CoAttentionStream<T> {
    fn new(
        scope: &mut Scope<'_, T>,
        width: usize,
        heads: usize,
        ff_width: usize,
        eps: f64,
    ) -> Self {
        Self {
            self_norm: LayerNorm::new(scope, "self_norm", width, eps),
            self_attn: MultiHeadAttention::new(scope, "self_attn", width, heads),
            cross_norm: LayerNorm::new(scope, "cross_norm", width, eps),
            context_norm: LayerNorm::new(scope, "context_norm", width, eps),
            cross_attn: MultiHeadAttention::new(scope, "cross_attn", width, heads),
            ff_norm: LayerNorm::new(scope, "ff_norm", width, eps),
            ff: FeedForward::new(scope, "ff", width, ff_width),
        }
    }

    fn self_sublayer(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let h = self.self_norm.forward(x)?;
        x.add(&ctx.dropout(self.self_attn.forward(&h, &h)?)?)
    }

    fn cross_sublayer(
        &self,
        x: &Tensor<T>,
        other: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let q = self.cross_norm.forward(x)?;
        let c = self.context_norm.forward(other)?;
        x.add(&ctx.dropout(self.cross_attn.forward(&q, &c)?)?)
    }

    fn ff_sublayer(&self, x: &Tensor<T>, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let h = self.ff_norm.forward(x)?;
        x.add(&ctx.dropout(self.ff.forward(&h)?)?)
    }
}

#[derive(Clone)]
pub struct CoAttentionLayer<T: Scalar> {
    pub vision: CoAttentionStream<T>,
    pub text: CoAttentionStream<T>,
}

impl<T: Scalar> CoAttentionLayer<T> {
    pub fn forward(
        &self,
        v: &Tensor<T>,
        l: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let vs = self.vision.self_sublayer(v, ctx)?;
        let ls = self.text.self_sublayer(l, ctx)?;
        let vc = self.vision.cross_sublayer(&vs, &ls, ctx)?;
        let lc = self.text.cross_sublayer(&ls, &vs, ctx)?;
        Ok((
            self.vision.ff_sublayer(&vc, ctx)?,
            self.text.ff_sublayer(&lc, ctx)?,
        ))
    }
}

/// Dual-stream co-attention fusion module.
#[derive(Clone)]
pub struct FusionModule<T: Scalar> {
    pub layers: Vec<CoAttentionLayer<T>>,
    pub width: usize,
}

impl<T: Scalar> FusionModule<T> {
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
                let mut s = scope.sub(&format!("layer{i}"));
                CoAttentionLayer {
                    vision: CoAttentionStream::new(
                        &mut s.sub("vision"),
                        width,
                        heads,
                        ff_width,
                        eps,
                    ),
                    text: CoAttentionStream::new(&mut s.sub("text"), width, heads, ff_width, eps),
                }
            })
            .collect();
        Self { layers, width }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs every fusion layer.
    pub fn fuse(
        &self,
        hv: &Tensor<T>,
        hl: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<FusionTrace<T>> {
        self.fuse_until(hv, hl, self.depth(), ctx)
    }

    /// Runs the first `layers` fusion layers only; the trace has
    /// `layers + 1` entries.
    pub fn fuse_until(
        &self,
        hv: &Tensor<T>,
        hl: &Tensor<T>,
        layers: usize,
        ctx: &mut ForwardCtx,
    ) -> Result<FusionTrace<T>> {
        if layers > self.depth() {
            bail!(
                Argument,
                "requested {layers} fusion layers of {}",
                self.depth()
            );
        }
        let (_, vw) = hv.dims2()?;
        let (_, lw) = hl.dims2()?;
        if vw != self.width || lw != self.width {
            bail!(
                Argument,
                "fusion inputs {:?} / {:?} do not match width {}",
                hv.shape(),
                hl.shape(),
                self.width
            );
        }
        let mut visual_layers = vec![hv.clone()];
        let mut textual_layers = vec![hl.clone()];
        let (mut v, mut l) = (hv.clone(), hl.clone());
        for layer in &self.layers[..layers] {
            (v, l) = layer.forward(&v, &l, ctx)?;
            visual_layers.push(v.clone());
            textual_layers.push(l.clone());
        }
        Ok(FusionTrace {
            visual_layers,
            textual_layers,
        })
    }
}
