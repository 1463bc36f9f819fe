//! The assembled model: embeddings, two unimodal encoders, co-attention
//! fusion, pre-training decoders and the matching head.

use crate::data::{
    center_crop_resize, patchify, EmbeddingTables, PatchGrid, RawImage, TokenSequence, Vocabulary,
};
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};
use crate::objectives::{
    apply_image_mask, pool_pair, select_representation, DecoderParams, MaskPlan,
};
use crate::params::{ParamBuilder, ParamStore};
use crate::transformer::{
    EncodedInput, Encoder, ForwardCtx, FusionModule, FusionTrace, ModelConfig, Pass,
};

/// One image-text pair in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub grid: PatchGrid,
    pub text: TokenSequence,
}

impl Sample {
    /// Crops/resizes the image to the configured side, patchifies it and
    /// tokenizes the caption, truncated to the text capacity.
    pub fn prepare(
        image: &RawImage,
        caption: &str,
        vocab: &Vocabulary,
        config: &ModelConfig,
    ) -> Result<Self> {
        if config.image_height != config.image_width {
            bail!(
                Config,
                "only square inputs are supported, got {}x{}",
                config.image_height,
                config.image_width
            );
        }
        if image.channels != config.channels {
            bail!(
                Argument,
                "image has {} channels, model expects {}",
                image.channels,
                config.channels
            );
        }
        let resized = center_crop_resize(image, config.image_height)?;
        Ok(Self {
            grid: patchify(&resized, config.patch)?,
            text: vocab.tokenize(caption).truncated(config.max_text_len),
        })
    }
}

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: EmbeddingTables<T>,
    pub vision_encoder: Encoder<T>,
    pub text_encoder: Encoder<T>,
    pub fusion: FusionModule<T>,
    pub decoders: DecoderParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut b = ParamBuilder::new(seed, c.init_std);
        let mut root = b.root("");
        let embed = EmbeddingTables::new(&mut root.sub("embed"), c);
        let mut enc = root.sub("encoder");
        let ff = c.ff_width();
        let eps = c.layer_norm_eps;
        let vision_encoder = Encoder::new(
            &mut enc.sub("vision"),
            c.vision_depth,
            c.hidden,
            c.heads,
            ff,
            eps,
        );
        let text_encoder = Encoder::new(
            &mut enc.sub("text"),
            c.text_depth,
            c.hidden,
            c.heads,
            ff,
            eps,
        );
        let fusion = FusionModule::new(
            &mut root.sub("fusion"),
            c.fusion_depth,
            c.hidden,
            c.heads,
            ff,
            eps,
        );
        let decoders = DecoderParams::new(&mut root, c);
        Ok(Self {
            config: c.clone(),
            params: b.finish(),
            embed,
            vision_encoder,
            text_encoder,
            fusion,
            decoders,
        })
    }

    /// Same architecture at another precision, values converted.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let out = Model::<U>::new(&self.config, 0)?;
        out.params.copy_from(&self.params)?;
        Ok(out)
    }

    /// X^v with an optional mask applied, before the encoder.
    pub fn embed_image(&self, grid: &PatchGrid, plan: Option<&MaskPlan>) -> Result<Tensor<T>> {
        let xv = self.embed.embed_image(grid)?;
        match plan {
            Some(p) => apply_image_mask(&xv, p, &self.embed),
            None => Ok(xv),
        }
    }

    /// H^v.
    pub fn encode_image(
        &self,
        grid: &PatchGrid,
        plan: Option<&MaskPlan>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let hv = self
            .vision_encoder
            .forward(&self.embed_image(grid, plan)?, ctx)?;
        ctx.log_encoding(
            &hv,
            EncodedInput::Image(plan.map(|p| p.positions.clone()).unwrap_or_default()),
        );
        Ok(hv)
    }

    /// H^l.
    pub fn encode_text(&self, text: &TokenSequence, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let hl = self
            .text_encoder
            .forward(&self.embed.embed_text(text)?, ctx)?;
        ctx.log_encoding(&hl, EncodedInput::Text(text.ids.clone()));
        Ok(hl)
    }

    pub fn fuse(
        &self,
        hv: &Tensor<T>,
        hl: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<FusionTrace<T>> {
        self.fusion.fuse(hv, hl, ctx)
    }

    /// Pixel predictions at the image plan's rows from Z^{vk}, `k` being the
    /// configured representation layer. Only the first `k` fusion layers run.
    pub fn forward_mim(
        &self,
        hv_masked: &Tensor<T>,
        hl: &Tensor<T>,
        plan: &MaskPlan,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        ctx.log_pass(Pass::Mim, hv_masked, hl);
        let k = self.config.mim_layer;
        let trace = self.fusion.fuse_until(hv_masked, hl, k, ctx)?;
        self.decoders
            .vision
            .forward(&select_representation(&trace, k)?, plan, ctx)
    }

    /// Vocabulary logits at the text plan's rows from the final Z^l.
    pub fn forward_mlm(
        &self,
        hv: &Tensor<T>,
        hl_masked: &Tensor<T>,
        plan: &MaskPlan,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        ctx.log_pass(Pass::Mlm, hv, hl_masked);
        let trace = self.fuse(hv, hl_masked, ctx)?;
        self.decoders.language.forward(trace.textual(), plan)
    }

    /// `[z_I ; z_T]` from the final fusion outputs, `1 x 2D`.
    pub fn pooled(
        &self,
        hv: &Tensor<T>,
        hl: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let trace = self.fuse(hv, hl, ctx)?;
        pool_pair(trace.visual(), trace.textual())
    }

    /// Matching logit, `1 x 1`.
    pub fn itm_logit(
        &self,
        hv: &Tensor<T>,
        hl: &Tensor<T>,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        ctx.log_pass(Pass::Itm, hv, hl);
        self.decoders.itm.forward(&self.pooled(hv, hl, ctx)?)
    }

    /// Encodes a pair from scratch and returns its pooled row.
    pub fn pair_features(&self, sample: &Sample, ctx: &mut ForwardCtx) -> Result<Tensor<T>> {
        let hv = self.encode_image(&sample.grid, None, ctx)?;
        let hl = self.encode_text(&sample.text, ctx)?;
        self.pooled(&hv, &hl, ctx)
    }
}
