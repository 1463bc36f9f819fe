use super::masking::MaskPlan;
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::Scope;
use crate::transformer::{Encoder, ForwardCtx, Linear, ModelConfig};

/// Lightweight Transformer mapping selected visual features back to pixels.
#[derive(Clone)]
pub struct VisionDecoder<T: Scalar> {
    pub input: Linear<T>,
    /// `(N + 1) x decoder_width`.
    pub pos: Tensor<T>,
    pub blocks: Encoder<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> VisionDecoder<T> {
    pub fn new(scope: &mut Scope<'_, T>, config: &ModelConfig) -> Self {
        let w = config.decoder_width;
        let input = Linear::new(scope, "input", config.hidden, w);
        let pos = scope.normal("pos", &[config.num_patches() + 1, w]);
        let blocks = Encoder::new(
            &mut scope.sub("blocks"),
            config.decoder_depth,
            w,
            config.decoder_heads,
            w * config.ff_mult,
            config.layer_norm_eps,
        );
        let output = Linear::new(scope, "output", w, config.patch_dim());
        Self {
            input,
            pos,
            blocks,
            output,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    /// Pixel predictions for the plan's masked rows, `|plan| x P*P*C`.
    pub fn forward(
        &self,
        zvk: &Tensor<T>,
        plan: &MaskPlan,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor<T>> {
        let (rows, width) = zvk.dims2()?;
        if width != self.input.input_dim() || rows != self.pos.shape()[0] {
            bail!(
                Argument,
                "vision decoder input {:?}, expected [{}, {}]",
                zvk.shape(),
                self.pos.shape()[0],
                self.input.input_dim()
            );
        }
        let h = self.input.forward(zvk)?.add(&self.pos)?;
        let h = self.blocks.forward(&h, ctx)?;
        self.output.forward(&h.gather_rows(&plan.positions)?)
    }
}

/// Two-layer feedforward map `D -> D -> V` applied at masked token rows.
#[derive(Clone)]
pub struct LanguageDecoder<T: Scalar> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> LanguageDecoder<T> {
    pub fn new(scope: &mut Scope<'_, T>, config: &ModelConfig) -> Self {
        Self {
            hidden: Linear::new(scope, "hidden", config.hidden, config.hidden),
            output: Linear::new(scope, "output", config.hidden, config.vocab_size),
        }
    }

    /// Vocabulary logits, `|plan| x V`.
    pub fn forward(&self, zl: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let (rows, width) = zl.dims2()?;
        if width != self.hidden.input_dim() {
            bail!(
                Argument,
                "language decoder input width {width}, expected {}",
                self.hidden.input_dim()
            );
        }
        if let Some(&p) = plan.positions.iter().find(|&&p| p == 0 || p + 1 >= rows) {
            bail!(
                Argument,
                "masked token row {p} outside 1..={}",
                rows.saturating_sub(2)
            );
        }
        let picked = zl.gather_rows(&plan.positions)?;
        self.output.forward(&self.hidden.forward(&picked)?.gelu())
    }
}

/// Two-layer head over the concatenated aggregation rows `[z_I ; z_T]`.
#[derive(Clone)]
pub struct PairHead<T: Scalar> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> PairHead<T> {
    pub fn new(scope: &mut Scope<'_, T>, width: usize, outputs: usize) -> Self {
        Self {
            hidden: Linear::new(scope, "hidden", 2 * width, width),
            output: Linear::new(scope, "output", width, outputs),
        }
    }

    pub fn outputs(&self) -> usize {
        self.output.output_dim()
    }

    /// `pooled` is `B x 2D`; returns `B x outputs`.
    pub fn forward(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        self.output.forward(&self.hidden.forward(pooled)?.gelu())
    }
}

/// `[Z^v row 0 ; Z^l row 0]` as a `1 x 2D` row.
pub fn pool_pair<T: Scalar>(zv: &Tensor<T>, zl: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat(&[&zv.narrow(0, 0, 1)?, &zl.narrow(0, 0, 1)?], 1)
}

/// All pre-training decoders and the matching head.
#[derive(Clone)]
pub struct DecoderParams<T: Scalar> {
    pub vision: VisionDecoder<T>,
    pub language: LanguageDecoder<T>,
    pub itm: PairHead<T>,
}

impl<T: Scalar> DecoderParams<T> {
    /// Registers `decoder.vision.*`, `decoder.text.*` and `head.itm.*`
    /// relative to `scope`.
    pub fn new(scope: &mut Scope<'_, T>, config: &ModelConfig) -> Self {
        let mut dec = scope.sub("decoder");
        let vision = VisionDecoder::new(&mut dec.sub("vision"), config);
        let language = LanguageDecoder::new(&mut dec.sub("text"), config);
        let itm = PairHead::new(&mut scope.sub("head").sub("itm"), config.hidden, 1);
        Self {
            vision,
            language,
            itm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{sample_mask_plan, Modality};
    use crate::params::ParamBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            &[rows, cols],
        )
        .unwrap()
    }

    #[test]
    fn output_shapes() {
        let config = ModelConfig::tiny(10);
        let mut b = ParamBuilder::<f64>::new(1, 0.02);
        let d = DecoderParams::new(&mut b.root(""), &config);
        let n = config.num_patches();
        assert_eq!(d.vision.output_dim(), config.patch_dim());
        let plan = sample_mask_plan(n, 0.75, Modality::Image, 2);
        let pred = d
            .vision
            .forward(&random(n + 1, 16, 3), &plan, &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(pred.shape(), &[plan.len(), config.patch_dim()]);

        let zl = random(6, 16, 4);
        let empty = MaskPlan::empty(Modality::Text);
        assert_eq!(d.language.forward(&zl, &empty).unwrap().shape(), &[0, 10]);
        let one = MaskPlan {
            positions: vec![2],
            corruption: vec![crate::objectives::Corruption::Mask],
            ..empty
        };
        let logits = d.language.forward(&zl, &one).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(logits.to_vec().iter().all(|v| v.is_finite()));
        assert!(d
            .vision
            .forward(&random(n, 16, 3), &plan, &mut ForwardCtx::eval())
            .is_err());
        assert!(d.language.forward(&random(6, 8, 3), &one).is_err());
    }

    #[test]
    fn depth_zero_decoder_is_affine() {
        let mut config = ModelConfig::tiny(10);
        config.decoder_depth = 0;
        config.decoder_width = 16;
        let mut b = ParamBuilder::<f64>::new(1, 0.02);
        let d = DecoderParams::new(&mut b.root(""), &config);
        let n = config.num_patches();
        let plan = MaskPlan {
            modality: Modality::Image,
            positions: (1..=n).collect(),
            corruption: vec![],
            seed: 0,
        };
        // f(a) + f(b) - f(0) == f(a + b) for an affine map
        let run = |z: &Tensor<f64>| {
            d.vision
                .forward(z, &plan, &mut ForwardCtx::eval())
                .unwrap()
                .to_vec()
        };
        let a = random(n + 1, 16, 5);
        let c = random(n + 1, 16, 6);
        let zero = Tensor::<f64>::zeros(&[n + 1, 16]);
        let lhs: Vec<f64> = run(&a)
            .iter()
            .zip(run(&c))
            .zip(run(&zero))
            .map(|((x, y), z)| x + y - z)
            .collect();
        let rhs = run(&a.add(&c).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-12);
        }
    }
}
