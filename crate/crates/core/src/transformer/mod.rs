//! Attention, pre-norm Transformer stacks and the co-attention fusion module.

mod config;
mod fusion;
mod layers;

pub use config::ModelConfig;
pub use fusion::{CoAttentionLayer, CoAttentionStream, FusionModule, FusionTrace};
pub use layers::{
    attention, with_attention_audit, EncodedInput, Encoder, EncoderLayer, FeedForward, ForwardCtx,
    LayerNorm, Linear, MultiHeadAttention, Pass, PassInputs,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
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
    fn single_key_returns_its_value() {
        let q = random(1, 4, 1);
        let k = random(1, 4, 2);
        let v = random(1, 4, 3);
        let out = attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn orthogonal_query_averages_values() {
        let q = Tensor::<f64>::zeros(&[1, 4]);
        let k = random(3, 4, 2);
        let v = random(3, 4, 3);
        let out = attention(&q, &k, &v, 1).unwrap().to_vec();
        let vv = v.to_vec();
        for c in 0..4 {
            let mean = (vv[c] + vv[4 + c] + vv[8 + c]) / 3.0;
            assert!((out[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_matches_loop_oracle() {
        let q = Tensor::<f64>::new(vec![1.0, 0.5, -0.3, 2.0], &[2, 2]).unwrap();
        let k = Tensor::<f64>::new(vec![0.2, -1.0, 1.5, 0.7], &[2, 2]).unwrap();
        let v = Tensor::<f64>::new(vec![3.0, -2.0, 0.5, 4.0], &[2, 2]).unwrap();
        let out = attention(&q, &k, &v, 1).unwrap().to_vec();
        let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (qd[i * 2] * kd[j * 2] + qd[i * 2 + 1] * kd[j * 2 + 1]) * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..2 {
                let expect: f64 = (0..2).map(|j| logits[j].exp() / z * vd[j * 2 + c]).sum();
                assert!((out[i * 2 + c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_shape_errors() {
        let q = random(2, 4, 1);
        assert!(attention(&q, &random(3, 4, 2), &random(2, 4, 3), 2).is_err());
        assert!(attention(&q, &random(3, 6, 2), &random(3, 6, 3), 2).is_err());
        assert!(attention(&q, &random(3, 4, 2), &random(3, 4, 3), 3).is_err());
    }

    fn encoder(depth: usize) -> Encoder<f64> {
        let mut b = ParamBuilder::new(5, 0.2);
        let mut s = b.root("enc");
        Encoder::new(&mut s, depth, 32, 4, 128, 1e-5)
    }

    #[test]
    fn encoder_depth_zero_is_identity_and_shape_preserving() {
        let x = random(5, 32, 9);
        let mut ctx = ForwardCtx::eval();
        assert_eq!(
            encoder(0).forward(&x, &mut ctx).unwrap().to_vec(),
            x.to_vec()
        );
        assert_eq!(encoder(2).forward(&x, &mut ctx).unwrap().shape(), [5, 32]);
        assert!(encoder(2).forward(&random(5, 16, 1), &mut ctx).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let enc = encoder(2);
        let x = random(6, 32, 4);
        let perm = [0usize, 3, 1, 5, 2, 4];
        let xp = x.gather_rows(&perm).unwrap();
        let mut ctx = ForwardCtx::eval();
        let y = enc
            .forward(&x, &mut ctx)
            .unwrap()
            .gather_rows(&perm)
            .unwrap()
            .to_vec();
        let yp = enc.forward(&xp, &mut ctx).unwrap().to_vec();
        assert!(y.iter().zip(&yp).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn attention_audit_counts_rows() {
        let enc = encoder(1);
        let x = random(5, 32, 4);
        let (_, rows) = with_attention_audit(|| enc.forward(&x, &mut ForwardCtx::eval()).unwrap());
        assert_eq!(rows, 4 * 5);
    }

    #[test]
    fn fusion_trace_layout() {
        let mut b = ParamBuilder::<f64>::new(1, 0.2);
        let fusion = FusionModule::new(&mut b.root("fusion"), 2, 32, 4, 128, 1e-5);
        let (hv, hl) = (random(5, 32, 1), random(4, 32, 2));
        let mut ctx = ForwardCtx::eval();
        let trace = fusion.fuse(&hv, &hl, &mut ctx).unwrap();
        assert_eq!(trace.visual_layers.len(), 3);
        assert!(trace.visual_layers[0].ptr_eq(&hv));
        assert!(trace.visual_layers.iter().all(|t| t.shape() == [5, 32]));
        assert!(trace.textual_layers.iter().all(|t| t.shape() == [4, 32]));
        assert!(trace.select_visual(3).is_err());
        let empty = FusionModule::<f64>::new(&mut b.root("none"), 0, 32, 4, 128, 1e-5);
        let t0 = empty.fuse(&hv, &hl, &mut ctx).unwrap();
        assert_eq!(t0.visual_layers.len(), 1);
        assert_eq!(t0.visual().to_vec(), hv.to_vec());
        assert_eq!(t0.textual().to_vec(), hl.to_vec());
        assert!(fusion.fuse(&random(5, 16, 1), &hl, &mut ctx).is_err());
    }

    #[test]
    fn text_reaches_vision_only_after_layer_zero() {
        let mut b = ParamBuilder::<f64>::new(1, 0.2);
        let fusion = FusionModule::new(&mut b.root("fusion"), 2, 32, 4, 128, 1e-5);
        let hv = random(5, 32, 1);
        let mut ctx = ForwardCtx::eval();
        let a = fusion.fuse(&hv, &random(4, 32, 2), &mut ctx).unwrap();
        let c = fusion.fuse(&hv, &random(4, 32, 3), &mut ctx).unwrap();
        assert_eq!(a.visual_layers[0].to_vec(), c.visual_layers[0].to_vec());
        for j in 1..3 {
            assert_ne!(a.visual_layers[j].to_vec(), c.visual_layers[j].to_vec());
        }
    }

    #[test]
    fn full_width_fusion_preserves_shapes() {
        let mut b = ParamBuilder::<f32>::new(0, 0.02);
        let fusion = FusionModule::new(&mut b.root("fusion"), 6, 768, 12, 3072, 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rand_t = |r: usize| {
            Tensor::<f32>::new(
                (0..r * 768).map(|_| rng.random_range(-1.0..1.0)).collect(),
                &[r, 768],
            )
            .unwrap()
        };
        let (hv, hl) = (rand_t(325), rand_t(20));
        let trace = crate::no_grad(|| fusion.fuse(&hv, &hl, &mut ForwardCtx::eval()).unwrap());
        assert_eq!(trace.visual_layers.len(), 7);
        assert_eq!(trace.textual_layers.len(), 7);
        assert!(trace.visual_layers.iter().all(|t| t.shape() == [325, 768]));
        assert!(trace.textual_layers.iter().all(|t| t.shape() == [20, 768]));
    }
}
