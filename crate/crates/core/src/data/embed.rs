use super::{PatchGrid, TokenSequence};
use crate::error::{bail, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::Scope;
use crate::transformer::ModelConfig;

/// Input embedding tables of both modalities.
///
/// `start` and `sep` are dedicated vectors rather than rows of `token`.
#[derive(Clone)]
pub struct EmbeddingTables<T: Scalar> {
    /// `P*P*C x D`, no bias.
    pub patch_proj: Tensor<T>,
    /// `(N + 1) x D`.
    pub vision_pos: Tensor<T>,
    /// Aggregation token prepended to the patch rows.
    pub image_token: Tensor<T>,
    /// Shared replacement embedding for masked patches.
    pub image_mask: Tensor<T>,
    /// `V x D`.
    pub token: Tensor<T>,
    /// `(M_max + 2) x D`.
    pub text_pos: Tensor<T>,
    pub start: Tensor<T>,
    pub sep: Tensor<T>,
}

impl<T: Scalar> EmbeddingTables<T> {
    /// Registers tables under `<scope>.vision.*` and `<scope>.text.*`.
    pub fn new(scope: &mut Scope<'_, T>, config: &ModelConfig) -> Self {
        let d = config.hidden;
        let mut v = scope.sub("vision");
        let patch_proj = v.normal("patch_proj", &[config.patch_dim(), d]);
        let vision_pos = v.normal("pos", &[config.num_patches() + 1, d]);
        let image_token = v.normal("image_token", &[d]);
        let image_mask = v.normal("mask_token", &[d]);
        let mut t = scope.sub("text");
        let token = t.normal("token", &[config.vocab_size, d]);
        let text_pos = t.normal("pos", &[config.max_text_len + 2, d]);
        let start = t.normal("start", &[d]);
        let sep = t.normal("sep", &[d]);
        Self {
            patch_proj,
            vision_pos,
            image_token,
            image_mask,
            token,
            text_pos,
            start,
            sep,
        }
    }

    pub fn hidden(&self) -> usize {
        self.start.numel()
    }

    /// Content tokens the text position table can hold.
    pub fn text_capacity(&self) -> usize {
        self.text_pos.shape()[0] - 2
    }

    /// `[w_T; E^l rows of ids; w_SEP] + positions`, shape `(M + 2) x D`.
    ///
    /// Sequences longer than the position table are truncated; the boundary
    /// vector is always the last row.
    pub fn embed_text(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        let d = self.hidden();
        let m = seq.len().min(self.text_capacity());
        let ids: Vec<usize> = seq.ids[..m].iter().map(|&i| i as usize).collect();
        let words = self.token.gather_rows(&ids)?;
        let start = self.start.reshape(&[1, d])?;
        let sep = self.sep.reshape(&[1, d])?;
        let rows = Tensor::concat(&[&start, &words, &sep], 0)?;
        rows.add(&self.text_pos.narrow(0, 0, m + 2)?)
    }

    /// `[p_I; p_n E^v ...] + positions`, shape `(N + 1) x D`.
    pub fn embed_image(&self, grid: &PatchGrid) -> Result<Tensor<T>> {
        let d = self.hidden();
        let n = grid.len();
        let capacity = self.vision_pos.shape()[0];
        if n + 1 > capacity {
            bail!(
                Argument,
                "{n} patches exceed the position table capacity {}",
                capacity - 1
            );
        }
        if grid.patch_dim() != self.patch_proj.shape()[0] {
            bail!(
                Argument,
                "patch dimension {} does not match the projection input {}",
                grid.patch_dim(),
                self.patch_proj.shape()[0]
            );
        }
        let pixels = Tensor::new(
            grid.values.iter().map(|&v| T::lit(v as f64)).collect(),
            &[n, grid.patch_dim()],
        )?;
        let patches = pixels.matmul(&self.patch_proj)?;
        let agg = self.image_token.reshape(&[1, d])?;
        let rows = Tensor::concat(&[&agg, &patches], 0)?;
        rows.add(&self.vision_pos.narrow(0, 0, n + 1)?)
    }

    /// Rows `positions` of the vision position table, `len x D`.
    pub fn vision_positions(&self, positions: &[usize]) -> Result<Tensor<T>> {
        self.vision_pos.gather_rows(positions)
    }
}
