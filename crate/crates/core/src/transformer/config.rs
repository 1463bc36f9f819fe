use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

/// Architectural hyperparameters of the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width D shared by encoders and fusion.
    pub hidden: usize,
    pub heads: usize,
    pub vision_depth: usize,
    pub text_depth: usize,
    pub fusion_depth: usize,
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    /// Maximum content tokens M_max (position table holds M_max + 2 rows).
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub image_mask_ratio: f64,
    pub text_mask_ratio: f64,
    /// Fusion trace index whose visual stream feeds the vision decoder.
    pub mim_layer: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub ff_mult: usize,
    pub init_std: f64,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Full-width layout: 768-wide, 12 heads, six fusion layers, 288x288 RGB,
    /// representation layer 3.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            hidden: 768,
            heads: 12,
            vision_depth: 12,
            text_depth: 12,
            fusion_depth: 6,
            patch: 16,
            image_height: 288,
            image_width: 288,
            channels: 3,
            max_text_len: 64,
            vocab_size,
            image_mask_ratio: 0.75,
            text_mask_ratio: 0.15,
            mim_layer: 3,
            decoder_depth: 2,
            decoder_width: 384,
            decoder_heads: 12,
            ff_mult: 4,
            init_std: 0.02,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk scale: 64-wide, 4 heads, two layers everywhere, 16x16 grayscale
    /// with 4x4 patches.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            hidden: 64,
            heads: 4,
            vision_depth: 2,
            text_depth: 2,
            fusion_depth: 2,
            patch: 4,
            image_height: 16,
            image_width: 16,
            channels: 1,
            max_text_len: 16,
            vocab_size,
            mim_layer: 1,
            decoder_depth: 2,
            decoder_width: 32,
            decoder_heads: 4,
            ..Self::base(vocab_size)
        }
    }

    /// Smallest useful layout, for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            hidden: 16,
            heads: 2,
            vision_depth: 1,
            text_depth: 1,
            fusion_depth: 1,
            patch: 4,
            image_height: 8,
            image_width: 8,
            channels: 1,
            max_text_len: 4,
            vocab_size,
            mim_layer: 1,
            decoder_depth: 1,
            decoder_width: 8,
            decoder_heads: 2,
            ..Self::base(vocab_size)
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn ff_width(&self) -> usize {
        self.hidden * self.ff_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            bail!(
                Config,
                "hidden width {} not divisible by {} heads",
                self.hidden,
                self.heads
            );
        }
        if self.decoder_width == 0
            || self.decoder_heads == 0
            || self.decoder_width % self.decoder_heads != 0
        {
            bail!(
                Config,
                "decoder width {} not divisible by {} heads",
                self.decoder_width,
                self.decoder_heads
            );
        }
        if self.patch == 0
            || self.image_height % self.patch != 0
            || self.image_width % self.patch != 0
        {
            bail!(
                Config,
                "image {}x{} not divisible by patch {}",
                self.image_height,
                self.image_width,
                self.patch
            );
        }
        if self.mim_layer > self.fusion_depth {
            bail!(
                Config,
                "mim_layer {} exceeds fusion depth {}",
                self.mim_layer,
                self.fusion_depth
            );
        }
        for (name, r) in [
            ("image_mask_ratio", self.image_mask_ratio),
            ("text_mask_ratio", self.text_mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                bail!(Config, "{name} {r} not in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout {} not in [0, 1)", self.dropout);
        }
        if self.vocab_size <= crate::data::RESERVED.len() {
            bail!(
                Config,
                "vocab_size {} leaves no regular tokens",
                self.vocab_size
            );
        }
        if self.channels == 0 || self.ff_mult == 0 {
            bail!(Config, "channels and ff_mult must be positive");
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form; identifies the parameter layout.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::base(30_000).validate().unwrap();
        ModelConfig::desk(19).validate().unwrap();
        ModelConfig::tiny(16).validate().unwrap();
        assert_eq!(ModelConfig::base(100).num_patches(), 324);
        assert_eq!(ModelConfig::desk(100).num_patches(), 16);
    }

    #[test]
    fn invalid_layouts() {
        let mut c = ModelConfig::desk(20);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(20);
        c.mim_layer = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(20);
        c.text_mask_ratio = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_fields() {
        let a = ModelConfig::desk(20);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.mim_layer = 0;
        assert_ne!(a.hash(), b.hash());
    }
}
