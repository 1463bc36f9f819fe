//! Text and image frontends: vocabulary, tokenization, center-crop resizing,
//! patchification and the input embeddings of both modalities.

mod embed;
mod image;
mod manifest;
mod vocab;

pub use embed::EmbeddingTables;
pub use image::{center_crop_resize, patchify, unpatchify, Image, PatchGrid, RawImage};
pub use manifest::{parse_manifest, read_manifest, write_manifest, ManifestEntry};
pub use vocab::{TokenSequence, Vocabulary, RESERVED};
