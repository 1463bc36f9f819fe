use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// 8-bit raster, row-major `height x width x channels`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Normalized raster with values in [0, 1], row-major `H x W x C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            bail!(
                Argument,
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn normalized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values: self.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        }
    }

    /// Binary PGM (`P5`, one channel) or PPM (`P6`, three channels).
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => bail!(Argument, "PNM output supports 1 or 3 channels, not {c}"),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        Ok(out)
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // skip whitespace and comments
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                bail!(Integrity, "truncated PNM header");
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1; // single whitespace byte before the raster
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            m => bail!(Argument, "unsupported PNM variant {m}"),
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Integrity(format!("bad PNM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            bail!(
                Argument,
                "only 8-bit PNM files are supported (maxval {maxval})"
            );
        }
        let n = width * height * channels;
        if bytes.len() < pos + n {
            bail!(
                Integrity,
                "PNM raster has {} bytes, expected {n}",
                bytes.len().saturating_sub(pos)
            );
        }
        Self::new(height, width, channels, bytes[pos..pos + n].to_vec())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_pnm(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()?)?;
        Ok(())
    }
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width * channels {
            bail!(
                Argument,
                "{} values for a {height}x{width}x{channels} image",
                values.len()
            );
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }
}

/// Center square crop on the shorter side, then nearest-neighbour resize to
/// `side x side`; values normalized to [0, 1].
pub fn center_crop_resize(image: &RawImage, side: usize) -> Result<Image> {
    if side == 0 {
        bail!(Argument, "target side must be positive");
    }
    if image.height == 0 || image.width == 0 || image.channels == 0 {
        bail!(Argument, "cannot resize an empty image");
    }
    let crop = image.height.min(image.width);
    let top = (image.height - crop) / 2;
    let left = (image.width - crop) / 2;
    let c = image.channels;
    let mut values = Vec::with_capacity(side * side * c);
    for y in 0..side {
        let sy = top + y * crop / side;
        for x in 0..side {
            let sx = left + x * crop / side;
            let base = (sy * image.width + sx) * c;
            values.extend(
                image.pixels[base..base + c]
                    .iter()
                    .map(|&p| p as f32 / 255.0),
            );
        }
    }
    Image::new(side, side, c, values)
}

/// Non-overlapping `P x P` patches, each flattened row-major as `(py, px, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `N x (P*P*C)` values, patch-major.
    pub values: Vec<f32>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn patch_values(&self, n: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.values[n * d..(n + 1) * d]
    }
}

pub fn patchify(image: &Image, patch: usize) -> Result<PatchGrid> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        bail!(
            Argument,
            "image {}x{} is not divisible into {patch}x{patch} patches",
            image.height,
            image.width
        );
    }
    let (rows, cols, c) = (image.height / patch, image.width / patch, image.channels);
    let mut values = Vec::with_capacity(image.values.len());
    for r in 0..rows {
        for q in 0..cols {
            for py in 0..patch {
                let y = r * patch + py;
                let start = (y * image.width + q * patch) * c;
                values.extend_from_slice(&image.values[start..start + patch * c]);
            }
        }
    }
    Ok(PatchGrid {
        patch,
        rows,
        cols,
        height: image.height,
        width: image.width,
        channels: c,
        values,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let (p, c) = (grid.patch, grid.channels);
    let mut values = vec![0.0; grid.values.len()];
    let mut src = 0;
    for r in 0..grid.rows {
        for q in 0..grid.cols {
            for py in 0..p {
                let y = r * p + py;
                let start = (y * grid.width + q * p) * c;
                values[start..start + p * c].copy_from_slice(&grid.values[src..src + p * c]);
                src += p * c;
            }
        }
    }
    Image {
        height: grid.height,
        width: grid.width,
        channels: c,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> RawImage {
        let pixels = (0..h * w * c).map(|i| (i * 7 % 256) as u8).collect();
        RawImage::new(h, w, c, pixels).unwrap()
    }

    /// Nearest-neighbour oracle written as an explicit source-index map.
    fn oracle(img: &RawImage, side: usize) -> Vec<f32> {
        let s = img.height.min(img.width);
        let (oy, ox) = ((img.height - s) / 2, (img.width - s) / 2);
        let mut out = vec![];
        for y in 0..side {
            for x in 0..side {
                for ch in 0..img.channels {
                    let sy = oy + (y as f64 * s as f64 / side as f64).floor() as usize;
                    let sx = ox + (x as f64 * s as f64 / side as f64).floor() as usize;
                    out.push(img.pixels[(sy * img.width + sx) * img.channels + ch] as f32 / 255.0);
                }
            }
        }
        out
    }

    #[test]
    fn crop_resize_identity_downsample_and_rectangular() {
        let a = ramp(288, 288, 1);
        assert_eq!(center_crop_resize(&a, 288).unwrap(), a.normalized());
        let b = ramp(576, 576, 3);
        let out = center_crop_resize(&b, 288).unwrap();
        assert_eq!(out.values, oracle(&b, 288));
        assert_eq!(
            out.at(5, 7, 2),
            b.pixels[(10 * 576 + 14) * 3 + 2] as f32 / 255.0
        );
        let c = ramp(300, 200, 1);
        let out = center_crop_resize(&c, 288).unwrap();
        assert_eq!((out.height, out.width), (288, 288));
        assert_eq!(out.values, oracle(&c, 288));
    }

    #[test]
    fn crop_resize_errors() {
        let empty = RawImage::new(0, 0, 1, vec![]).unwrap();
        assert!(center_crop_resize(&empty, 8).is_err());
        assert!(center_crop_resize(&ramp(4, 4, 1), 0).is_err());
    }

    #[test]
    fn patch_counts() {
        let img = ramp(288, 288, 3).normalized();
        let g = patchify(&img, 16).unwrap();
        assert_eq!((g.len(), g.patch_dim()), (324, 768));
        let g = patchify(&ramp(32, 32, 1).normalized(), 16).unwrap();
        assert_eq!((g.len(), g.patch_dim()), (4, 256));
        assert!(patchify(&ramp(30, 30, 1).normalized(), 16).is_err());
    }

    #[test]
    fn patch_layout_is_row_major_within_patch() {
        let img = ramp(4, 4, 1).normalized();
        let g = patchify(&img, 2).unwrap();
        // second patch (top-right) holds pixels (0,2),(0,3),(1,2),(1,3)
        let expect: Vec<f32> = [(0, 2), (0, 3), (1, 2), (1, 3)]
            .iter()
            .map(|&(y, x)| img.at(y, x, 0))
            .collect();
        assert_eq!(g.patch_values(1), expect.as_slice());
    }

    #[test]
    fn pnm_round_trip_and_truncation() {
        let img = ramp(5, 3, 3);
        let bytes = img.to_pnm().unwrap();
        assert_eq!(RawImage::from_pnm(&bytes).unwrap(), img);
        assert!(RawImage::from_pnm(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(rows in 1usize..5, cols in 1usize..5, p in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            let (h, w) = (rows * p, cols * p);
            let values = (0..h * w * c).map(|i| ((i as u64 ^ seed) % 255) as f32 / 255.0).collect();
            let img = Image::new(h, w, c, values).unwrap();
            let g = patchify(&img, p).unwrap();
            prop_assert_eq!(g.len(), rows * cols);
            prop_assert_eq!(unpatchify(&g), img);
        }
    }
}
