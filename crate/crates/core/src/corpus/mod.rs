//! Synthetic shape-caption corpus: every caption is a bijective function of
//! the discrete attributes drawn in its image.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, ManifestEntry, RawImage};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Intensity {
    Bright,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

    fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Cross => "cross",
        }
    }
}

impl Intensity {
    pub const ALL: [Intensity; 2] = [Intensity::Bright, Intensity::Dark];

    fn word(self) -> &'static str {
        match self {
            Intensity::Bright => "bright",
            Intensity::Dark => "dark",
        }
    }

    fn level(self) -> u8 {
        match self {
            Intensity::Bright => 255,
            Intensity::Dark => 128,
        }
    }
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::UpperLeft,
        Quadrant::UpperRight,
        Quadrant::LowerLeft,
        Quadrant::LowerRight,
    ];

    fn words(self) -> &'static str {
        match self {
            Quadrant::UpperLeft => "upper left",
            Quadrant::UpperRight => "upper right",
            Quadrant::LowerLeft => "lower left",
            Quadrant::LowerRight => "lower right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    fn origin(self, q: usize) -> (usize, usize) {
        match self {
            Quadrant::UpperLeft => (0, 0),
            Quadrant::UpperRight => (0, q),
            Quadrant::LowerLeft => (q, 0),
            Quadrant::LowerRight => (q, q),
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

/// One scene of the attribute grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub intensity: Intensity,
    pub quadrant: Quadrant,
    pub size: Size,
}

impl SceneSpec {
    /// All 3 * 2 * 4 * 2 = 48 scenes in a fixed order.
    pub fn all() -> Vec<SceneSpec> {
        let mut out = Vec::with_capacity(48);
        for shape in Shape::ALL {
            for intensity in Intensity::ALL {
                for quadrant in Quadrant::ALL {
                    for size in Size::ALL {
                        out.push(SceneSpec {
                            shape,
                            intensity,
                            quadrant,
                            size,
                        });
                    }
                }
            }
        }
        out
    }

    /// e.g. "a bright small square in the upper left".
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} in the {}",
            self.intensity.word(),
            self.size.word(),
            self.shape.word(),
            self.quadrant.words()
        )
    }

    /// Inverse of `caption`.
    pub fn from_caption(caption: &str) -> Option<SceneSpec> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        SceneSpec::all()
            .into_iter()
            .find(|s| s.caption().split_whitespace().eq(words.iter().copied()))
    }

    /// Caption without the position words; input text of the locate task.
    pub fn description(&self) -> String {
        format!(
            "a {} {} {}",
            self.intensity.word(),
            self.size.word(),
            self.shape.word()
        )
    }

    /// Grayscale `side x side` raster: the shape is centered in its quadrant
    /// on a black background.
    pub fn render(&self, side: usize) -> Result<RawImage> {
        if side < 8 || side % 2 != 0 {
            bail!(Argument, "image side {side} must be even and at least 8");
        }
        let q = side / 2;
        let (oy, ox) = self.quadrant.origin(q);
        let (cy, cx) = ((oy + (q - 1) / 2) as i64, (ox + (q - 1) / 2) as i64);
        let r = match self.size {
            Size::Small => q / 4,
            Size::Large => 3 * q / 8,
        } as i64;
        let arm = (q / 16) as i64;
        let level = self.intensity.level();
        let mut pixels = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                let (dy, dx) = (y as i64 - cy, x as i64 - cx);
                let inside = match self.shape {
                    Shape::Square => dy.abs() <= r && dx.abs() <= r,
                    Shape::Circle => dy * dy + dx * dx <= r * r,
                    Shape::Cross => {
                        (dy.abs() <= arm && dx.abs() <= r) || (dx.abs() <= arm && dy.abs() <= r)
                    }
                };
                if inside {
                    pixels[y * side + x] = level;
                }
            }
        }
        RawImage::new(side, side, 1, pixels)
    }
}

/// `n` scenes drawn uniformly (with replacement) from the grid.
pub fn sample_scenes(n: usize, seed: u64) -> Vec<SceneSpec> {
    let all = SceneSpec::all();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| all[rng.random_range(0..all.len())])
        .collect()
}

/// `n <= 48` pairwise distinct scenes in a seeded random order.
pub fn distinct_scenes(n: usize, seed: u64) -> Result<Vec<SceneSpec>> {
    let mut all = SceneSpec::all();
    if n > all.len() {
        bail!(
            Argument,
            "only {} distinct scenes exist, asked for {n}",
            all.len()
        );
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all.truncate(n);
    Ok(all)
}

/// Writes `n` sampled scenes as PGM files plus `manifest.tsv` into `dir`.
pub fn gen_corpus(
    n: usize,
    seed: u64,
    image_side: usize,
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        bail!(Argument, "corpus size must be positive");
    }
    write_scenes(&sample_scenes(n, seed), image_side, dir)
}

pub fn write_scenes(
    scenes: &[SceneSpec],
    image_side: usize,
    dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let path = dir.join(format!("img_{i:05}.pgm"));
        s.render(image_side)?.save(&path)?;
        entries.push(ManifestEntry {
            image: path,
            caption: s.caption(),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &entries)?;
    Ok(entries)
}
