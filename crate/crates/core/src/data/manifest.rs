use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{bail, Error, Result};

/// One corpus record: image file and caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub caption: String,
}

/// Parses `path<TAB>caption` lines. Blank lines are skipped; relative image
/// paths are resolved against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((path, caption)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected <image path>\\t<caption>".into(),
            });
        };
        if path.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: "empty image path".into(),
            });
        }
        let p = Path::new(path);
        let image = if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        };
        out.push(ManifestEntry {
            image,
            caption: caption.to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base)
}

/// Writes records with paths relative to the manifest's directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut f = fs::File::create(path)?;
    for e in entries {
        if e.caption.contains('\t') || e.caption.contains('\n') {
            bail!(
                Argument,
                "caption {:?} contains a tab or newline",
                e.caption
            );
        }
        let rel = e.image.strip_prefix(base).unwrap_or(&e.image);
        writeln!(f, "{}\t{}", rel.display(), e.caption)?;
    }
    Ok(())
}
