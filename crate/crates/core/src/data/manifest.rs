//! Tab-separated dataset manifests: `image<TAB>mask<TAB>split` per line.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_sample, Sample};
use crate::error::{Result, SegError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SegError::InvalidArgument(format!(
                "unknown split `{other}` (valid: train, val, test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Rejects duplicate image paths.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Manifest> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.image) {
                return Err(SegError::InvalidArgument(format!(
                    "duplicate image {} in manifest",
                    e.image.display()
                )));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Parses manifest text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [image, mask, split] = fields[..] else {
                return Err(SegError::format(format!(
                    "line {}: expected 3 tab-separated fields, got {}",
                    no + 1,
                    fields.len()
                )));
            };
            let split = split
                .trim()
                .parse()
                .map_err(|e: SegError| SegError::format(format!("line {}: {e}", no + 1)))?;
            entries.push(ManifestEntry {
                image: base.join(image),
                mask: base.join(mask),
                split,
            });
        }
        Manifest::new(entries)
    }

    /// Reads a manifest and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| SegError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let m = Manifest::parse(&text, base).map_err(|e| e.at_path(path))?;
        for e in &m.entries {
            for p in [&e.image, &e.mask] {
                if !p.is_file() {
                    return Err(SegError::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest but missing"),
                    ));
                }
            }
        }
        Ok(m)
    }

    /// Paths under the manifest's directory are written relative to it.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut s = String::from("# image\tmask\tsplit\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.mask), e.split));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        std::fs::write(path, self.to_text(base)).map_err(|e| SegError::io(path, e))
    }

    pub fn load_samples(&self, split: Option<Split>) -> Result<Vec<Sample>> {
        self.entries
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| load_sample(&e.image, &e.mask))
            .collect()
    }
}
