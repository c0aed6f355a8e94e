use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{list_images, write_atomic};
use crate::error::{invalid, Error, Result};

/// Reference split sizes of the full face dataset.
const REFERENCE_SPLIT: [usize; 3] = [162_770, 19_867, 19_962];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(invalid!("unknown split {s:?}")),
        }
    }
}

/// `(train, val, test)` for `n` images in the reference proportions:
/// train rounds down, val rounds to nearest, test takes the remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let total: usize = REFERENCE_SPLIT.iter().sum();
    let train = n * REFERENCE_SPLIT[0] / total;
    let val = ((n * REFERENCE_SPLIT[1]) as f64 / total as f64).round() as usize;
    let val = val.min(n - train);
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    /// Faces are assumed aligned by an external tool.
    pub aligned: bool,
}

impl DatasetManifest {
    /// Assign sorted file names to train, val and test in that order.
    pub fn from_names(root: impl Into<PathBuf>, mut names: Vec<String>) -> Self {
        names.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
        let (train, val, _) = split_counts(names.len());
        let entries = names
            .into_iter()
            .enumerate()
            .map(|(i, path)| ManifestEntry {
                path,
                split: if i < train {
                    Split::Train
                } else if i < train + val {
                    Split::Val
                } else {
                    Split::Test
                },
            })
            .collect();
        Self {
            root: root.into(),
            entries,
            aligned: true,
        }
    }

    /// Every entry in one split, as `(name, full path)`.
    pub fn files(&self, split: Split) -> Vec<(String, PathBuf)> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (e.path.clone(), self.root.join(&e.path)))
            .collect()
    }

    /// All entries regardless of split.
    pub fn all_files(&self) -> Vec<(String, PathBuf)> {
        self.entries.iter().map(|e| (e.path.clone(), self.root.join(&e.path))).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# aligned={}\n", self.aligned);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\n", e.path, e.split));
        }
        s
    }

    pub fn parse(root: impl Into<PathBuf>, text: &str) -> Result<Self> {
        let mut aligned = true;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("aligned=") {
                    aligned = v == "true";
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (path, split) = line
                .split_once('\t')
                .ok_or_else(|| invalid!("manifest line {}: expected path<TAB>split", i + 1))?;
            entries.push(ManifestEntry {
                path: path.to_string(),
                split: split.trim().parse()?,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
            aligned,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Load a manifest whose entries are relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path.parent().unwrap_or(Path::new(".")), &text)
    }
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    /// Files that failed to decode, with the decoder message.
    pub skipped: Vec<(PathBuf, String)>,
    /// Decodable files that are not `target × target` and get resized on load.
    pub resized: usize,
}

/// Validate every image in `dir` and build a manifest over the decodable ones.
pub fn ingest_folder(dir: &Path, target: usize) -> Result<IngestReport> {
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    let mut resized = 0;
    for path in list_images(dir)? {
        match image::open(&path) {
            Ok(img) => {
                if img.width() as usize != target || img.height() as usize != target {
                    resized += 1;
                }
                names.push(path.file_name().unwrap().to_string_lossy().into_owned());
            }
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    Ok(IngestReport {
        manifest: DatasetManifest::from_names(dir, names),
        skipped,
        resized,
    })
}
