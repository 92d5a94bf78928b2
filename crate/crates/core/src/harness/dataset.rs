//! CIFAR-10 ingestion from the PNG-sprite release or the official binary
//! release, with deterministic class-balanced subsets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub const CIFAR_CLASSES: usize = 10;
const SIDE: usize = 32;
const PIXELS: usize = SIDE * SIDE;
const PER_FILE: usize = 10_000;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1",
    "data_batch_2",
    "data_batch_3",
    "data_batch_4",
    "data_batch_5",
];
const TEST_FILES: [&str; 1] = ["test_batch"];

/// Environment variable overriding the dataset root when the config leaves it unset.
pub const DATA_ENV: &str = "MASKANYNET_DATA";
const DEFAULT_ROOT: &str = "data/cifar-10";
const FETCH_HINT: &str =
    "fetch it with `scripts/fetch_cifar10.sh <dir>` or unpack cifar-10-batches-bin there, \
     then point dataset.root (or MASKANYNET_DATA) at that directory";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetId {
    #[serde(rename = "cifar10")]
    Cifar10,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, test)"))),
        }
    }
}

/// Labelled `[0, 1]` RGB images.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    /// One image per row of a `1024×10000` RGB PNG, labels in JSON.
    Sprite,
    /// `<label byte><1024 R><1024 G><1024 B>` records.
    Binary,
}

/// A located CIFAR-10 copy with its labels read.
#[derive(Debug, Clone)]
pub struct CifarSource {
    root: PathBuf,
    format: Format,
    train_labels: Vec<u8>,
    test_labels: Vec<u8>,
}

fn missing(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
        hint: FETCH_HINT.into(),
    }
}

/// Dataset root: the explicit value, else `$MASKANYNET_DATA`, else `data/cifar-10`.
pub fn resolve_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT)),
    }
}

impl CifarSource {
    pub fn open(root: &Path) -> Result<Self> {
        if root.join("data_batch_1.png").is_file() {
            let read = |name: &str| -> Result<Vec<u8>> {
                let path = root.join(name);
                let text = std::fs::read_to_string(&path).map_err(|e| missing(&path, e.to_string()))?;
                let labels: Vec<u8> = serde_json::from_str(&text)
                    .map_err(|e| missing(&path, format!("bad label file: {e}")))?;
                Ok(labels)
            };
            // The npm package spells the label files this way.
            let train_labels = read("train_lables.json")?;
            let test_labels = read("test_lables.json")?;
            check_labels(root, &train_labels, TRAIN_FILES.len() * PER_FILE)?;
            check_labels(root, &test_labels, PER_FILE)?;
            return Ok(Self {
                root: root.to_path_buf(),
                format: Format::Sprite,
                train_labels,
                test_labels,
            });
        }
        for dir in [root.to_path_buf(), root.join("cifar-10-batches-bin")] {
            if dir.join("data_batch_1.bin").is_file() {
                let read = |names: &[&str]| -> Result<Vec<u8>> {
                    let mut labels = Vec::new();
                    for name in names {
                        let bytes = read_binary(&dir, name)?;
                        labels.extend(bytes.chunks(1 + 3 * PIXELS).map(|r| r[0]));
                    }
                    Ok(labels)
                };
                let train_labels = read(&TRAIN_FILES)?;
                let test_labels = read(&TEST_FILES)?;
                check_labels(&dir, &train_labels, TRAIN_FILES.len() * PER_FILE)?;
                check_labels(&dir, &test_labels, PER_FILE)?;
                return Ok(Self {
                    root: dir,
                    format: Format::Binary,
                    train_labels,
                    test_labels,
                });
            }
        }
        Err(missing(root, "no CIFAR-10 files found"))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn labels(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train_labels,
            Split::Test => &self.test_labels,
        }
    }

    /// Decodes the images at `indices` (into the split's file order).
    pub fn load(&self, split: Split, indices: &[usize]) -> Result<Dataset> {
        let files: &[&str] = match split {
            Split::Train => &TRAIN_FILES,
            Split::Test => &TEST_FILES,
        };
        let labels = self.labels(split);
        if let Some(&bad) = indices.iter().find(|&&i| i >= labels.len()) {
            return Err(Error::Range(format!(
                "image index {bad} outside a split of {}",
                labels.len()
            )));
        }
        let mut images: Vec<Option<Image>> = vec![None; indices.len()];
        for (f, name) in files.iter().enumerate() {
            let wanted: Vec<(usize, usize)> = indices
                .iter()
                .enumerate()
                .filter(|(_, &i)| i / PER_FILE == f)
                .map(|(slot, &i)| (slot, i % PER_FILE))
                .collect();
            if wanted.is_empty() {
                continue;
            }
            match self.format {
                Format::Sprite => {
                    let path = self.root.join(format!("{name}.png"));
                    let sprite = image::open(&path)
                        .map_err(|e| missing(&path, e.to_string()))?
                        .to_rgb8();
                    if sprite.dimensions() != (PIXELS as u32, PER_FILE as u32) {
                        return Err(missing(&path, format!("unexpected sprite size {:?}", sprite.dimensions())));
                    }
                    let raw = sprite.as_raw();
                    for (slot, row) in wanted {
                        let px = &raw[row * PIXELS * 3..][..PIXELS * 3];
                        images[slot] = Some(Image::from_fn(3, SIDE, SIDE, |c, y, x| {
                            px[(y * SIDE + x) * 3 + c] as f32 / 255.0
                        }));
                    }
                }
                Format::Binary => {
                    let bytes = read_binary(&self.root, name)?;
                    for (slot, row) in wanted {
                        let px = &bytes[row * (1 + 3 * PIXELS) + 1..][..3 * PIXELS];
                        images[slot] = Some(Image::from_fn(3, SIDE, SIDE, |c, y, x| {
                            px[c * PIXELS + y * SIDE + x] as f32 / 255.0
                        }));
                    }
                }
            }
        }
        Ok(Dataset {
            images: images.into_iter().map(|i| i.expect("every index decoded")).collect(),
            labels: indices.iter().map(|&i| labels[i] as usize).collect(),
        })
    }
}

fn read_binary(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(format!("{name}.bin"));
    let bytes = std::fs::read(&path).map_err(|e| missing(&path, e.to_string()))?;
    if bytes.len() != PER_FILE * (1 + 3 * PIXELS) {
        return Err(missing(&path, format!("unexpected file size {}", bytes.len())));
    }
    Ok(bytes)
}

fn check_labels(root: &Path, labels: &[u8], expected: usize) -> Result<()> {
    if labels.len() != expected || labels.iter().any(|&l| l as usize >= CIFAR_CLASSES) {
        return Err(missing(
            root,
            format!("expected {expected} labels in 0..{CIFAR_CLASSES}, found {}", labels.len()),
        ));
    }
    Ok(())
}

/// Picks `count` indices spread evenly over classes, skipping the first
/// `skip` images of every class. Within a class, file order is kept; the
/// result is sorted. Classes that run out contribute what they have.
pub fn balanced_indices(labels: &[u8], classes: usize, count: usize, skip: usize) -> Vec<usize> {
    let mut quota: Vec<usize> = (0..classes)
        .map(|c| count / classes + usize::from(c < count % classes))
        .collect();
    let mut seen = vec![0usize; classes];
    let mut out = Vec::with_capacity(count);
    for (i, &l) in labels.iter().enumerate() {
        let c = l as usize;
        if c >= classes {
            continue;
        }
        seen[c] += 1;
        if seen[c] > skip && quota[c] > 0 {
            quota[c] -= 1;
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_subset_counts_and_offsets() {
        let labels: Vec<u8> = (0..100).map(|i| (i % 4) as u8).collect();
        let first = balanced_indices(&labels, 4, 10, 0);
        assert_eq!(first.len(), 10);
        let per_class = |idx: &[usize]| {
            let mut n = [0; 4];
            idx.iter().for_each(|&i| n[labels[i] as usize] += 1);
            n
        };
        assert_eq!(per_class(&first), [3, 3, 2, 2]);
        let next = balanced_indices(&labels, 4, 8, 3);
        assert!(next.iter().all(|i| !first.contains(i)));
        assert_eq!(per_class(&next), [2, 2, 2, 2]);
    }

    #[test]
    fn missing_root_reports_fetch_hint() {
        let dir = tempfile::tempdir().unwrap();
        let err = CifarSource::open(dir.path()).unwrap_err();
        assert!(err.to_string().contains("fetch_cifar10.sh"), "{err}");
    }

    #[test]
    fn binary_release_is_decoded_planar() {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&bin).unwrap();
        let record = |label: u8| {
            let mut r = vec![label];
            r.extend((0..3 * PIXELS).map(|i| (i / PIXELS * 100) as u8));
            r
        };
        for (k, name) in TRAIN_FILES.iter().chain(&TEST_FILES).enumerate() {
            let bytes: Vec<u8> = (0..PER_FILE).flat_map(|i| record(((i + k) % 10) as u8)).collect();
            std::fs::write(bin.join(format!("{name}.bin")), bytes).unwrap();
        }
        let src = CifarSource::open(dir.path()).unwrap();
        let ds = src.load(Split::Test, &[0, 7]).unwrap();
        assert_eq!(ds.labels, vec![5, 2]);
        let img = &ds.images[0];
        assert_eq!(img.get(0, 3, 3), 0.0);
        assert_eq!(img.get(1, 0, 0), 100.0 / 255.0);
        assert_eq!(img.get(2, 31, 31), 200.0 / 255.0);
        assert!(src.load(Split::Test, &[PER_FILE]).is_err());
    }
}
