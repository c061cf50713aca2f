//! Synthetic identity data, tensor and image files, augmentation and the
//! evaluation-time degradation pipeline.

mod augment;
mod degrade;
pub mod dten;
pub mod ppm;
mod synth;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use augment::{augment, AUGMENT_PROB};
pub use degrade::{box_downsample, degrade, degrade_with_rng, DegradeSpec};
pub use dten::{load_tensor, save_tensor};
pub use synth::{IdentityTemplate, SampleJitter};

use crate::image::Image;
use crate::seeds;

#[derive(Debug, Error, Clone)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: Arc<io::Error> },
    #[error("{}byte {offset}: {reason}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Format {
        path: Option<PathBuf>,
        offset: usize,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, e: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source: Arc::new(e),
        }
    }

    pub(crate) fn at(self, p: &Path) -> Self {
        match self {
            DataError::Format { offset, reason, .. } => DataError::Format {
                path: Some(p.to_path_buf()),
                offset,
                reason,
            },
            other => other,
        }
    }

    pub fn is_missing_file(&self) -> bool {
        matches!(self, DataError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// 1-based identity label.
    pub identity: usize,
    pub split: Split,
}

impl Sample {
    /// 0-based class index.
    pub fn class(&self) -> usize {
        self.identity - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub identity: usize,
    pub split: Split,
}

/// `manifest.json` at the dataset root. Record paths are root-relative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub seed: u64,
    pub size: usize,
    pub identities: usize,
    pub records: Vec<Record>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHANNELS: usize = 3;

/// Number of held-out samples per identity: 20%, at least one.
pub fn test_count(samples_per_identity: usize) -> usize {
    (samples_per_identity / 5).max(1)
}

impl DatasetManifest {
    /// Load from a dataset directory or a path to its manifest file.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| DataError::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: file.clone(),
            reason: e.to_string(),
        })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_labels(&file)?;
        Ok(m)
    }

    fn check_labels(&self, file: &Path) -> Result<(), DataError> {
        let mut seen = vec![false; self.identities];
        for r in &self.records {
            if r.identity == 0 || r.identity > self.identities {
                return Err(DataError::Manifest {
                    path: file.to_path_buf(),
                    reason: format!("identity {} outside 1..={}", r.identity, self.identities),
                });
            }
            seen[r.identity - 1] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(DataError::Manifest {
                path: file.to_path_buf(),
                reason: format!("identity {} has no records", k + 1),
            });
        }
        Ok(())
    }

    pub fn path_of(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn load_record(&self, r: &Record) -> Result<Sample, DataError> {
        let path = self.path_of(r);
        let t = load_tensor::<f32>(&path)?;
        if t.dims().len() != 3 || t.dims()[0] != self.size || t.dims()[1] != self.size {
            return Err(DataError::Manifest {
                path,
                reason: format!("expected {0}x{0}xC, found {1:?}", self.size, t.dims()),
            });
        }
        let image = Image::new(t).map_err(|e| DataError::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Ok(Sample {
            image,
            identity: r.identity,
            split: r.split,
        })
    }

    /// All samples of one split in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.records
            .par_iter()
            .filter(|r| r.split == split)
            .map(|r| self.load_record(r))
            .collect()
    }

    /// Load every record, checking that each file exists and has the declared size.
    pub fn verify(&self) -> Result<(), DataError> {
        self.records
            .par_iter()
            .try_for_each(|r| self.load_record(r).map(|_| ()))
    }

    pub fn write(&self) -> Result<PathBuf, DataError> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&file, text + "\n").map_err(|e| DataError::io(&file, e))?;
        Ok(file)
    }
}

/// Render `identities × samples_per_identity` images under `root`.
///
/// Each identity is a fixed procedural template; each sample applies pose,
/// brightness and pixel-noise jitter. The first 80% of each identity's
/// samples (at least one held out) form the train split.
pub fn generate_dataset(
    root: &Path,
    seed: u64,
    identities: usize,
    samples_per_identity: usize,
    size: usize,
) -> Result<DatasetManifest, DataError> {
    if identities < 2 {
        return Err(DataError::Invalid("identities ≥ 2".into()));
    }
    if samples_per_identity < 2 {
        return Err(DataError::Invalid("samples-per-id ≥ 2".into()));
    }
    if size < 16 {
        return Err(DataError::Invalid("size ≥ 16".into()));
    }
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::io(&images, e))?;
    let n_test = test_count(samples_per_identity);
    let n_train = samples_per_identity - n_test;

    let per_identity: Vec<Vec<Record>> = (0..identities)
        .into_par_iter()
        .map(|id| -> Result<Vec<Record>, DataError> {
            let template = IdentityTemplate::random(&mut seeds::rng(seed, &[seeds::TAG_TEMPLATE, id as u64]));
            let mut out = Vec::with_capacity(samples_per_identity);
            for k in 0..samples_per_identity {
                let mut rng = seeds::rng(seed, &[seeds::TAG_SAMPLE, id as u64, k as u64]);
                let jitter = SampleJitter::random(&mut rng);
                let img = template.render_sample(size, &jitter, &mut rng);
                let stem = format!("id{:04}_s{:03}", id + 1, k);
                let rel = format!("images/{stem}.dten");
                save_tensor(&root.join(&rel), img.tensor())?;
                ppm::write_ppm(&images.join(format!("{stem}.ppm")), &img)?;
                out.push(Record {
                    path: rel,
                    identity: id + 1,
                    split: if k < n_train { Split::Train } else { Split::Test },
                });
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        seed,
        size,
        identities,
        records: per_identity.into_iter().flatten().collect(),
    };
    manifest.write()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_dataset_counts() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), 1, 2, 2, 16).unwrap();
        assert_eq!(m.records.len(), 4);
        let train: Vec<_> = m.records.iter().filter(|r| r.split == Split::Train).collect();
        assert_eq!(train.len(), 2);
        assert_ne!(train[0].identity, train[1].identity);
        m.verify().unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn rejects_single_identity() {
        let dir = tempfile::tempdir().unwrap();
        let err = generate_dataset(dir.path(), 1, 1, 4, 32).unwrap_err();
        assert!(err.to_string().contains("identities ≥ 2"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), 9, 3, 3, 16).unwrap();
        generate_dataset(b.path(), 9, 3, 3, 16).unwrap();
        for entry in fs::read_dir(a.path().join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            let x = fs::read(a.path().join("images").join(&name)).unwrap();
            let y = fs::read(b.path().join("images").join(&name)).unwrap();
            assert_eq!(x, y, "{name:?}");
        }
        assert_eq!(
            fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn missing_file_breaks_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), 1, 2, 2, 16).unwrap();
        fs::remove_file(m.path_of(&m.records[0])).unwrap();
        assert!(m.verify().unwrap_err().is_missing_file());
    }
}
