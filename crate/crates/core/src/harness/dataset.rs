//! Synthetic datasets and their on-disk cache.
//!
//! A cached dataset is a directory holding `manifest.json` and one
//! checkpoint-format file per scene under `train/` and `val/`, each with the
//! tensors `rgb`, `depth` and `labels` (class indices stored as floats).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::logit::TargetMask;
use crate::tensor::Tensor;

use super::scene::{generate_scene, scene_seed, SyntheticScene};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 200,
            val: 50,
            height: 64,
            width: 64,
            classes: 6,
        }
    }
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.train == 0 || self.val == 0 {
            return Err(invalid("train and val splits must be non-empty"));
        }
        if !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return Err(invalid("scene extents must be multiples of 8"));
        }
        let scene = |i: usize| generate_scene(scene_seed(self.seed, i), self.height, self.width, self.classes);
        Ok(Dataset {
            train: (0..self.train).map(scene).collect::<Result<_>>()?,
            val: (self.train..self.train + self.val).map(scene).collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.train.first().map_or(0, |s| s.classes())
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.train.first().ok_or_else(|| invalid("empty training split"))?;
        if self.val.is_empty() {
            return Err(invalid("empty validation split"));
        }
        let key = (first.height(), first.width(), first.classes());
        for s in self.train.iter().chain(&self.val) {
            s.validate()?;
            if (s.height(), s.width(), s.classes()) != key {
                return Err(invalid("scenes disagree on size or class count"));
            }
        }
        Ok(())
    }
}

pub fn scene_to_checkpoint(s: &SyntheticScene) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.insert("rgb", s.rgb.clone());
    ck.insert("depth", s.depth.clone());
    let labels = s.labels.targets().iter().map(|&k| k as f64).collect();
    ck.insert("labels", Tensor::new(&[s.height(), s.width()], labels).unwrap());
    ck
}

pub fn scene_from_checkpoint(ck: &Checkpoint, classes: usize) -> Result<SyntheticScene> {
    let labels = ck.require("labels")?;
    let targets = labels
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let s = SyntheticScene {
        rgb: ck.require("rgb")?.clone(),
        depth: ck.require("depth")?.clone(),
        labels: TargetMask::new(targets, classes)?,
    };
    s.validate()?;
    Ok(s)
}

/// Scene files relative to the dataset directory.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

impl SplitFiles {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub spec: DatasetSpec,
    pub files: SplitFiles,
    /// SHA-256 over the concatenated scene files, train split first.
    pub checksum: String,
    /// Unix seconds at creation; the only field that differs between runs.
    pub created: u64,
}

fn scene_path(split: &str, i: usize) -> String {
    format!("{split}/scene_{i:04}.lixt")
}

/// Writes every scene and the manifest; returns the manifest.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, data: &Dataset) -> Result<Manifest> {
    let mut hasher = Sha256::new();
    if (data.train.len(), data.val.len()) != (spec.train, spec.val) {
        return Err(invalid("dataset split sizes disagree with its spec"));
    }
    let mut files = SplitFiles::default();
    for (split, scenes, list) in [("train", &data.train, &mut files.train), ("val", &data.val, &mut files.val)] {
        fs::create_dir_all(dir.join(split))?;
        for (i, s) in scenes.iter().enumerate() {
            let rel = scene_path(split, i);
            let bytes = scene_to_checkpoint(s).to_bytes()?;
            hasher.update(&bytes);
            fs::write(dir.join(&rel), bytes)?;
            list.push(rel);
        }
    }
    let manifest = Manifest {
        spec: *spec,
        files,
        checksum: hex::encode(hasher.finalize()),
        created: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", dir.join(MANIFEST).display())))
}

/// Loads a cached dataset and checks it against its manifest checksum.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = read_manifest(dir)?;
    let spec = manifest.spec;
    if manifest.files.train.len() != spec.train || manifest.files.val.len() != spec.val {
        return Err(Error::Format("manifest file list does not match its counts".into()));
    }
    let mut hasher = Sha256::new();
    let mut scenes = Vec::with_capacity(spec.train + spec.val);
    for rel in manifest.files.all() {
        let path: PathBuf = dir.join(rel);
        let bytes = fs::read(&path)?;
        hasher.update(&bytes);
        scenes.push(scene_from_checkpoint(&Checkpoint::from_bytes(&bytes)?, spec.classes)?);
    }
    if hex::encode(hasher.finalize()) != manifest.checksum {
        return Err(Error::Format(format!("checksum mismatch in {}", dir.display())));
    }
    let val = scenes.split_off(spec.train);
    let data = Dataset { train: scenes, val };
    data.validate()?;
    Ok((data, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_checksum() {
        let spec = DatasetSpec { seed: 2, train: 3, val: 2, height: 32, width: 40, classes: 5 };
        let data = spec.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(dir.path(), &spec, &data).unwrap();
        assert_eq!((m.files.train.len(), m.files.val.len()), (3, 2));
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(m2.checksum, m.checksum);

        let other = tempfile::tempdir().unwrap();
        let again = save_dataset(other.path(), &spec, &spec.generate().unwrap()).unwrap();
        assert_eq!(again.checksum, m.checksum);

        let seed3 = DatasetSpec { seed: 3, ..spec };
        let third = tempfile::tempdir().unwrap();
        assert_ne!(save_dataset(third.path(), &seed3, &seed3.generate().unwrap()).unwrap().checksum, m.checksum);

        fs::write(dir.path().join(&m.files.train[0]), b"LIXT").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
