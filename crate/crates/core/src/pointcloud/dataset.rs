use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_sequence, write_sequence};
use super::Sequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub sequences: Vec<Sequence>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(sequences: Vec<Sequence>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let ds = Self {
            sequences,
            class_names,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            match s.label {
                Some(l) if l < self.class_names.len() => {}
                Some(l) => {
                    return Err(Error::Invariant(format!(
                        "sequence {i} label {l} outside {} classes",
                        self.class_names.len()
                    )))
                }
                None => return Err(Error::Invariant(format!("sequence {i} is unlabeled"))),
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.label.unwrap_or(0)).collect()
    }
}

/// On-disk listing of one split; sequence paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub split: Split,
    pub sequences: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `dir/manifest.json` and one sequence file per sequence.
pub fn write_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(ds.len());
    for (i, s) in ds.sequences.iter().enumerate() {
        let name = format!("seq_{i:05}.esq");
        write_sequence(s, dir.join(&name))?;
        names.push(name);
    }
    let manifest = Manifest {
        class_names: ds.class_names.clone(),
        split: ds.split,
        sequences: names,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let sequences = manifest
        .sequences
        .iter()
        .map(|rel| load_sequence(dir.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(sequences, manifest.class_names, manifest.split)
}

/// Stratified shuffle split into train/val/test. Fractions are for train and
/// val; the remainder is test. Each class contributes at least one sequence
/// to every split when it has three or more.
pub fn split_dataset(
    ds: &LabeledDataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<[LabeledDataset; 3]> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "bad split fractions {train_frac}/{val_frac}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<Sequence>; 3] = Default::default();
    for class in 0..ds.class_names.len() {
        let mut members: Vec<&Sequence> = ds
            .sequences
            .iter()
            .filter(|s| s.label == Some(class))
            .collect();
        members.shuffle(&mut rng);
        let n = members.len();
        let mut n_train = (n as f64 * train_frac).round() as usize;
        let mut n_val = (n as f64 * val_frac).round() as usize;
        if n >= 3 {
            n_train = n_train.clamp(1, n - 2);
            n_val = n_val.clamp(1, n - n_train - 1);
        } else {
            n_train = n_train.min(n);
            n_val = n_val.min(n - n_train);
        }
        for (i, s) in members.into_iter().enumerate() {
            let slot = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[slot].push(s.clone());
        }
    }
    let [a, b, c] = parts;
    Ok([
        LabeledDataset::new(a, ds.class_names.clone(), Split::Train)?,
        LabeledDataset::new(b, ds.class_names.clone(), Split::Val)?,
        LabeledDataset::new(c, ds.class_names.clone(), Split::Test)?,
    ])
}
