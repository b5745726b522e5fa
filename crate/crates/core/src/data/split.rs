use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::seed;

/// How pairs are divided into meta-train, meta-validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitProtocol {
    /// Per category, photos are divided by `ratios`; training sets keep training
    /// styles and the test set keeps held-out styles.
    PhotoStratified { ratios: [f64; 3] },
    /// Every photo in every split; training styles train, held-out styles test.
    /// The validation split is empty.
    StyleHoldout,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        SplitProtocol::PhotoStratified { ratios: [0.7, 0.1, 0.2] }
    }
}

/// Pair indices of each split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub meta_train: Vec<usize>,
    pub meta_val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "meta_train" | "train" => Ok(&self.meta_train),
            "meta_val" | "val" => Ok(&self.meta_val),
            "test" => Ok(&self.test),
            other => Err(Error::Contract(format!("unknown split {other:?}"))),
        }
    }
}

/// Photo counts for `[train, val, test]`; every split gets at least one photo.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Option<[usize; 3]> {
    let val = ((n as f64 * ratios[1]).round() as usize).max(1);
    let test = ((n as f64 * ratios[2]).round() as usize).max(1);
    let train = n.checked_sub(val + test)?;
    (train >= 1).then_some([train, val, test])
}

pub fn split_dataset(ds: &Dataset, protocol: &SplitProtocol, seed_value: u64) -> Result<Splits> {
    let heldout: HashSet<&str> = ds.manifest.styles.heldout.iter().map(String::as_str).collect();
    let is_heldout = |pair: usize| heldout.contains(ds.pairs[pair].style.as_str());
    let mut out = Splits::default();
    match protocol {
        SplitProtocol::StyleHoldout => {
            if heldout.is_empty() {
                return Err(Error::Dataset("style hold-out split needs held-out styles".into()));
            }
            for i in 0..ds.pairs.len() {
                if is_heldout(i) {
                    out.test.push(i);
                } else {
                    out.meta_train.push(i);
                }
            }
        }
        SplitProtocol::PhotoStratified { ratios } => {
            let sum: f64 = ratios.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| *r < 0.0) {
                return Err(Error::Contract(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
            }
            let mut by_cat: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
            for p in &ds.pairs {
                by_cat.entry(p.category.as_str()).or_default().insert(p.photo);
            }
            let mut which = vec![usize::MAX; ds.photos.len()];
            let mut too_small = Vec::new();
            for (ci, (cat, photos)) in by_cat.iter().enumerate() {
                let mut photos: Vec<usize> = photos.iter().copied().collect();
                let Some(counts) = split_counts(photos.len(), *ratios) else {
                    too_small.push(format!("{cat} ({} photos)", photos.len()));
                    continue;
                };
                photos.shuffle(&mut seed::rng(seed_value, &[ci as u64]));
                let mut it = photos.into_iter();
                for (s, &c) in counts.iter().enumerate() {
                    for ph in it.by_ref().take(c) {
                        which[ph] = s;
                    }
                }
            }
            if !too_small.is_empty() {
                return Err(Error::Dataset(format!("tasks too small to split: {}", too_small.join(", "))));
            }
            for i in 0..ds.pairs.len() {
                let s = which[ds.pairs[i].photo];
                let held = is_heldout(i);
                match s {
                    0 if !held || heldout.is_empty() => out.meta_train.push(i),
                    1 if !held || heldout.is_empty() => out.meta_val.push(i),
                    2 if held || heldout.is_empty() => out.test.push(i),
                    _ => {}
                }
            }
        }
    }
    Ok(out)
}
