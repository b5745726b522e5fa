use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::render::StyleParams;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Modality};

pub const SCHEMA_VERSION: u32 = 1;

/// Retrieval granularity: any photo of the category, or the one photo of the instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Category,
    Finegrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub categories: usize,
    pub photos: usize,
    pub sketches: usize,
}

/// Style ids seen in training and those reserved for evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StyleSplits {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub category: String,
    pub instance: String,
    pub style: String,
    /// Paths relative to the dataset root.
    pub sketch: String,
    pub photo: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub mode: Mode,
    pub counts: Counts,
    pub image_size: usize,
    pub styles: StyleSplits,
    #[serde(default)]
    pub generator_seed: Option<u64>,
    #[serde(default)]
    pub style_params: BTreeMap<String, StyleParams>,
    pub pairs: Vec<PairEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhotoRecord {
    /// File stem; unique within the dataset.
    pub id: String,
    pub category: String,
    pub instance: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub category: String,
    pub instance: String,
    pub style: String,
    pub sketch_path: PathBuf,
    /// Index into [`Dataset::photos`].
    pub photo: usize,
}

/// A loaded dataset; images are decoded on first access and cached.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub photos: Vec<PhotoRecord>,
    pub pairs: Vec<PairRecord>,
    photo_cache: Vec<OnceLock<ImageTensor>>,
    sketch_cache: Vec<OnceLock<ImageTensor>>,
}

fn cached<'a>(cell: &'a OnceLock<ImageTensor>, path: &Path, size: usize, m: Modality) -> Result<&'a ImageTensor> {
    if let Some(img) = cell.get() {
        return Ok(img);
    }
    let img = ImageTensor::load(path, size, m)?;
    Ok(cell.get_or_init(|| img))
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(mpath.clone())
            } else {
                Error::io(&mpath, e)
            }
        })?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("malformed manifest: {e}")))?;
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: &Path, manifest: Manifest) -> Result<Self> {
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!("unsupported schema_version {}", manifest.schema_version)));
        }
        if manifest.image_size == 0 {
            return Err(Error::Dataset("image_size must be positive".into()));
        }
        let mut photos: Vec<PhotoRecord> = Vec::new();
        let mut by_path: HashMap<&str, usize> = HashMap::new();
        let mut by_id: HashMap<String, &str> = HashMap::new();
        let mut instance_photo: HashMap<&str, &str> = HashMap::new();
        let mut seen_sketch: HashSet<&str> = HashSet::new();
        let mut seen_style: HashSet<(&str, &str)> = HashSet::new();
        let mut pairs = Vec::with_capacity(manifest.pairs.len());
        for p in &manifest.pairs {
            if !seen_sketch.insert(p.sketch.as_str()) {
                return Err(Error::Dataset(format!("duplicate sketch {}", p.sketch)));
            }
            if manifest.mode == Mode::Finegrained && !seen_style.insert((p.instance.as_str(), p.style.as_str())) {
                return Err(Error::Dataset(format!("duplicate style {} for instance {}", p.style, p.instance)));
            }
            if manifest.mode == Mode::Finegrained {
                if let Some(prev) = instance_photo.insert(p.instance.as_str(), p.photo.as_str()) {
                    if prev != p.photo {
                        return Err(Error::Dataset(format!(
                            "instance {} has more than one photo ({prev}, {})",
                            p.instance, p.photo
                        )));
                    }
                }
            }
            let sketch_path = root.join(&p.sketch);
            if !sketch_path.is_file() {
                return Err(Error::MissingFile(sketch_path));
            }
            let photo = match by_path.get(p.photo.as_str()) {
                Some(&i) => {
                    if photos[i].category != p.category {
                        return Err(Error::Dataset(format!("photo {} listed under two categories", p.photo)));
                    }
                    i
                }
                None => {
                    let path = root.join(&p.photo);
                    if !path.is_file() {
                        return Err(Error::MissingFile(path));
                    }
                    let id = Path::new(&p.photo)
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .ok_or_else(|| Error::Dataset(format!("bad photo path {}", p.photo)))?
                        .to_string();
                    if let Some(other) = by_id.insert(id.clone(), p.photo.as_str()) {
                        return Err(Error::Dataset(format!("duplicate photo id {id} ({other}, {})", p.photo)));
                    }
                    photos.push(PhotoRecord { id, category: p.category.clone(), instance: p.instance.clone(), path });
                    by_path.insert(p.photo.as_str(), photos.len() - 1);
                    photos.len() - 1
                }
            };
            pairs.push(PairRecord {
                category: p.category.clone(),
                instance: p.instance.clone(),
                style: p.style.clone(),
                sketch_path,
                photo,
            });
        }
        let categories: HashSet<&str> = manifest.pairs.iter().map(|p| p.category.as_str()).collect();
        let c = &manifest.counts;
        if c.photos != photos.len() || c.sketches != pairs.len() || c.categories != categories.len() {
            return Err(Error::Dataset(format!(
                "manifest counts {c:?} disagree with {} photos, {} sketches, {} categories",
                photos.len(),
                pairs.len(),
                categories.len()
            )));
        }
        let photo_cache = (0..photos.len()).map(|_| OnceLock::new()).collect();
        let sketch_cache = (0..pairs.len()).map(|_| OnceLock::new()).collect();
        Ok(Self { root: root.to_path_buf(), manifest, photos, pairs, photo_cache, sketch_cache })
    }

    pub fn mode(&self) -> Mode {
        self.manifest.mode
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn photo(&self, i: usize) -> Result<&ImageTensor> {
        cached(&self.photo_cache[i], &self.photos[i].path, self.image_size(), Modality::Photo)
    }

    pub fn sketch(&self, pair: usize) -> Result<&ImageTensor> {
        cached(&self.sketch_cache[pair], &self.pairs[pair].sketch_path, self.image_size(), Modality::Sketch)
    }

    /// The task a pair belongs to: its category, or its instance in fine-grained mode.
    pub fn task_of(&self, pair: usize) -> &str {
        let p = &self.pairs[pair];
        match self.mode() {
            Mode::Category => &p.category,
            Mode::Finegrained => &p.instance,
        }
    }

    /// Whether `photo` is a correct answer for a query with the sketch of `pair`.
    pub fn is_relevant(&self, pair: usize, photo: usize) -> bool {
        let (p, ph) = (&self.pairs[pair], &self.photos[photo]);
        match self.mode() {
            Mode::Category => p.category == ph.category,
            Mode::Finegrained => p.photo == photo,
        }
    }

    pub fn photo_index(&self, id: &str) -> Option<usize> {
        self.photos.iter().position(|p| p.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SynthSpec};

    fn small() -> SynthSpec {
        SynthSpec {
            num_categories: 2,
            instances_per_category: 5,
            styles_train: 3,
            styles_heldout: 2,
            size: 16,
            seed: 4,
            mode: Mode::Finegrained,
        }
    }

    #[test]
    fn generate_then_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path()).unwrap();
        assert_eq!(m.counts.sketches, 50);
        assert_eq!(m.counts.photos, 10);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.pairs.len(), 50);
        assert_eq!(ds.photos.len(), 10);
        let img = ds.sketch(0).unwrap();
        assert_eq!(img.size, 16);
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generation_is_byte_identical_and_refuses_non_empty() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_dataset(&small(), a.path()).unwrap();
        generate_dataset(&small(), b.path()).unwrap();
        for p in &m.pairs {
            for rel in [&p.sketch, &p.photo] {
                assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
            }
        }
        let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
        assert_eq!(ma, std::fs::read(b.path().join("manifest.json")).unwrap());
        assert!(generate_dataset(&small(), a.path()).is_err());
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(&m.pairs[3].sketch)).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains(&m.pairs[3].sketch), "{err}");
    }

    #[test]
    fn second_photo_for_an_instance_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = generate_dataset(&small(), dir.path()).unwrap();
        m.pairs[1].photo = m.pairs[20].photo.clone();
        m.pairs[1].category = m.pairs[20].category.clone();
        let err = Dataset::from_manifest(dir.path(), m).unwrap_err().to_string();
        assert!(err.contains("more than one photo"), "{err}");
    }

    #[test]
    fn malformed_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{\"schema_version\": 1}").unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::Dataset(_))));
    }
}
