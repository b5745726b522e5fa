use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Counts, Manifest, Mode, PairEntry, StyleSplits, SCHEMA_VERSION};
use super::render::{category_template, instance_geometry, render_photo, render_sketch, StyleParams};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_categories: usize,
    pub instances_per_category: usize,
    pub styles_train: usize,
    pub styles_heldout: usize,
    pub size: usize,
    pub seed: u64,
    pub mode: Mode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_categories: 8,
            instances_per_category: 8,
            styles_train: 3,
            styles_heldout: 2,
            size: 64,
            seed: 0,
            mode: Mode::Finegrained,
        }
    }
}

pub fn category_id(c: usize) -> String {
    format!("c{c:02}")
}

pub fn instance_id(c: usize, i: usize) -> String {
    format!("c{c:02}i{i:02}")
}

pub fn style_id(s: usize) -> String {
    format!("s{s}")
}

const STREAM_TEMPLATE: u64 = 1;
const STREAM_INSTANCE: u64 = 2;
const STREAM_STYLE: u64 = 3;
const STREAM_SKETCH: u64 = 4;

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders the dataset into `out_dir` (which must be absent or empty) and returns its manifest.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.styles_train < 3 {
        return Err(Error::Contract(format!("need at least 3 training styles, got {}", spec.styles_train)));
    }
    if spec.num_categories == 0 || spec.instances_per_category == 0 || spec.size < 8 {
        return Err(Error::Contract("dataset must have categories, instances and size >= 8".into()));
    }
    if out_dir.exists() {
        let mut entries = std::fs::read_dir(out_dir).map_err(|e| Error::io(out_dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Dataset(format!("refusing to write into non-empty {}", out_dir.display())));
        }
    }
    let n_styles = spec.styles_train + spec.styles_heldout;
    let styles: Vec<StyleParams> =
        (0..n_styles).map(|s| StyleParams::random(&mut seed::rng(spec.seed, &[STREAM_STYLE, s as u64]))).collect();
    let mut pairs = Vec::new();
    for c in 0..spec.num_categories {
        let template = category_template(&mut seed::rng(spec.seed, &[STREAM_TEMPLATE, c as u64]));
        for i in 0..spec.instances_per_category {
            let geom = instance_geometry(&template, &mut seed::rng(spec.seed, &[STREAM_INSTANCE, c as u64, i as u64]));
            let (cat, inst) = (category_id(c), instance_id(c, i));
            let photo_rel = format!("photos/{cat}/{inst}.png");
            write(&out_dir.join(&photo_rel), &render_photo(&geom, spec.size)?.to_png()?)?;
            for (s, style) in styles.iter().enumerate() {
                let mut rng = seed::rng(spec.seed, &[STREAM_SKETCH, c as u64, i as u64, s as u64]);
                let sid = style_id(s);
                let sketch_rel = format!("sketches/{cat}/{inst}__{sid}.png");
                write(&out_dir.join(&sketch_rel), &render_sketch(&geom, style, spec.size, &mut rng)?.to_png()?)?;
                pairs.push(PairEntry {
                    category: cat.clone(),
                    instance: inst.clone(),
                    style: sid,
                    sketch: sketch_rel,
                    photo: photo_rel.clone(),
                });
            }
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        mode: spec.mode,
        counts: Counts {
            categories: spec.num_categories,
            photos: spec.num_categories * spec.instances_per_category,
            sketches: pairs.len(),
        },
        image_size: spec.size,
        styles: StyleSplits {
            train: (0..spec.styles_train).map(style_id).collect(),
            heldout: (spec.styles_train..n_styles).map(style_id).collect(),
        },
        generator_seed: Some(spec.seed),
        style_params: styles.into_iter().enumerate().map(|(s, p)| (style_id(s), p)).collect::<BTreeMap<_, _>>(),
        pairs,
    };
    write(&out_dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
