//! Task sampling and assembly of loss batches.

use std::collections::{BTreeMap, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::data::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::objectives::{BatchPoint, LossBatch};
use crate::tensor::Tensor;

const MAX_RESAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: String,
    pub pairs: Vec<usize>,
}

/// Tasks of a pair pool, plus the photos available as negatives.
#[derive(Clone, Debug)]
pub struct TaskIndex {
    pub tasks: Vec<Task>,
    /// `(task position, photo)` for every distinct photo of the pool.
    pub photos: Vec<(usize, usize)>,
    instances: HashMap<String, Vec<usize>>,
}

pub fn photo_task(ds: &Dataset, photo: usize) -> &str {
    let p = &ds.photos[photo];
    match ds.mode() {
        Mode::Category => &p.category,
        Mode::Finegrained => &p.instance,
    }
}

impl TaskIndex {
    pub fn new(ds: &Dataset, pairs: &[usize]) -> Self {
        let mut by_task: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut instances: HashMap<String, Vec<usize>> = HashMap::new();
        for &p in pairs {
            by_task.entry(ds.task_of(p)).or_default().push(p);
            instances.entry(ds.pairs[p].instance.clone()).or_default().push(p);
        }
        let tasks: Vec<Task> = by_task.into_iter().map(|(id, pairs)| Task { id: id.to_string(), pairs }).collect();
        let pos: HashMap<&str, usize> = tasks.iter().enumerate().map(|(i, t)| (t.id.as_str(), i)).collect();
        let mut photos: Vec<(usize, usize)> = pairs.iter().map(|&p| (pos[ds.task_of(p)], ds.pairs[p].photo)).collect();
        photos.sort_unstable();
        photos.dedup();
        Self { tasks, photos, instances }
    }

    /// A sketch of the same instance in a different style, if any.
    pub fn donor<R: Rng>(&self, ds: &Dataset, pair: usize, rng: &mut R) -> Option<usize> {
        let p = &ds.pairs[pair];
        let others: Vec<usize> = self.instances[&p.instance]
            .iter()
            .copied()
            .filter(|&o| ds.pairs[o].style != p.style)
            .collect();
        others.choose(rng).copied()
    }

    pub fn random_negative<R: Rng>(&self, task: usize, rng: &mut R) -> Result<usize> {
        let others: Vec<usize> = self.photos.iter().filter(|(t, _)| *t != task).map(|&(_, p)| p).collect();
        others.choose(rng).copied().ok_or_else(|| Error::Dataset("no photos outside the task".into()))
    }

    pub fn task_position(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id == id)
    }
}

/// Where negatives come from.
pub enum Negatives<'a> {
    Random,
    /// Per pair, nearest other-task photos under the current model.
    Hard(&'a HashMap<usize, Vec<usize>>),
}

/// One meta-task. `negatives` and `donors` are aligned with `trn` followed by `val`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub task: String,
    pub trn: Vec<usize>,
    pub val: Vec<usize>,
    pub negatives: Vec<usize>,
    pub donors: Vec<Option<usize>>,
}

impl Episode {
    pub fn trn_parts(&self) -> (&[usize], &[usize], &[Option<usize>]) {
        let n = self.trn.len();
        (&self.trn, &self.negatives[..n], &self.donors[..n])
    }

    pub fn val_parts(&self) -> (&[usize], &[usize], &[Option<usize>]) {
        let n = self.trn.len();
        (&self.val, &self.negatives[n..], &self.donors[n..])
    }
}

/// Held-out pairs per task: `max(1, ⌈fraction · n⌉)`, leaving at least one training pair.
pub fn val_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).max(1).min(n.saturating_sub(1))
}

pub fn sample_task<R: Rng>(
    ds: &Dataset,
    index: &TaskIndex,
    val_fraction: f64,
    negatives: &Negatives<'_>,
    rng: &mut R,
) -> Result<Episode> {
    if index.tasks.len() < 2 {
        return Err(Error::Dataset("sampling episodes needs at least two tasks".into()));
    }
    for _ in 0..MAX_RESAMPLES {
        let t = rng.random_range(0..index.tasks.len());
        let task = &index.tasks[t];
        if task.pairs.len() < 2 {
            continue;
        }
        let mut pairs = task.pairs.clone();
        pairs.shuffle(rng);
        let r = val_count(pairs.len(), val_fraction);
        let val = pairs.split_off(pairs.len() - r);
        let trn = pairs;
        let mut negs = Vec::with_capacity(trn.len() + val.len());
        let mut donors = Vec::with_capacity(trn.len() + val.len());
        for &p in trn.iter().chain(&val) {
            let n = match negatives {
                Negatives::Random => index.random_negative(t, rng)?,
                Negatives::Hard(map) => match map.get(&p).filter(|v| !v.is_empty()) {
                    Some(cands) => *cands.choose(rng).expect("non-empty"),
                    None => index.random_negative(t, rng)?,
                },
            };
            negs.push(n);
            donors.push(index.donor(ds, p, rng));
        }
        return Ok(Episode { task: task.id.clone(), trn, val, negatives: negs, donors });
    }
    Err(Error::Dataset(format!("no task with at least two pairs after {MAX_RESAMPLES} draws")))
}

fn stack(imgs: &[&ImageTensor]) -> Tensor<f32> {
    let (c, s) = (imgs[0].channels, imgs[0].size);
    let mut data = Vec::with_capacity(imgs.len() * c * s * s);
    for i in imgs {
        data.extend_from_slice(i.data());
    }
    Tensor::new(vec![imgs.len(), c, s, s], data)
}

/// Images and index structure for a loss over `pairs` with aligned negatives and donors.
pub fn build_batch(
    ds: &Dataset,
    pairs: &[usize],
    negatives: &[usize],
    donors: &[Option<usize>],
) -> Result<LossBatch<f32>> {
    assert_eq!(pairs.len(), negatives.len());
    assert_eq!(pairs.len(), donors.len());
    let mut sketch_ids: Vec<usize> = Vec::new();
    let mut photo_ids: Vec<usize> = Vec::new();
    let slot = |v: &mut Vec<usize>, x: usize| match v.iter().position(|&y| y == x) {
        Some(i) => i,
        None => {
            v.push(x);
            v.len() - 1
        }
    };
    let mut points = Vec::with_capacity(pairs.len());
    for ((&p, &n), &d) in pairs.iter().zip(negatives).zip(donors) {
        let sketch = slot(&mut sketch_ids, p);
        let donor = d.map(|d| slot(&mut sketch_ids, d));
        let photo = slot(&mut photo_ids, ds.pairs[p].photo);
        let negative = slot(&mut photo_ids, n);
        points.push(BatchPoint { sketch, photo, negative, donor });
    }
    let sk: Vec<&ImageTensor> = sketch_ids.iter().map(|&i| ds.sketch(i)).collect::<Result<_>>()?;
    let ph: Vec<&ImageTensor> = photo_ids.iter().map(|&i| ds.photo(i)).collect::<Result<_>>()?;
    Ok(LossBatch { sketches: stack(&sk), photos: stack(&ph), points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthSpec};
    use crate::seed;

    /// Category-level data: every category is a task of `instances × 5` pairs.
    fn dataset(categories: usize, instances: usize) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            num_categories: categories,
            instances_per_category: instances,
            size: 8,
            seed: 3,
            mode: Mode::Category,
            ..Default::default()
        };
        generate_dataset(&spec, dir.path()).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        (dir, ds)
    }

    fn all(ds: &Dataset) -> Vec<usize> {
        (0..ds.pairs.len()).collect()
    }

    #[test]
    fn single_task_is_an_error() {
        let (_d, ds) = dataset(2, 2);
        let one: Vec<usize> = all(&ds).into_iter().filter(|&p| ds.task_of(p) == "c00").collect();
        let idx = TaskIndex::new(&ds, &one);
        assert!(sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut seed::rng(0, &[])).is_err());
    }

    #[test]
    fn ten_pairs_split_eight_two() {
        let (_d, ds) = dataset(3, 2);
        let idx = TaskIndex::new(&ds, &all(&ds));
        assert!(idx.tasks.iter().all(|t| t.pairs.len() == 10));
        let mut rng = seed::rng(1, &[]);
        for _ in 0..20 {
            let ep = sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut rng).unwrap();
            assert_eq!((ep.trn.len(), ep.val.len()), (8, 2));
            assert!(ep.trn.iter().all(|p| !ep.val.contains(p)));
            assert_eq!(ep.negatives.len(), 10);
            assert!(ep.negatives.iter().all(|&n| photo_task(&ds, n) != ep.task));
            for (&p, d) in ep.trn.iter().chain(&ep.val).zip(&ep.donors) {
                let d = d.expect("five styles per instance");
                assert_eq!(ds.pairs[d].instance, ds.pairs[p].instance);
                assert_ne!(ds.pairs[d].style, ds.pairs[p].style);
            }
        }
    }

    #[test]
    fn val_count_rule() {
        assert_eq!(val_count(10, 0.2), 2);
        assert_eq!(val_count(3, 0.2), 1);
        assert_eq!(val_count(2, 0.9), 1);
        assert_eq!(val_count(5, 0.0), 1);
    }

    #[test]
    fn tasks_are_drawn_uniformly() {
        let (_d, ds) = dataset(10, 1);
        let idx = TaskIndex::new(&ds, &all(&ds));
        let mut rng = seed::rng(2, &[]);
        let mut counts: HashMap<String, usize> = HashMap::new();
        for _ in 0..1000 {
            *counts.entry(sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut rng).unwrap().task).or_default() += 1;
        }
        let sigma = (1000.0f64 * 0.1 * 0.9).sqrt();
        assert_eq!(counts.len(), 10);
        for (t, c) in counts {
            assert!((c as f64 - 100.0).abs() <= 4.0 * sigma, "task {t} drawn {c} times");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_hard_negatives_are_used() {
        let (_d, ds) = dataset(3, 2);
        let idx = TaskIndex::new(&ds, &all(&ds));
        let a = sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut seed::rng(9, &[])).unwrap();
        let b = sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut seed::rng(9, &[])).unwrap();
        assert_eq!(a, b);
        let other = ds.pairs.iter().position(|p| p.category != a.task).unwrap();
        let photo = ds.pairs[other].photo;
        let hard: HashMap<usize, Vec<usize>> = all(&ds).into_iter().map(|p| (p, vec![photo])).collect();
        let c = sample_task(&ds, &idx, 0.2, &Negatives::Hard(&hard), &mut seed::rng(9, &[])).unwrap();
        if c.task == a.task {
            assert!(c.negatives.iter().all(|&n| n == photo));
        }
    }

    #[test]
    fn batch_deduplicates_images() {
        let (_d, ds) = dataset(3, 2);
        let idx = TaskIndex::new(&ds, &all(&ds));
        let ep = sample_task(&ds, &idx, 0.2, &Negatives::Random, &mut seed::rng(4, &[])).unwrap();
        let (p, n, d) = ep.trn_parts();
        let b = build_batch(&ds, p, n, d).unwrap();
        b.validate().unwrap();
        assert_eq!(b.points.len(), 8);
        assert!(b.photos.rows() <= 2 + 8);
        for (pt, &pair) in b.points.iter().zip(p) {
            assert_eq!(b.sketches.row(pt.sketch), ds.sketch(pair).unwrap().data());
            assert_eq!(b.photos.row(pt.photo), ds.photo(ds.pairs[pair].photo).unwrap().data());
        }
    }
}
