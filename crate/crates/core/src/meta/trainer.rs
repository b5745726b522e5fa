//! Warm-up followed by episodic bilevel training.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Dataset, Splits};
use crate::error::{ensure, Error, Result};
use crate::image::ImageTensor;
use crate::model::{Architecture, Model};
use crate::objectives::{LossBatch, LossOptions, LossTerms, LossWeights, Phase};
use crate::retrieval::index::squared_distance;
use crate::retrieval::{evaluate, EvalReport};
use crate::{par, seed};

use super::bilevel::{clip_factor, meta_gradient, norm, InnerConfig};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::episode::{build_batch, photo_task, sample_task, Episode, Negatives, TaskIndex};
use super::optim::Adam;
use super::problem::{outer_grad, EpisodeProblem, FtMode, HyperLayout};

const STREAM_WARMUP: u64 = 10;
const STREAM_META: u64 = 11;
const STREAM_PROBE: u64 = 12;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.ndjson";

/// Mean loss terms of one epoch's updates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLosses {
    pub rec: f64,
    pub kl: f64,
    pub tri_inv: f64,
    pub tri_f: f64,
    pub reg: f64,
    pub total: f64,
}

impl PhaseLosses {
    fn mean(terms: &[LossTerms]) -> Option<Self> {
        if terms.is_empty() {
            return None;
        }
        let n = terms.len() as f64;
        let m = |f: fn(&LossTerms) -> f64| terms.iter().map(f).sum::<f64>() / n;
        Some(Self {
            rec: m(|t| t.rec),
            kl: m(|t| t.kl),
            tri_inv: m(|t| t.tri_inv),
            tri_f: m(|t| t.tri_f),
            reg: m(|t| t.reg),
            total: m(|t| t.total),
        })
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub lambda1: f64,
    pub updates: usize,
    pub skipped_updates: usize,
    pub skipped_episodes: usize,
    /// Warm-up or inner loss.
    pub train: Option<PhaseLosses>,
    /// Outer loss on the episodes' held-out pairs.
    pub outer: Option<PhaseLosses>,
    /// Warm-up objective on a fixed set of training pairs with fixed noise.
    pub probe_loss: f64,
    pub psi_mean: f64,
    pub ft_std_omega_mean: f64,
    pub ft_std_eta_mean: f64,
    pub val: Option<EvalReport>,
}

pub struct TrainOutcome {
    pub last: Checkpoint,
    pub last_path: PathBuf,
    pub best_path: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<EpochRecord>,
}

/// Gradients of one episode.
struct EpisodeGrad {
    omega: Vec<f32>,
    hyper: Vec<f32>,
    inner: LossTerms,
    outer: LossTerms,
}

/// Result of one outer update.
#[derive(Clone, Debug, Default)]
pub struct StepStats {
    pub applied: bool,
    pub skipped_episodes: usize,
    pub inner: Vec<LossTerms>,
    pub outer: Vec<LossTerms>,
}

/// Mutable training state plus the fixed context it trains against.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub ds: &'a Dataset,
    pub splits: Splits,
    pub arch: Architecture,
    pub index: TaskIndex,
    pub omega: Vec<f32>,
    pub ft: Vec<f32>,
    pub psi: Vec<f32>,
    pub opt_omega: Adam,
    pub opt_hyper: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    probe: LossBatch<f32>,
}

fn ft_mean_std(arch: &Architecture, ft: &[f32], suffix: &str) -> f64 {
    let vals: Vec<f64> = arch
        .ft
        .segments
        .iter()
        .filter(|s| s.name.ends_with(suffix))
        .flat_map(|s| ft[s.range()].iter().map(|&v| crate::model::smooth_relu(v as f64)))
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

fn clip_in_place(g: &mut [f32], max: f64) {
    let c = clip_factor(norm(g), Some(max)) as f32;
    if c != 1.0 {
        g.iter_mut().for_each(|v| *v *= c);
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, ds: &'a Dataset) -> Result<Self> {
        config.validate()?;
        ensure!(
            ds.image_size() == config.image_size,
            "dataset images are {}px, config expects {}px",
            ds.image_size(),
            config.image_size
        );
        let splits = split_dataset(ds, &config.split, config.seed)?;
        let index = TaskIndex::new(ds, &splits.meta_train);
        if index.tasks.len() < 2 {
            return Err(Error::Dataset("meta-train split needs at least two tasks".into()));
        }
        let arch = Architecture::new(config.model())?;
        let omega = arch.init_omega::<f32>(seed::derive(config.seed, &[0]));
        let ft = if config.fixed_ft {
            arch.ft_with_std(config.fixed_ft_std_omega, config.fixed_ft_std_eta)
        } else {
            arch.init_ft()
        };
        let psi_init = if config.no_regd { 0.0 } else { config.psi_init as f32 };
        let psi = vec![psi_init; arch.inv_range().len()];
        let opt_omega = Adam::new(omega.len(), config.warmup_lr);
        let layout = HyperLayout::new(&arch, &Self::ft_mode_for(&config, &ft), !config.no_regd);
        let opt_hyper = Adam::new(layout.len(), config.beta_hyper);
        let probe = Self::probe_batch(&config, ds, &splits, &index)?;
        Ok(Self {
            config,
            ds,
            splits,
            arch,
            index,
            omega,
            ft,
            psi,
            opt_omega,
            opt_hyper,
            epoch: 0,
            best_val: None,
            probe,
        })
    }

    /// Restores parameters and optimizer state from a checkpoint of the same config.
    pub fn resume(ds: &'a Dataset, ck: Checkpoint) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), ds)?;
        ensure!(ck.psi.len() == t.psi.len(), "checkpoint regulariser length mismatch");
        t.omega = ck.omega;
        t.ft = ck.ft;
        t.psi = ck.psi;
        t.opt_omega = ck.opt_omega;
        t.opt_hyper = ck.opt_hyper;
        t.epoch = ck.epoch;
        t.best_val = ck.best_val;
        Ok(t)
    }

    fn ft_mode_for(config: &TrainConfig, ft: &[f32]) -> FtMode<f32> {
        if config.no_ft {
            FtMode::Off
        } else if config.fixed_ft {
            FtMode::Fixed(ft.to_vec())
        } else {
            FtMode::Learned
        }
    }

    fn probe_batch(config: &TrainConfig, ds: &Dataset, splits: &Splits, index: &TaskIndex) -> Result<LossBatch<f32>> {
        let mut rng = seed::rng(config.seed, &[STREAM_PROBE]);
        let mut pairs = splits.meta_train.clone();
        pairs.shuffle(&mut rng);
        pairs.truncate(config.probe_pairs);
        let mut negs = Vec::new();
        let mut donors = Vec::new();
        for &p in &pairs {
            let t = index.task_position(ds.task_of(p)).expect("indexed pair");
            negs.push(index.random_negative(t, &mut rng)?);
            donors.push(index.donor(ds, p, &mut rng));
        }
        build_batch(ds, &pairs, &negs, &donors)
    }

    pub fn model(&self) -> Model {
        Model { arch: self.arch.clone(), omega: self.omega.clone(), ft: self.ft.clone() }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            best_val: self.best_val,
            omega: self.omega.clone(),
            ft: self.ft.clone(),
            psi: self.psi.clone(),
            opt_omega: self.opt_omega.clone(),
            opt_hyper: self.opt_hyper.clone(),
        }
    }

    fn weights(&self, epoch: usize) -> Result<LossWeights> {
        Ok(LossWeights { lambda1: self.config.lambda1(epoch)?, ..self.config.weights.clone() })
    }

    fn options(&self) -> LossOptions {
        LossOptions { photo_to_sketch: self.config.photo_to_sketch }
    }

    fn in_warmup(&self) -> bool {
        self.config.no_meta || self.epoch < self.config.warmup_epochs
    }

    /// The fixed-weight training objective used to track progress across epochs.
    pub fn probe_loss(&self) -> Result<f64> {
        let weights = LossWeights { lambda1: self.config.lambda1_start, ..self.config.weights.clone() };
        let noise = seed::derive(self.config.seed, &[STREAM_PROBE, 1]);
        let (g, _) = outer_grad(&self.arch, &self.omega, &self.probe, &weights, self.options(), Phase::Warmup, noise)?;
        Ok(g.loss as f64)
    }

    /// One plain gradient step on the cross-modal objective; only valid during warm-up.
    pub fn warmup_step(&mut self, batch: &LossBatch<f32>, weights: &LossWeights, noise_seed: u64) -> Result<Option<LossTerms>> {
        ensure!(
            self.in_warmup(),
            "warmup_step called at epoch {} but warm-up ends at epoch {}",
            self.epoch,
            self.config.warmup_epochs
        );
        let (mut g, terms) = outer_grad(&self.arch, &self.omega, batch, weights, self.options(), Phase::Warmup, noise_seed)?;
        if g.omega.iter().any(|v| !v.is_finite()) {
            log::warn!("non-finite warm-up gradient at epoch {}; update skipped", self.epoch);
            return Ok(None);
        }
        clip_in_place(&mut g.omega, self.config.clip_norm);
        self.opt_omega.update(&mut self.omega, &g.omega);
        Ok(Some(terms))
    }

    fn hyper_layout(&self) -> HyperLayout {
        HyperLayout::new(&self.arch, &Self::ft_mode_for(&self.config, &self.ft), !self.config.no_regd)
    }

    fn hyper(&self) -> Vec<f32> {
        let layout = self.hyper_layout();
        let mut h = Vec::with_capacity(layout.len());
        if layout.ft > 0 {
            h.extend_from_slice(&self.ft);
        }
        if layout.psi > 0 {
            h.extend_from_slice(&self.psi);
        }
        h
    }

    fn inner_config(&self) -> InnerConfig {
        InnerConfig {
            alpha: self.config.alpha,
            steps: self.config.inner_steps,
            clip: Some(self.config.clip_norm),
            adaptive: self.config.adaptive_inner,
            first_order: self.config.first_order,
        }
    }

    fn episode_grad(&self, ep: &Episode, weights: &LossWeights, ep_seed: u64) -> Result<EpisodeGrad> {
        let (p, n, d) = ep.trn_parts();
        let trn = build_batch(self.ds, p, n, d)?;
        let (p, n, d) = ep.val_parts();
        let val = build_batch(self.ds, p, n, d)?;
        let problem = EpisodeProblem::new(
            &self.arch,
            trn,
            val,
            weights.clone(),
            self.options(),
            Self::ft_mode_for(&self.config, &self.ft),
            !self.config.no_regd,
            ep_seed,
        );
        let hyper = self.hyper();
        let mg = meta_gradient(&problem, &self.omega, &hyper, &self.inner_config())?;
        let (inner, outer) = problem.recorded_terms();
        let (inner, outer) = (inner.expect("inner loss evaluated"), outer.expect("outer loss evaluated"));
        Ok(EpisodeGrad { omega: mg.omega, hyper: mg.hyper, inner, outer })
    }

    /// Averages the episodes' meta-gradients and applies one outer update.
    pub fn outer_step(&mut self, episodes: &[Episode], seeds: &[u64], weights: &LossWeights) -> Result<StepStats> {
        ensure!(!self.in_warmup(), "outer_step called during warm-up (epoch {})", self.epoch);
        ensure!(episodes.len() == seeds.len() && !episodes.is_empty(), "need one seed per episode");
        let jobs: Vec<(&Episode, u64)> = episodes.iter().zip(seeds.iter().copied()).collect();
        let results = par::map(&jobs, |(ep, s)| self.episode_grad(ep, weights, *s));
        let mut stats = StepStats::default();
        let layout = self.hyper_layout();
        let mut g_omega = vec![0.0f64; self.omega.len()];
        let mut g_hyper = vec![0.0f64; layout.len()];
        let mut used = 0usize;
        for r in results {
            match r {
                Ok(eg) => {
                    g_omega.iter_mut().zip(&eg.omega).for_each(|(a, &b)| *a += b as f64);
                    g_hyper.iter_mut().zip(&eg.hyper).for_each(|(a, &b)| *a += b as f64);
                    stats.inner.push(eg.inner);
                    stats.outer.push(eg.outer);
                    used += 1;
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!("episode aborted at epoch {}: non-finite {what}", self.epoch);
                    stats.skipped_episodes += 1;
                }
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            return Ok(stats);
        }
        let inv = 1.0 / used as f64;
        let mut go: Vec<f32> = g_omega.iter().map(|v| (v * inv) as f32).collect();
        let mut gh: Vec<f32> = g_hyper.iter().map(|v| (v * inv) as f32).collect();
        if go.iter().chain(&gh).any(|v| !v.is_finite()) {
            log::warn!("non-finite averaged meta-gradient at epoch {}; update skipped", self.epoch);
            return Ok(stats);
        }
        clip_in_place(&mut go, self.config.clip_norm);
        clip_in_place(&mut gh, self.config.clip_norm);
        self.opt_omega.update(&mut self.omega, &go);
        if !layout.is_empty() {
            let mut h = self.hyper();
            self.opt_hyper.update(&mut h, &gh);
            if layout.ft > 0 {
                self.ft.copy_from_slice(&h[..layout.ft]);
            }
            if layout.psi > 0 {
                self.psi.copy_from_slice(&h[layout.ft..]);
                self.psi.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        stats.applied = true;
        Ok(stats)
    }

    /// For every training pair, the nearest photos of other tasks under the current embedding.
    pub fn hard_negatives(&self) -> Result<HashMap<usize, Vec<usize>>> {
        let model = self.model();
        let pairs = &self.splits.meta_train;
        let photos: Vec<usize> = self.index.photos.iter().map(|&(_, p)| p).collect();
        let sk: Vec<&ImageTensor> = pairs.iter().map(|&p| self.ds.sketch(p)).collect::<Result<_>>()?;
        let ph: Vec<&ImageTensor> = photos.iter().map(|&p| self.ds.photo(p)).collect::<Result<_>>()?;
        let sk_e = model.embed(&sk)?;
        let ph_e = model.embed(&ph)?;
        let pool = self.config.hard_negative_pool;
        let rows: Vec<(usize, Vec<usize>)> = par::map(&pairs.iter().enumerate().collect::<Vec<_>>(), |&(i, &p)| {
            let task = self.ds.task_of(p);
            let mut cands: Vec<(f64, usize)> = photos
                .iter()
                .zip(&ph_e)
                .filter(|(&ph, _)| photo_task(self.ds, ph) != task)
                .map(|(&ph, e)| (squared_distance(&sk_e[i], e), ph))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (p, cands.into_iter().take(pool).map(|(_, ph)| ph).collect())
        });
        Ok(rows.into_iter().collect())
    }

    fn warmup_epoch(&mut self, weights: &LossWeights) -> Result<(usize, usize, Vec<LossTerms>)> {
        let mut rng = seed::rng(self.config.seed, &[STREAM_WARMUP, self.epoch as u64]);
        let mut pairs = self.splits.meta_train.clone();
        pairs.shuffle(&mut rng);
        let (mut updates, mut skipped, mut terms) = (0, 0, Vec::new());
        for (b, chunk) in pairs.chunks(self.config.warmup_batch).enumerate() {
            let mut negs = Vec::with_capacity(chunk.len());
            let mut donors = Vec::with_capacity(chunk.len());
            for &p in chunk {
                let t = self.index.task_position(self.ds.task_of(p)).expect("indexed pair");
                negs.push(self.index.random_negative(t, &mut rng)?);
                donors.push(self.index.donor(self.ds, p, &mut rng));
            }
            let batch = build_batch(self.ds, chunk, &negs, &donors)?;
            let noise = seed::derive(self.config.seed, &[STREAM_WARMUP, self.epoch as u64, b as u64, 1]);
            match self.warmup_step(&batch, weights, noise)? {
                Some(t) => {
                    terms.push(t);
                    updates += 1;
                }
                None => skipped += 1,
            }
        }
        Ok((updates, skipped, terms))
    }

    fn meta_epoch(&mut self, weights: &LossWeights) -> Result<(usize, usize, usize, StepStats)> {
        if self.opt_omega.lr != self.config.beta {
            self.opt_omega.lr = self.config.beta;
        }
        let hard = if self.config.random_negatives { None } else { Some(self.hard_negatives()?) };
        let negatives = match &hard {
            Some(h) => Negatives::Hard(h),
            None => Negatives::Random,
        };
        let b = self.config.meta_batch;
        let steps = self.config.steps_per_epoch.unwrap_or_else(|| self.index.tasks.len().div_ceil(b));
        let e = self.epoch as u64;
        let (mut updates, mut skipped, mut skipped_eps) = (0, 0, 0);
        let mut all = StepStats::default();
        for s in 0..steps {
            let mut rng = seed::rng(self.config.seed, &[STREAM_META, e, s as u64]);
            let mut eps = Vec::with_capacity(b);
            for _ in 0..b {
                eps.push(sample_task(self.ds, &self.index, self.config.val_fraction, &negatives, &mut rng)?);
            }
            let seeds: Vec<u64> = (0..b).map(|i| seed::derive(self.config.seed, &[STREAM_META, e, s as u64, i as u64, 1])).collect();
            let st = self.outer_step(&eps, &seeds, weights)?;
            if st.applied {
                updates += 1;
            } else {
                skipped += 1;
            }
            skipped_eps += st.skipped_episodes;
            all.inner.extend(st.inner);
            all.outer.extend(st.outer);
        }
        Ok((updates, skipped, skipped_eps, all))
    }

    /// Runs one epoch and returns its log record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let weights = self.weights(self.epoch)?;
        let warm = self.in_warmup();
        let (updates, skipped_updates, skipped_episodes, train, outer) = if warm {
            let (u, s, t) = self.warmup_epoch(&weights)?;
            (u, s, 0, PhaseLosses::mean(&t), None)
        } else {
            let (u, s, se, st) = self.meta_epoch(&weights)?;
            (u, s, se, PhaseLosses::mean(&st.inner), PhaseLosses::mean(&st.outer))
        };
        let val = if self.splits.meta_val.is_empty() {
            None
        } else {
            Some(evaluate(&self.model(), self.ds, &self.splits.meta_val, "meta_val", self.config.precision_k)?)
        };
        let record = EpochRecord {
            epoch: self.epoch,
            phase: if warm { "warmup" } else { "meta" }.into(),
            lambda1: weights.lambda1,
            updates,
            skipped_updates,
            skipped_episodes,
            train,
            outer,
            probe_loss: self.probe_loss()?,
            psi_mean: self.psi.iter().map(|&v| v as f64).sum::<f64>() / self.psi.len().max(1) as f64,
            ft_std_omega_mean: ft_mean_std(&self.arch, &self.ft, ".omega"),
            ft_std_eta_mean: ft_mean_std(&self.arch, &self.ft, ".eta"),
            val,
        };
        self.epoch += 1;
        Ok(record)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Trains from scratch, writing checkpoints and the log into `out_dir`.
pub fn train(config: &TrainConfig, ds: &Dataset, out_dir: &Path) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone(), ds)?;
    run(trainer, out_dir)
}

/// Continues a trainer until its configured epoch count.
pub fn run(mut trainer: Trainer<'_>, out_dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(LOG_FILE);
    let mut log = if trainer.epoch == 0 {
        create(&log_path)?
    } else {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        BufWriter::new(f)
    };
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let rec = trainer.run_epoch()?;
        let acc = rec.val.as_ref().map(|v| v.acc_at_1);
        let improved = match (acc, trainer.best_val) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            trainer.best_val = acc;
        }
        log::info!(
            "epoch {} {} probe {:.4} train {:.4} val acc@1 {}",
            rec.epoch,
            rec.phase,
            rec.probe_loss,
            rec.train.as_ref().map_or(f64::NAN, |t| t.total),
            acc.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        let ck = trainer.checkpoint();
        ck.save(&last_path)?;
        // Without a meta-validation split the best checkpoint tracks the last one.
        if improved || acc.is_none() {
            ck.save(&best_path)?;
        }
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        records.push(rec);
    }
    Ok(TrainOutcome { last: trainer.checkpoint(), last_path, best_path, log_path, records })
}
