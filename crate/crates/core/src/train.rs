//! Training loop: deterministic batching, cosine learning-rate schedule,
//! structured per-step loss records, periodic checkpoints and final
//! evaluation. Batch composition for step s is a pure function of
//! (seed, s), so a resumed run reproduces the continuous run bit for bit.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{model_config_from_toml, model_config_toml, RunConfig};
use crate::data::checkpoint::Checkpoint;
use crate::data::dataset::{load_tile_dataset, TileDataset, TileItem};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::LossBreakdown;
use crate::metrics::{compute_metrics, confusion_counts, ConfusionCounts, MetricReport};
use crate::model::Model;
use crate::rng::{substream, SeededRng};

/// lr(t) = floor + (lr0 - floor) * (1 + cos(pi * t / T)) / 2
pub fn cosine_lr(step: usize, total: usize, lr0: f64, floor: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    floor + (lr0 - floor) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// One loss-log line: (step, lr, total, cls, bce, dice).
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

fn flip_image(data: &[u8], channels: usize, h: usize, w: usize, fh: bool, fv: bool) -> Vec<u8> {
    let mut out = vec![0u8; data.len()];
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let sy = if fv { h - 1 - y } else { y };
                let sx = if fh { w - 1 - x } else { x };
                out[(c * h + y) * w + x] = data[(c * h + sy) * w + sx];
            }
        }
    }
    out
}

pub struct Trainer {
    pub model: Model,
    pub cfg: RunConfig,
    /// Completed optimization steps.
    pub step: u64,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        let mut rng = SeededRng::new(cfg.train.seed);
        // The init stream is a named substream; keep the main stream
        // position advanced past a marker draw so saved state is
        // non-trivial.
        let _ = rng.next_u64();
        let model = Model::new(&cfg.model, cfg.train.seed)?;
        Ok(Trainer {
            model,
            cfg: cfg.clone(),
            step: 0,
            rng,
        })
    }

    /// Restore a trainer from a checkpoint; the checkpoint's model config
    /// must equal the requested one.
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Trainer> {
        let ckpt_model = model_config_from_toml(&ckpt.config_toml)?;
        if ckpt_model != cfg.model {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config does not match the requested one:\n--- checkpoint ---\n{}\n--- requested ---\n{}",
                ckpt.config_toml,
                model_config_toml(&cfg.model)
            )));
        }
        let mut trainer = Trainer::new(cfg)?;
        ckpt.apply_to_store(&mut trainer.model.store)?;
        trainer.step = ckpt.step;
        trainer.rng = SeededRng::new(ckpt.rng_seed);
        trainer.rng.set_word_pos(ckpt.rng_word_pos);
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            &model_config_toml(&self.cfg.model),
            &self.model.store,
            self.step,
            self.rng.seed(),
            self.rng.word_pos(),
        )
    }

    /// Sample indices of optimization step `step` (0-based): a seeded
    /// per-epoch permutation consumed batch by batch.
    pub fn batch_indices(&self, step: u64, len: usize) -> Vec<usize> {
        let b = self.cfg.train.batch_size.max(1);
        (0..b)
            .map(|k| {
                let counter = step * b as u64 + k as u64;
                let epoch = counter / len as u64;
                let r = (counter % len as u64) as usize;
                let perm = substream(self.cfg.train.seed, "epoch", epoch).permutation(len);
                perm[r]
            })
            .collect()
    }

    fn augmented(&self, item: &TileItem, counter: u64) -> TileItem {
        if !self.cfg.train.augment {
            return item.clone();
        }
        let mut rng = substream(self.cfg.train.seed, "aug", counter);
        let fh = rng.uniform() < 0.5;
        let fv = rng.uniform() < 0.5;
        if !fh && !fv {
            return item.clone();
        }
        let t = self.cfg.model.tile_size;
        TileItem {
            name: item.name.clone(),
            img_t1: flip_image(&item.img_t1, 3, t, t, fh, fv),
            img_t2: flip_image(&item.img_t2, 3, t, t, fh, fv),
            label: flip_image(&item.label, 1, t, t, fh, fv),
        }
    }

    /// One optimization step over a deterministic batch.
    pub fn train_step(&mut self, dataset: &TileDataset) -> Result<StepRecord> {
        if dataset.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let t = self.cfg.model.tile_size;
        if dataset.tile != t {
            return Err(Error::Data(format!(
                "dataset tiles are {} but the model expects {t}",
                dataset.tile
            )));
        }
        let b = self.cfg.train.batch_size.max(1);
        let indices = self.batch_indices(self.step, dataset.len());
        let mut g = Graph::new();
        let mut total = None;
        let mut agg = LossBreakdown::default();
        for (k, &idx) in indices.iter().enumerate() {
            let counter = self.step * b as u64 + k as u64;
            let item = self.augmented(&dataset.items[idx], counter);
            let t1 = g.constant(Model::image_tensor(&item.img_t1, t, t)?);
            let t2 = g.constant(Model::image_tensor(&item.img_t2, t, t)?);
            let out = self.model.forward_tile(&mut g, t1, t2)?;
            let (loss, bd) = self
                .model
                .tile_loss(&mut g, &out, &item.label, &self.cfg.train.weights)?;
            agg.cls += bd.cls;
            agg.bce += bd.bce;
            agg.dice += bd.dice;
            total = Some(match total {
                Some(acc) => g.add(acc, loss)?,
                None => loss,
            });
        }
        let total = g.scale(total.unwrap(), 1.0 / b as f64);
        let lr = cosine_lr(
            self.step as usize,
            self.cfg.train.steps,
            self.cfg.train.lr,
            self.cfg.train.lr_floor,
        );
        self.model.store.zero_grads();
        g.backward(total, &mut self.model.store)?;
        let loss_value = g.data(total)[0];
        drop(g);
        self.model
            .store
            .adam_step(lr, self.cfg.train.beta1, self.cfg.train.beta2, 1e-8)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            total: loss_value,
            cls: agg.cls / b as f64,
            bce: agg.bce / b as f64,
            dice: agg.dice / b as f64,
        })
    }
}

/// Accumulated confusion counts of a whole dataset under a model.
pub fn evaluate_counts(model: &Model, ds: &TileDataset) -> Result<ConfusionCounts> {
    if ds.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let mut counts = ConfusionCounts::default();
    for item in &ds.items {
        let map = model.predict_item(item)?;
        let c = confusion_counts(&map.labels, &item.label)?;
        counts.add(&c);
    }
    Ok(counts)
}

pub fn evaluate_dataset(model: &Model, ds: &TileDataset) -> Result<MetricReport> {
    Ok(compute_metrics(&evaluate_counts(model, ds)?))
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(TileDataset, Option<TileDataset>)> {
    if cfg.data.synthetic {
        let t = cfg.model.tile_size;
        let train = TileDataset::synthetic(
            cfg.train.seed,
            &cfg.data.train_split,
            t,
            cfg.data.synthetic_train_tiles,
            cfg.data.synthetic_shapes,
        );
        let val = if cfg.data.synthetic_val_tiles > 0 {
            Some(TileDataset::synthetic(
                cfg.train.seed,
                &cfg.data.val_split,
                t,
                cfg.data.synthetic_val_tiles,
                cfg.data.synthetic_shapes,
            ))
        } else {
            None
        };
        Ok((train, val))
    } else {
        let root = cfg.data.root.as_ref().ok_or_else(|| {
            Error::Config("data.root is required unless data.synthetic is set".into())
        })?;
        let train = load_tile_dataset(root, &cfg.data.train_split, cfg.data.lenient_labels)?;
        let val = match load_tile_dataset(root, &cfg.data.val_split, cfg.data.lenient_labels) {
            Ok(ds) => Some(ds),
            Err(_) => None,
        };
        Ok((train, val))
    }
}

pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub final_metrics: Option<MetricReport>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Run (or resume) training into a run directory: writes config.toml,
/// loss.jsonl, periodic and final checkpoints, and metrics.json when a
/// validation split exists.
pub fn run_training(
    cfg: &RunConfig,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(run_dir)?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml())?;

    let (train_set, val_set) = load_datasets(cfg)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            Trainer::resume(cfg, &ckpt)?
        }
        None => Trainer::new(cfg)?,
    };

    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(run_dir.join("loss.jsonl"))?;

    let mut records = Vec::new();
    let mut last_checkpoint = None;
    while (trainer.step as usize) < cfg.train.steps {
        let rec = trainer.train_step(&train_set)?;
        if cfg.train.log_every > 0 && rec.step % cfg.train.log_every as u64 == 0 {
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())?;
        }
        let at_checkpoint = cfg.train.checkpoint_every > 0
            && rec.step % cfg.train.checkpoint_every as u64 == 0;
        let finished = trainer.step as usize >= cfg.train.steps;
        if at_checkpoint || finished {
            let path = run_dir.join(format!("ckpt-{:06}.mkcd", rec.step));
            trainer.checkpoint().save(&path)?;
            if finished {
                trainer.checkpoint().save(&run_dir.join("last.mkcd"))?;
            }
            last_checkpoint = Some(path);
        }
        records.push(rec);
    }
    log.flush()?;

    let final_metrics = match &val_set {
        Some(val) => {
            let report = evaluate_dataset(&trainer.model, val)?;
            std::fs::write(
                run_dir.join("metrics.json"),
                serde_json::to_string_pretty(&report).unwrap(),
            )?;
            Some(report)
        }
        None => None,
    };

    Ok(TrainSummary {
        records,
        final_metrics,
        last_checkpoint,
    })
}
