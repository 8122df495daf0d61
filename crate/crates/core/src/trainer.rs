//! Multi-loss training loop: augmentation, forward over all scales, summed
//! loss, backward and one Adam step per mini-batch.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{compose, AugmentConfig};
use crate::checkpoint;
use crate::consensus::ConsensusNet;
use crate::dataset::{BatchSampler, PersonImageRecord};
use crate::error::{Error, Result};
use crate::image::{to_batch, ImageBuffer};
use crate::layers::Module;
use crate::optim::AdamConfig;
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every_epochs: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub log_path: Option<PathBuf>,
    /// Augment inline on the training thread and log zero wall time, so that
    /// logs and checkpoints are byte-identical across runs.
    pub deterministic: bool,
    pub lr_decay: Option<StepDecay>,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 80,
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 10,
            log_path: None,
            deterministic: false,
            lr_decay: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        if let Some(d) = self.lr_decay {
            if d.every_epochs == 0 || !(d.factor > 0.0) {
                return bad("lr_decay needs every_epochs >= 1 and a positive factor");
            }
        }
        self.augment.validate()
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        let lr = match self.lr_decay {
            Some(d) => self.lr * d.factor.powi((epoch / d.every_epochs) as i32),
            None => self.lr,
        };
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub total_loss: f64,
    pub branch_losses: Vec<f64>,
    pub consensus_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochStats>,
}

impl TrainLog {
    pub fn header(branches: usize) -> String {
        let mut h = String::from("epoch,total_loss");
        for s in 1..=branches {
            h.push_str(&format!(",branch_loss_{s}"));
        }
        h.push_str(",consensus_loss,seconds");
        h
    }

    pub fn csv_row(row: &EpochStats) -> String {
        let mut line = format!("{},{}", row.epoch, row.total_loss);
        for b in &row.branch_losses {
            line.push_str(&format!(",{b}"));
        }
        line.push_str(&format!(",{},{:.3}", row.consensus_loss, row.seconds));
        line
    }

    pub fn to_csv(&self, branches: usize) -> String {
        let mut out = Self::header(branches);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::csv_row(r));
            out.push('\n');
        }
        out
    }
}

/// Mini-batch images, one tensor per scale, plus class labels.
pub struct Batch<E: Element> {
    pub images: Vec<Tensor<E>>,
    pub labels: Vec<usize>,
}

fn augmentation_rng(root: &Rng, epoch: usize, record: usize) -> Rng {
    root.split(&format!("augment/{epoch}/{record}"))
}

fn shuffle_rng(root: &Rng, epoch: usize) -> Rng {
    root.split_indexed("shuffle", epoch as u64)
}

/// Augmented copies of the batch's images, grouped per scale.
fn augment_batch(
    records: &[PersonImageRecord],
    indices: &[usize],
    cfg: &AugmentConfig,
    scales: &[(usize, usize)],
    root: &Rng,
    epoch: usize,
) -> Vec<Vec<ImageBuffer>> {
    let mut per_scale = vec![Vec::with_capacity(indices.len()); scales.len()];
    for &i in indices {
        let outs = compose(&records[i].image, cfg, scales, &augmentation_rng(root, epoch, i));
        for (s, img) in outs.into_iter().enumerate() {
            per_scale[s].push(img);
        }
    }
    per_scale
}

fn stack<E: Element>(per_scale: &[Vec<ImageBuffer>]) -> Result<Vec<Tensor<E>>> {
    per_scale
        .iter()
        .map(|imgs| to_batch(&imgs.iter().collect::<Vec<_>>()))
        .collect()
}

/// One forward/backward/update on a prepared batch; returns the `m + 1` loss
/// components followed by the total.
pub fn train_step<E: Element>(
    net: &mut ConsensusNet<E>,
    batch: &Batch<E>,
    adam: &AdamConfig,
    epoch: usize,
    batch_index: usize,
) -> Result<Vec<f64>> {
    let loss = net.forward(&batch.images)?.total_loss(&batch.labels)?;
    let mut components = loss.branch_values();
    components.push(loss.consensus_value());
    components.push(loss.value());
    if components.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            epoch,
            batch: batch_index,
            components,
        });
    }
    loss.total.backward()?;
    drop(loss);
    for p in net.parameters_mut() {
        p.adam_step(adam)?;
    }
    net.zero_grad();
    Ok(components)
}

/// Runs one epoch (0-based `epoch`) and returns mean losses over its batches.
pub fn train_epoch<E: Element>(
    net: &mut ConsensusNet<E>,
    records: &[PersonImageRecord],
    sampler: &BatchSampler,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let start = Instant::now();
    let root = Rng::new(cfg.seed);
    let batches = sampler.epoch(&mut shuffle_rng(&root, epoch));
    let scales = net.config.scales.clone();
    let m = scales.len();
    let adam = cfg.adam(epoch);
    let mut sums = vec![0.0; m + 2];

    let mut step = |net: &mut ConsensusNet<E>, b: usize, per_scale: Vec<Vec<ImageBuffer>>| -> Result<()> {
        let batch = Batch {
            images: stack::<E>(&per_scale)?,
            labels: batches[b].iter().map(|&i| sampler.label(i)).collect(),
        };
        let comps = train_step(net, &batch, &adam, epoch + 1, b)?;
        for (s, c) in sums.iter_mut().zip(comps) {
            *s += c;
        }
        Ok(())
    };

    if cfg.deterministic {
        for (b, idx) in batches.iter().enumerate() {
            let per_scale = augment_batch(records, idx, &cfg.augment, &scales, &root, epoch);
            step(net, b, per_scale)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = sync_channel(2);
            let (aug, sc, rt, bs) = (&cfg.augment, &scales, &root, &batches);
            scope.spawn(move || {
                for idx in bs {
                    if tx.send(augment_batch(records, idx, aug, sc, rt, epoch)).is_err() {
                        break;
                    }
                }
            });
            for (b, per_scale) in rx.iter().enumerate() {
                step(net, b, per_scale)?;
            }
            Ok(())
        })?;
    }

    let n = batches.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    Ok(EpochStats {
        epoch: epoch + 1,
        total_loss: means[m + 1],
        branch_losses: means[..m].to_vec(),
        consensus_loss: means[m],
        seconds: if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        },
    })
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"")?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Trains from `start_epoch` (epochs already completed) up to `cfg.epochs`,
/// appending to the CSV log and writing checkpoints every
/// `cfg.checkpoint_every` epochs and after the last one.
pub fn fit<E: Element>(
    net: &mut ConsensusNet<E>,
    records: &[PersonImageRecord],
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<TrainLog> {
    cfg.validate()?;
    let sampler = BatchSampler::new(records, cfg.batch_size)?;
    if sampler.num_classes() != net.config.n_id {
        return Err(Error::Config(format!(
            "training data has {} identities but the model classifies {}",
            sampler.num_classes(),
            net.config.n_id
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        ensure_writable(dir)?;
    }
    let branches = net.config.num_branches();
    let mut log_file = match &cfg.log_path {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            // rows from epochs after the checkpoint are about to be redone
            let kept: Vec<String> = if start_epoch > 0 && path.exists() {
                fs::read_to_string(path)?
                    .lines()
                    .skip(1)
                    .filter(|row| {
                        row.split(',')
                            .next()
                            .and_then(|e| e.parse::<usize>().ok())
                            .is_some_and(|e| e <= start_epoch)
                    })
                    .map(str::to_owned)
                    .collect()
            } else {
                Vec::new()
            };
            let mut f = fs::File::create(path)?;
            writeln!(f, "{}", TrainLog::header(branches))?;
            for row in kept {
                writeln!(f, "{row}")?;
            }
            Some(f)
        }
        None => None,
    };

    let mut log = TrainLog::default();
    for epoch in start_epoch..cfg.epochs {
        let stats = train_epoch(net, records, &sampler, cfg, epoch)?;
        log::info!(
            "epoch {:>3}  loss {:.4}  consensus {:.4}  {:.1}s",
            stats.epoch,
            stats.total_loss,
            stats.consensus_loss,
            stats.seconds
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", TrainLog::csv_row(&stats))?;
            f.flush()?;
        }
        log.rows.push(stats);
        let done = epoch + 1;
        if let Some(dir) = &cfg.checkpoint_dir {
            if done % cfg.checkpoint_every == 0 || done == cfg.epochs {
                checkpoint::save(&checkpoint_path(dir, done), net, cfg.seed, done as u64)?;
            }
        }
    }
    Ok(log)
}

/// Fresh model for `records` under `model` config, seeded from `cfg.seed`.
pub fn init_model<E: Element>(
    model: &crate::consensus::ConsensusConfig,
    cfg: &TrainConfig,
) -> Result<ConsensusNet<E>> {
    ConsensusNet::new(model, &Rng::new(cfg.seed))
}

/// Continues training from a checkpoint written by [`fit`].
pub fn resume<E: Element>(
    checkpoint: &Path,
    records: &[PersonImageRecord],
    cfg: &TrainConfig,
) -> Result<(ConsensusNet<E>, TrainLog)> {
    let ck = checkpoint::load::<E>(checkpoint)?;
    if ck.header.seed != cfg.seed {
        log::warn!(
            "checkpoint was trained with seed {}, resuming with seed {}",
            ck.header.seed,
            cfg.seed
        );
    }
    let mut net = ck.net;
    let log = fit(&mut net, records, cfg, ck.epochs_completed as usize)?;
    Ok((net, log))
}
