//! The training loop.
//!
//! Each sample gets its own tape. Per-sample gradients are summed in
//! ascending id order and divided by the batch size, so a step depends only
//! on the set of samples in the batch and not on their order or on how many
//! worker threads computed them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{apply_checkpoint, load_named, save_checkpoint, save_named};
use super::optim::{sgd_step, total_iterations, OptimizerState, DESK_BASE_LR, DEFAULT_MOMENTUM, DEFAULT_POLY_POWER};
use crate::data::augment::{apply, resize_only, sample_rng, AugmentDraw};
use crate::data::{mix64, AugmentConfig, Sample};
use crate::loss::{total_loss, LossBreakdown, DEFAULT_LAMBDAS};
use crate::model::{BaNet, ModelConfig};
use crate::params::ParameterStore;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambdas: [f64; 4],
    /// Save the checkpoint every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    /// Threads computing per-sample gradients. Results do not depend on it.
    pub workers: usize,
    /// Random augmentation on; otherwise samples are only resized.
    pub augment_enabled: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            seed: 7,
            lambdas: DEFAULT_LAMBDAS,
            checkpoint_every: 1,
            base_lr: DESK_BASE_LR,
            momentum: DEFAULT_MOMENTUM,
            poly_power: DEFAULT_POLY_POWER,
            workers: 1,
            augment_enabled: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.epochs == 0 {
            return Err(Error::Invalid("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("train.batch_size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Invalid("train.workers must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Invalid("train.checkpoint_every must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Invalid("train.base_lr must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("train.momentum must be in [0, 1)".into()));
        }
        if self.augment.out_size % 8 != 0 {
            return Err(Error::Invalid(format!(
                "augment out_size {} must be divisible by 8",
                self.augment.out_size
            )));
        }
        self.augment.validate()?;
        Ok(())
    }
}

pub const LOG_HEADER: &str = "epoch,iter,lr,loss_decoder,loss_edge_1,loss_edge_2,loss_edge_3,loss_edge_4,loss_seg_1,loss_seg_2,loss_seg_3,loss_seg_4,loss_total";
pub const TIMING_HEADER: &str = "epoch,seconds";

pub const CHECKPOINT_FILE: &str = "checkpoint.banc";
pub const OPTIMIZER_FILE: &str = "optimizer.banc";
pub const STATE_FILE: &str = "train_state.txt";
pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";

/// One row of the training log: mean per-sample losses over the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    /// Learning rate at `iter`.
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        let mut s = format!("{},{},{}", self.epoch, self.iter, self.lr);
        for v in std::iter::once(l.decoder)
            .chain(l.stage_edge)
            .chain(l.stage_seg)
            .chain(std::iter::once(l.total))
        {
            write!(s, ",{v}").unwrap();
        }
        s
    }

    /// Parse a row written by [`EpochRecord::csv_row`].
    pub fn parse(row: &str, lambdas: [f64; 4]) -> Result<EpochRecord, Error> {
        let bad = || Error::Invalid(format!("malformed training log row: {row}"));
        let f: Vec<&str> = row.trim().split(',').collect();
        if f.len() != 13 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            iter: f[1].parse().map_err(|_| bad())?,
            lr: num(2)?,
            loss: LossBreakdown {
                decoder: num(3)?,
                stage_edge: [num(4)?, num(5)?, num(6)?, num(7)?],
                stage_seg: [num(8)?, num(9)?, num(10)?, num(11)?],
                lambdas,
                total: num(12)?,
            },
        })
    }
}

/// Parse a whole training log.
pub fn read_log(path: &Path, lambdas: [f64; 4]) -> Result<Vec<EpochRecord>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Invalid(format!("{}: unexpected log header", path.display())));
    }
    lines.map(|l| EpochRecord::parse(l, lambdas)).collect()
}

fn tensor_error(e: TensorError, id: &str) -> Error {
    match e {
        TensorError::NonFinite { op, node } => Error::NonFinite {
            what: "activation",
            name: format!("output of {op} (tape node {node}) on sample {id}"),
        },
        other => Error::Tensor(other),
    }
}

/// Parameters, optimizer state and progress of one run.
pub struct Trainer {
    net: BaNet,
    store: ParameterStore<f32>,
    optim: OptimizerState<f32>,
    cfg: TrainConfig,
    epochs_done: usize,
    iter: usize,
}

impl Trainer {
    /// Fresh model initialised from `cfg.seed`, scheduled for `n_samples`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, n_samples: usize) -> Result<Trainer, Error> {
        cfg.validate()?;
        if n_samples == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0x1417));
        let mut store = ParameterStore::new();
        let net = BaNet::new(model_cfg, &mut store, &mut rng)?;
        let total = total_iterations(cfg.epochs, n_samples, cfg.batch_size);
        let optim = OptimizerState::new(&store, cfg.momentum, cfg.base_lr, cfg.poly_power, total);
        Ok(Trainer {
            net,
            store,
            optim,
            cfg: cfg.clone(),
            epochs_done: 0,
            iter: 0,
        })
    }

    pub fn net(&self) -> &BaNet {
        &self.net
    }

    pub fn store(&self) -> &ParameterStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<f32> {
        &mut self.store
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.optim
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn iterations_done(&self) -> usize {
        self.iter
    }

    /// The sample as the network sees it in `epoch`.
    pub fn prepare(&self, sample: &Sample, epoch: usize) -> Result<Sample, Error> {
        let a = &self.cfg.augment;
        let out = if self.cfg.augment_enabled {
            let mut rng = sample_rng(a.seed, epoch, &sample.id);
            let draw = AugmentDraw::sample(a, &mut rng);
            apply(sample, &draw, a.out_size, a.edge_width)?
        } else {
            resize_only(sample, a.out_size, a.edge_width)?
        };
        Ok(out)
    }

    /// Loss and parameter gradients of one (already prepared) sample.
    pub fn sample_gradients(&self, sample: &Sample) -> Result<(Vec<Tensor<f32>>, LossBreakdown), Error> {
        let id = sample.id.as_str();
        let mut tape = Tape::<f32>::new();
        let params = self.store.bind(&mut tape);
        let image = tape.constant(sample.image.clone());
        let seg = tape.constant(sample.seg_mask.clone());
        let edge = tape.constant(sample.edge_mask.clone());
        let out = self.net.forward(&mut tape, &params, image).map_err(|e| tensor_error(e, id))?;
        let (loss, breakdown) = total_loss(&mut tape, &out, seg, edge, self.cfg.lambdas).map_err(|e| tensor_error(e, id))?;
        tape.backward(loss).map_err(|e| tensor_error(e, id))?;
        let grads = self.store.collect_grads(&tape, &params)?;
        for (g, pid) in grads.iter().zip(self.store.ids()) {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: format!("{} on sample {id}", self.store.name(pid)),
                });
            }
        }
        Ok((grads, breakdown))
    }

    fn batch_gradients(&self, batch: &[&Sample], epoch: usize) -> Result<Vec<(Vec<Tensor<f32>>, LossBreakdown)>, Error> {
        let work = |s: &Sample| self.prepare(s, epoch).and_then(|p| self.sample_gradients(&p));
        if self.cfg.workers <= 1 || batch.len() <= 1 {
            return batch.iter().map(|s| work(s)).collect();
        }
        let workers = self.cfg.workers.min(batch.len());
        let chunk = batch.len().div_ceil(workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| work(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    }

    /// One optimizer step on `batch`. Returns the sum of per-sample losses.
    pub fn step(&mut self, batch: &[&Sample], epoch: usize) -> Result<LossBreakdown, Error> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut ordered: Vec<&Sample> = batch.to_vec();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let results = self.batch_gradients(&ordered, epoch)?;

        let mut loss_sum = LossBreakdown::zero(self.cfg.lambdas);
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for (grads, loss) in results {
            loss_sum.accumulate(&loss);
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g)?;
                    }
                }
            }
        }
        let mut grads = sum.expect("batch is non-empty");
        let inv = 1.0 / ordered.len() as f32;
        for g in &mut grads {
            g.scale_in_place(inv);
        }
        let lr = self.optim.lr(self.iter)?;
        self.store.set_grads(grads)?;
        sgd_step(&mut self.store, &mut self.optim, lr)?;
        self.iter += 1;
        for id in self.store.ids() {
            if !self.store.value(id).is_finite() {
                return Err(Error::NonFinite {
                    what: "parameter",
                    name: self.store.name(id).to_string(),
                });
            }
        }
        Ok(loss_sum)
    }

    /// Visiting order of sample indices in `epoch` (1-based).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix64(self.cfg.seed, epoch as u64)));
        order
    }

    /// Train one epoch over `data`.
    pub fn run_epoch(&mut self, data: &[Sample]) -> Result<EpochRecord, Error> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(data.len(), epoch);
        let mut total = LossBreakdown::zero(self.cfg.lambdas);
        for idx in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            total.accumulate(&self.step(&batch, epoch)?);
        }
        self.epochs_done = epoch;
        let loss = total.scaled(1.0 / data.len() as f64);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite {
                what: "loss",
                name: format!("epoch {epoch} total"),
            });
        }
        Ok(EpochRecord {
            epoch,
            iter: self.iter,
            lr: self.optim.lr(self.iter)?,
            loss,
        })
    }

    fn save_state(&self, dir: &Path) -> Result<(), Error> {
        save_checkpoint(&self.store, &dir.join(CHECKPOINT_FILE))?;
        let velocities: Vec<(&str, &Tensor<f32>)> = self
            .store
            .ids()
            .map(|id| (self.store.name(id), &self.optim.velocities[id.index()]))
            .collect();
        save_named(&velocities, &dir.join(OPTIMIZER_FILE))?;
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        let state = format!("epochs_done={}\niter={}\n", self.epochs_done, self.iter);
        std::fs::write(&tmp, state).map_err(|e| Error::io(&tmp, e))?;
        let dst = dir.join(STATE_FILE);
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    /// Continue a run saved in `dir`.
    pub fn resume(model_cfg: &ModelConfig, cfg: &TrainConfig, n_samples: usize, dir: &Path) -> Result<Trainer, Error> {
        let mut t = Trainer::new(model_cfg, cfg, n_samples)?;
        let state_path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let field = |key: &str| -> Result<usize, Error> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Invalid(format!("{}: missing {key}", state_path.display())))
        };
        t.epochs_done = field("epochs_done")?;
        t.iter = field("iter")?;
        if t.iter > t.optim.total_iters || t.epochs_done > cfg.epochs {
            return Err(Error::Invalid(format!(
                "{}: saved progress exceeds the configured schedule",
                state_path.display()
            )));
        }
        apply_checkpoint(&mut t.store, load_named(&dir.join(CHECKPOINT_FILE))?)?;
        let mut velocities = t.store.clone();
        apply_checkpoint(&mut velocities, load_named(&dir.join(OPTIMIZER_FILE))?)?;
        t.optim.velocities = velocities.ids().map(|id| velocities.value(id).clone()).collect();
        Ok(t)
    }

    /// Train the remaining epochs, writing the log, timings and checkpoints
    /// into `dir`. `on_epoch` sees every finished epoch.
    pub fn fit(
        &mut self,
        data: &[Sample],
        dir: &Path,
        mut on_epoch: impl FnMut(&EpochRecord, f64),
    ) -> Result<Vec<EpochRecord>, Error> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join(LOG_FILE);
        let timing_path = dir.join(TIMING_FILE);
        let mut records = if self.epochs_done > 0 {
            let mut r = read_log(&log_path, self.cfg.lambdas)?;
            r.truncate(self.epochs_done);
            r
        } else {
            Vec::new()
        };
        let mut timings = if self.epochs_done > 0 {
            read_timings(&timing_path).unwrap_or_default()
        } else {
            Vec::new()
        };
        timings.truncate(self.epochs_done);
        while self.epochs_done < self.cfg.epochs {
            let start = Instant::now();
            let rec = self.run_epoch(data)?;
            let secs = start.elapsed().as_secs_f64();
            records.push(rec);
            timings.push((rec.epoch, secs));
            write_log(&log_path, &records)?;
            write_timings(&timing_path, &timings)?;
            if rec.epoch % self.cfg.checkpoint_every == 0 || rec.epoch == self.cfg.epochs {
                self.save_state(dir)?;
            }
            on_epoch(&rec, secs);
        }
        Ok(records)
    }
}

fn write_log(path: &Path, records: &[EpochRecord]) -> Result<(), Error> {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_timings(path: &Path, rows: &[(usize, f64)]) -> Result<(), Error> {
    let mut s = format!("{TIMING_HEADER}\n");
    for (e, t) in rows {
        writeln!(s, "{e},{t:.3}").unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_timings(path: &Path) -> Option<Vec<(usize, f64)>> {
    let text = std::fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (e, t) = l.split_once(',')?;
            Some((e.parse().ok()?, t.parse().ok()?))
        })
        .collect()
}

/// Files produced by a run directory.
pub fn run_files(dir: &Path) -> [PathBuf; 5] {
    [CHECKPOINT_FILE, OPTIMIZER_FILE, STATE_FILE, LOG_FILE, TIMING_FILE].map(|f| dir.join(f))
}
