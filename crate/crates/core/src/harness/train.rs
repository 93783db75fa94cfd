use super::checkpoint::save_checkpoint;
use super::model::{frame_input, load_split, Model, SplitData};
use super::{lr_schedule, ExperimentConfig, HarnessError};
use crate::nn::Adam;
use crate::objectives::{evaluate_objective, LossBreakdown, RandomConvExtractor};
use crate::person::PoseMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Seed of the frozen perceptual feature extractor (shared by every run so losses compare).
pub const EXTRACTOR_SEED: u64 = 0x0005_eed0_f00d;
const INITIAL_LOSS_SCALE: f64 = 65536.0;
const LOSS_SCALE_GROWTH_INTERVAL: usize = 2000;

/// Running sums for the epoch in progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct EpochAccumulator {
    losses: LossBreakdown,
    garment_l1: f64,
    samples: usize,
    data_seconds: f64,
    compute_seconds: f64,
    steps: usize,
    skipped_steps: usize,
    peak_input_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Per-sample means over the epoch.
    pub losses: LossBreakdown,
    /// Mean absolute error of the final frame inside the garment mask.
    pub garment_l1: f64,
    pub samples: usize,
    /// Time spent turning cached annotations into network inputs.
    pub data_seconds: f64,
    /// Time spent in forward/backward passes and optimizer updates.
    pub compute_seconds: f64,
    pub steps: usize,
    /// Optimizer steps dropped because scaled gradients overflowed.
    pub skipped_steps: usize,
    /// Largest micro-batch of network inputs, in bytes.
    pub peak_input_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub losses: LossBreakdown,
}

/// Resumable progress. The data order of an epoch is a pure function of the seed and the epoch
/// index, so no generator state needs saving beyond the position within the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub step: usize,
    pub loss_scale: f64,
    pub good_steps: usize,
    pub history: Vec<StepRecord>,
    pub epochs: Vec<EpochStats>,
    current: EpochAccumulator,
}

impl Default for TrainState {
    fn default() -> Self {
        Self {
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            loss_scale: INITIAL_LOSS_SCALE,
            good_steps: 0,
            history: Vec::new(),
            epochs: Vec::new(),
            current: EpochAccumulator::default(),
        }
    }
}

pub struct Trainer<T: Scalar> {
    pub cfg: ExperimentConfig,
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub state: TrainState,
    pub data: SplitData<T>,
    mode: PoseMode,
    extractor: RandomConvExtractor<T>,
    loss_log: Option<BufWriter<File>>,
    /// Master weights rounded to binary16 for the forward pass.
    half_params: Option<Vec<T>>,
}

pub const LOSS_CSV_HEADER: &str = "step,l1,mask,perceptual,flow_pen,total";

fn create_dir(path: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: builds the model, loads the training split, and starts `losses.csv`.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let model = Model::build(&cfg)?;
        let mut trainer = Self::with_model(cfg, model, Adam::new(0), TrainState::default())?;
        trainer.adam = Adam::new(trainer.model.params.len());
        trainer.open_log(false)?;
        Ok(trainer)
    }

    /// Continue from a checkpoint, appending to the existing loss log.
    pub fn resume(checkpoint: &Path, out_dir: Option<PathBuf>) -> Result<Self, HarnessError> {
        let ckpt = super::load_checkpoint::<T>(checkpoint)?;
        let mut cfg = ckpt.header.config.clone();
        if let Some(dir) = out_dir {
            cfg.out_dir = dir;
        }
        let model = ckpt.to_model()?;
        let state = ckpt.header.state.clone();
        let mut trainer = Self::with_model(cfg, model, ckpt.adam, state)?;
        trainer.open_log(true)?;
        Ok(trainer)
    }

    fn with_model(cfg: ExperimentConfig, mut model: Model<T>, adam: Adam<T>, state: TrainState) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let data = load_split::<T>(&cfg.dataset, cfg.split, cfg.pose_mode, cfg.flow)?;
        let mode = cfg.pose_mode_for(data.manifest.frame_size.height);
        model.net.half_precision = cfg.mixed_precision;
        create_dir(&cfg.out_dir.join("checkpoints"))?;
        let config_path = cfg.out_dir.join("config.txt");
        std::fs::write(&config_path, cfg.to_text()).map_err(|e| HarnessError::io(&config_path, e))?;
        let mut trainer = Self {
            extractor: RandomConvExtractor::new(3, EXTRACTOR_SEED),
            cfg,
            model,
            adam,
            state,
            data,
            mode,
            loss_log: None,
            half_params: None,
        };
        trainer.refresh_half_params();
        Ok(trainer)
    }

    fn open_log(&mut self, append: bool) -> Result<(), HarnessError> {
        let path = self.cfg.out_dir.join("losses.csv");
        let exists = path.exists();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| HarnessError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        if !append || !exists {
            writeln!(w, "{LOSS_CSV_HEADER}").map_err(|e| HarnessError::io(&path, e))?;
        }
        self.loss_log = Some(w);
        Ok(())
    }

    fn refresh_half_params(&mut self) {
        self.half_params = self.cfg.mixed_precision.then(|| self.model.params.iter().map(|p| p.round_half()).collect());
    }

    pub fn pose_mode(&self) -> PoseMode {
        self.mode
    }

    /// Shuffled (video, frame) pairs visited in `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<(usize, usize)> {
        let mut order = self.data.manifest.frame_index();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.total_frames().div_ceil(self.cfg.accumulated_batch)
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One optimizer step over one accumulated batch. Returns `None` once training is complete.
    pub fn step(&mut self) -> Result<Option<LossBreakdown>, HarnessError> {
        if self.is_finished() {
            return Ok(None);
        }
        let epoch = self.state.epoch;
        let order = self.epoch_order(epoch);
        let start = self.state.batch_in_epoch * self.cfg.accumulated_batch;
        let batch: Vec<(usize, usize)> = order[start..(start + self.cfg.accumulated_batch).min(order.len())].to_vec();
        let lr = lr_schedule(epoch, &self.cfg);
        let scale = if self.cfg.mixed_precision { self.state.loss_scale } else { 1.0 };

        let mut grads = vec![T::zero(); self.model.params.len()];
        let mut sum = LossBreakdown::default();
        let mut garment_l1 = 0.0;
        let params: &[T] = self.half_params.as_deref().unwrap_or(&self.model.params);
        for micro in batch.chunks(self.cfg.micro_batch) {
            let t0 = Instant::now();
            let inputs = micro
                .iter()
                .map(|&(v, t)| frame_input(&self.data.videos[v], t, self.mode))
                .collect::<Result<Vec<_>, _>>()?;
            let bytes: usize = inputs.iter().map(|(x, _)| x.byte_len()).sum();
            self.state.current.peak_input_bytes = self.state.current.peak_input_bytes.max(bytes);
            self.state.current.data_seconds += t0.elapsed().as_secs_f64();

            let t1 = Instant::now();
            for (&(v, t), (input, warped)) in micro.iter().zip(&inputs) {
                let video = &self.data.videos[v];
                // Detached previous output: the network's own composition of frame t-1.
                let prev = if self.model.flow_head.is_some() && t > 0 {
                    let (pi, pw) = frame_input(video, t - 1, self.mode)?;
                    let prev_out = self.model.net.forward(params, &pi, &pw)?.output.composed;
                    Some((prev_out, &self.data.flows[v][t - 1]))
                } else {
                    None
                };
                let pass = self.model.forward_frame(params, input, warped, prev.as_ref().map(|(p, f)| (p, *f)))?;
                let target = &video.frames[t];
                let garment = &video.garment_masks[t];
                let loss = evaluate_objective(
                    &self.cfg.loss_weights,
                    &self.extractor,
                    pass.final_frame(),
                    target,
                    &pass.tryon.output.mask,
                    garment,
                    pass.flow_mask(),
                )?;
                if !loss.breakdown.all_finite() {
                    return Err(self.nan_abort(&batch, (v, t), &loss.breakdown));
                }
                debug_assert!(loss.breakdown.is_consistent(&self.cfg.loss_weights));
                sum.accumulate(&loss.breakdown);
                garment_l1 += masked_l1(pass.final_frame(), target, garment);
                let s = T::lit(scale);
                let d_final = loss.d_frame.map(|g| g * s);
                let d_mask = loss.d_mask.map(|g| g * s);
                let d_fm = loss.d_flow_mask.map(|d| d.map(|g| g * s));
                self.model.backward_frame(params, &pass, &d_final, &d_mask, d_fm.as_ref(), &mut grads);
            }
            self.state.current.compute_seconds += t1.elapsed().as_secs_f64();
        }

        let t2 = Instant::now();
        let n = batch.len() as f64;
        let mean = sum.scaled(1.0 / n);
        let inv = T::lit(1.0 / (n * scale));
        grads.iter_mut().for_each(|g| *g *= inv);
        let overflow = grads.iter().any(|g| !g.is_finite());
        if overflow && !self.cfg.mixed_precision {
            return Err(self.nan_abort(&batch, batch[0], &mean));
        }
        if overflow {
            self.state.loss_scale /= 2.0;
            self.state.good_steps = 0;
            self.state.current.skipped_steps += 1;
        } else {
            self.adam.update(&mut self.model.params, &grads, lr);
            self.refresh_half_params();
            if self.cfg.mixed_precision {
                self.state.good_steps += 1;
                if self.state.good_steps == LOSS_SCALE_GROWTH_INTERVAL {
                    self.state.loss_scale *= 2.0;
                    self.state.good_steps = 0;
                }
            }
        }
        self.state.current.compute_seconds += t2.elapsed().as_secs_f64();

        self.state.step += 1;
        self.state.history.push(StepRecord { step: self.state.step, losses: mean });
        self.log_step(&mean)?;
        let acc = &mut self.state.current;
        acc.losses.accumulate(&sum);
        acc.garment_l1 += garment_l1;
        acc.samples += batch.len();
        acc.steps += 1;

        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch == self.batches_per_epoch() {
            self.finish_epoch(lr)?;
        }
        Ok(Some(mean))
    }

    fn log_step(&mut self, l: &LossBreakdown) -> Result<(), HarnessError> {
        let path = self.cfg.out_dir.join("losses.csv");
        if let Some(w) = &mut self.loss_log {
            writeln!(w, "{},{},{},{},{},{}", self.state.step, l.l1, l.mask, l.perceptual, l.flow_pen, l.total)
                .and_then(|_| w.flush())
                .map_err(|e| HarnessError::io(&path, e))?;
        }
        Ok(())
    }

    fn finish_epoch(&mut self, lr: f64) -> Result<(), HarnessError> {
        let acc = std::mem::take(&mut self.state.current);
        let n = acc.samples.max(1) as f64;
        self.state.epochs.push(EpochStats {
            epoch: self.state.epoch,
            lr,
            losses: acc.losses.scaled(1.0 / n),
            garment_l1: acc.garment_l1 / n,
            samples: acc.samples,
            data_seconds: acc.data_seconds,
            compute_seconds: acc.compute_seconds,
            steps: acc.steps,
            skipped_steps: acc.skipped_steps,
            peak_input_bytes: acc.peak_input_bytes,
        });
        self.state.epoch += 1;
        self.state.batch_in_epoch = 0;
        self.write_epoch_log()?;
        let path = self.cfg.out_dir.join(format!("checkpoints/epoch_{:02}.ckpt", self.state.epoch));
        self.save_checkpoint(&path)
    }

    fn write_epoch_log(&self) -> Result<(), HarnessError> {
        let mut s = String::from(
            "epoch,lr,l1,mask,perceptual,flow_pen,total,garment_l1,data_seconds,compute_seconds,steps,skipped_steps,peak_input_bytes\n",
        );
        for e in &self.state.epochs {
            let l = &e.losses;
            s += &format!(
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{},{},{}\n",
                e.epoch,
                e.lr,
                l.l1,
                l.mask,
                l.perceptual,
                l.flow_pen,
                l.total,
                e.garment_l1,
                e.data_seconds,
                e.compute_seconds,
                e.steps,
                e.skipped_steps,
                e.peak_input_bytes
            );
        }
        let path = self.cfg.out_dir.join("epochs.csv");
        std::fs::write(&path, s).map_err(|e| HarnessError::io(&path, e))
    }

    fn nan_abort(&self, batch: &[(usize, usize)], at: (usize, usize), losses: &LossBreakdown) -> HarnessError {
        let id = |&(v, t): &(usize, usize)| format!("{}#{}", self.data.videos[v].video_id, t);
        let batch_id = format!("epoch{}-batch{}", self.state.epoch, self.state.batch_in_epoch);
        let dump = serde_json::json!({
            "batch_id": batch_id,
            "epoch": self.state.epoch,
            "step": self.state.step,
            "offending_sample": id(&at),
            "losses": losses,
            "samples": batch.iter().map(id).collect::<Vec<_>>(),
            "params_finite": self.model.params.iter().all(|p| p.is_finite()),
        });
        let _ = std::fs::write(self.cfg.out_dir.join("nan_batch.json"), serde_json::to_string_pretty(&dump).unwrap());
        HarnessError::NanLoss { epoch: self.state.epoch, step: self.state.step, batch: format!("{batch_id} ({})", id(&at)) }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HarnessError> {
        save_checkpoint(path, &self.cfg, &self.model, &self.adam, &self.state)
    }

    /// Train to completion. Writes a final `step_NNNNNN.ckpt` unless the run ended on an epoch
    /// checkpoint (so a zero-step run leaves its initial weights behind).
    pub fn run(&mut self) -> Result<&TrainState, HarnessError> {
        while self.step()?.is_some() {}
        if self.state.batch_in_epoch != 0 || self.state.step == 0 {
            let path = self.cfg.out_dir.join(format!("checkpoints/step_{:06}.ckpt", self.state.step));
            self.save_checkpoint(&path)?;
        }
        Ok(&self.state)
    }
}

/// Mean absolute error over the pixels where `mask` is set (all channels).
pub fn masked_l1<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &Tensor<T>) -> f64 {
    let n = mask.plane_len();
    let (mut sum, mut count) = (0.0, 0usize);
    for c in 0..pred.channels {
        for i in 0..n {
            if mask.data[i] > T::zero() {
                sum += (pred.data[c * n + i] - target.data[c * n + i]).abs().as_f64();
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Train a fresh model to completion.
pub fn train<T: Scalar>(cfg: ExperimentConfig) -> Result<Trainer<T>, HarnessError> {
    let mut trainer = Trainer::new(cfg)?;
    trainer.run()?;
    Ok(trainer)
}
