//! Batch construction, Adam, the step-decay schedule, checkpoints and the
//! epoch loop.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data_io::Dataset;
use crate::error::{Error, Result};
use crate::generator::{Model, ModelConfig, PathOptions};
use crate::imaging::Image;
use crate::nn::ParamStore;
use crate::objectives::{total_loss, LossReport, PerceptualNet};
use crate::warp::{apply_warp_image, sample_deform, DeformParams, DeformRanges};

pub const METRICS_HEADER: &str = "epoch,step,recon_fwd,recon_bwd,percep_fwd,percep_bwd,total,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied every `lr_step_epochs` epochs.
    pub lr_decay: f64,
    pub lr_step_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Inter-subject stage through an auxiliary image (off = baseline).
    pub aux: bool,
    /// Reverse path reconstructing `x` from `x_prime`.
    pub cycle: bool,
    /// Draw a second auxiliary assignment for the reverse path.
    pub fresh_aux: bool,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub ckpt_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.1,
            lr_step_epochs: 30,
            epochs: 90,
            seed: 0,
            aux: true,
            cycle: true,
            fresh_aux: false,
            ckpt_every: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.lr_step_epochs == 0 {
            return bad("batch_size, epochs and lr_step_epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr must be positive and lr_decay in (0, 1], got {} and {}", self.lr, self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    pub fn path_options(&self) -> PathOptions {
        PathOptions {
            aux_stage: self.aux,
            cycle: self.cycle,
        }
    }

    /// Step-decay schedule: `lr * lr_decay^(epoch / lr_step_epochs)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_step_epochs) as i32)
    }
}

/// Deterministic generator for a labelled stream position.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(a << 32 | (b & 0xffff_ffff));
    rng
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_STEP: u64 = 3;

/// Uniform permutation of `0..n` with no fixed points, by rejection.
/// `n = 1` has none, so the identity is returned with a warning.
pub fn sample_derangement<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n == 1 {
        log::warn!("batch of one: the auxiliary image is the sample itself");
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub indices: Vec<usize>,
    pub x: Vec<Image>,
    pub x_prime: Vec<Image>,
    /// `x_aux[i] = x[aux_index[i]]`.
    pub aux_index: Vec<usize>,
    /// Reverse-path assignment when drawn separately.
    pub backward_aux_index: Option<Vec<usize>>,
    pub deform: Vec<DeformParams>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn tensors(&self, dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let x: Vec<&Image> = self.x.iter().collect();
        let xp: Vec<&Image> = self.x_prime.iter().collect();
        Ok((Image::batch_to_tensor(&x, dtype, device)?, Image::batch_to_tensor(&xp, dtype, device)?))
    }
}

pub fn build_training_batch<R: rand::Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    ranges: &DeformRanges,
    rng: &mut R,
) -> Result<TrainBatch> {
    if indices.is_empty() {
        return Err(Error::Input("training batch needs at least one index".into()));
    }
    let mut x = Vec::with_capacity(indices.len());
    let mut x_prime = Vec::with_capacity(indices.len());
    let mut deform = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = &dataset
            .items
            .get(i)
            .ok_or_else(|| Error::Input(format!("index {i} outside dataset of {}", dataset.len())))?
            .image;
        let d = sample_deform(ranges, rng)?;
        x_prime.push(apply_warp_image(img, &d)?);
        x.push(img.clone());
        deform.push(d);
    }
    let aux_index = sample_derangement(indices.len(), rng);
    Ok(TrainBatch {
        indices: indices.to_vec(),
        x,
        x_prime,
        aux_index,
        backward_aux_index: None,
        deform,
    })
}

/// Adam over every variable of a [`ParamStore`].
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor>> {
            params.vars().iter().map(|(_, v)| Ok(v.as_tensor().zeros_like()?)).collect()
        };
        Ok(Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros()?,
            v: zeros()?,
        })
    }

    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, var)) in params.vars().iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                return Err(Error::Numeric(format!("parameter {name} received no gradient")));
            };
            let m = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    fn state_tensors(&self, params: &ParamStore) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (i, (name, _)) in params.vars().iter().enumerate() {
            out.insert(format!("adam.m.{name}"), self.m[i].clone());
            out.insert(format!("adam.v.{name}"), self.v[i].clone());
        }
        out
    }

    fn load_state(&mut self, params: &ParamStore, values: &HashMap<String, Tensor>, t: u64) -> Result<()> {
        for (i, (name, var)) in params.vars().iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], format!("adam.m.{name}")), (&mut self.v[i], format!("adam.v.{name}"))] {
                let t = values
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing optimizer state {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Config(format!("optimizer state {key} has the wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Everything needed to continue a run or rebuild the model for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub model: ModelConfig,
    pub upsample_blocks: usize,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    /// Resolved run configuration text.
    pub config: String,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(path: &Path, model: &Model, adam: &Adam, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = model.params().tensors();
    tensors.extend(adam.state_tensors(model.params()));
    candle_core::safetensors::save(&tensors, path)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the model described by a checkpoint and loads its weights.
pub fn load_model(path: &Path, dtype: DType, device: &Device) -> Result<(Model, CheckpointMeta)> {
    let meta = read_checkpoint_meta(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Model::new(meta.model, dtype, device, &mut rng)?;
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    let values = candle_core::safetensors::load(path, device)?;
    model.params().assign(&values)?;
    Ok((model, meta))
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub report: LossReport,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, self.step, r.recon_fwd, r.recon_bwd, r.percep_fwd, r.percep_bwd, r.total, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub records: Vec<StepRecord>,
}

/// Mean total loss per epoch, in epoch order.
pub fn epoch_means(records: &[StepRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.report.total;
                *n += 1;
            }
            _ => out.push((r.epoch, r.report.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Owns the model, optimizer and loss network for a run.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub adam: Adam,
    pub net: Option<PerceptualNet>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, device: &Device) -> Result<Self> {
        Self::with_dtype(config, DType::F32, device)
    }

    pub fn with_dtype(config: RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        let mut rng = stream_rng(t.seed, TAG_INIT, 0, 0);
        let model = Model::new(config.model, dtype, device, &mut rng)?;
        let adam = Adam::new(model.params(), t.adam_beta1, t.adam_beta2, t.adam_eps)?;
        let net = match config.loss.mode.uses_perceptual() {
            true => Some(PerceptualNet::new(&config.loss.perceptual, dtype, device)?),
            false => None,
        };
        Ok(Self {
            config,
            model,
            adam,
            net,
            epoch: 0,
            step: 0,
        })
    }

    /// Restores model, optimizer and counters. The run configuration is taken
    /// from `config`, which must describe the same architecture.
    pub fn resume(config: RunConfig, checkpoint: &Path, device: &Device) -> Result<Self> {
        let mut tr = Self::new(config, device)?;
        let meta = read_checkpoint_meta(checkpoint)?;
        if meta.model != tr.config.model {
            return Err(Error::Config("checkpoint architecture differs from the configured model".into()));
        }
        let values = candle_core::safetensors::load(checkpoint, device)?;
        tr.model.params().assign(&values)?;
        tr.adam.load_state(tr.model.params(), &values, meta.step)?;
        tr.epoch = meta.epoch;
        tr.step = meta.step;
        Ok(tr)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            model: self.config.model,
            upsample_blocks: self.config.model.upsample_blocks(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.train.seed,
            config: self.config.to_text(),
        }
    }

    /// Differentiable total loss and its report on one batch, without updating.
    pub fn evaluate_batch(&self, batch: &TrainBatch) -> Result<(Tensor, LossReport)> {
        let (x, xp) = batch.tensors(self.model.dtype(), self.model.device())?;
        let out = self.model.cycle_forward_in_batch(
            &x,
            &xp,
            &batch.aux_index,
            batch.backward_aux_index.as_deref(),
            self.config.train.path_options(),
        )?;
        total_loss(&out, &x, &xp, self.config.loss.mode, self.net.as_ref())
    }

    /// One forward pass and one Adam update of detector, encoder and generator.
    pub fn train_step(&mut self, batch: &TrainBatch, lr: f64) -> Result<LossReport> {
        let (loss, report) = self.evaluate_batch(batch)?;
        if !report.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {}: recon_fwd={} recon_bwd={} percep_fwd={} percep_bwd={}",
                self.step, report.recon_fwd, report.recon_bwd, report.percep_fwd, report.percep_bwd
            )));
        }
        let grads = loss.backward()?;
        self.adam.step(self.model.params(), &grads, lr)?;
        self.step += 1;
        Ok(report)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.config.train.batch_size).max(1)
    }

    /// Batch `step_in_epoch` of `epoch`: a pure function of seed, epoch and position.
    pub fn batch_for(&self, dataset: &Dataset, epoch: usize, step_in_epoch: usize) -> Result<TrainBatch> {
        let t = &self.config.train;
        let n = dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(t.seed, TAG_SHUFFLE, epoch as u64, 0));
        let b = t.batch_size.min(n);
        let idx = &order[step_in_epoch * b..(step_in_epoch + 1) * b];
        let mut rng = stream_rng(t.seed, TAG_STEP, epoch as u64, step_in_epoch as u64);
        let mut batch = build_training_batch(dataset, idx, &self.config.deform.to_ranges(), &mut rng)?;
        if t.fresh_aux {
            batch.backward_aux_index = Some(sample_derangement(idx.len(), &mut rng));
        }
        Ok(batch)
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let s = self.config.model.detector.in_size;
        if let Some(bad) = dataset.items.iter().find(|it| it.image.height() != s || it.image.width() != s || it.image.channels() != 3) {
            return Err(Error::Input(format!(
                "image {} is {}x{}x{}, model expects {s}x{s}x3",
                bad.id,
                bad.image.height(),
                bad.image.width(),
                bad.image.channels()
            )));
        }
        Ok(())
    }

    /// Trains until `config.train.epochs` epochs are complete, appending to
    /// `out_dir/metrics.csv` and writing checkpoints under `out_dir`.
    pub fn run(&mut self, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
        self.check_dataset(dataset)?;
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        write_run_files(out_dir, &self.config)?;
        let metrics = out_dir.join("metrics.csv");
        let mut log = if self.epoch == 0 {
            let mut f = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
            writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics, e))?;
            f
        } else {
            fs::OpenOptions::new()
                .append(true)
                .open(&metrics)
                .map_err(|e| Error::io(&metrics, e))?
        };
        let t = self.config.train.clone();
        log::info!(
            "training {} epochs, batch {}, adam beta1={} beta2={} eps={}, {} parameters",
            t.epochs,
            t.batch_size,
            t.adam_beta1,
            t.adam_beta2,
            t.adam_eps,
            self.model.params().num_scalars()
        );
        let steps = self.steps_per_epoch(dataset.len());
        let mut records = Vec::new();
        let final_ckpt = out_dir.join("model.safetensors");
        while self.epoch < t.epochs {
            let epoch = self.epoch;
            let lr = t.lr_at(epoch);
            for s in 0..steps {
                let batch = self.batch_for(dataset, epoch, s)?;
                let report = self.train_step(&batch, lr)?;
                let rec = StepRecord {
                    epoch,
                    step: self.step,
                    report,
                    lr,
                };
                writeln!(log, "{}", rec.csv_line()).map_err(|e| Error::io(&metrics, e))?;
                records.push(rec);
            }
            log.flush().map_err(|e| Error::io(&metrics, e))?;
            self.epoch += 1;
            if let Some(&(_, mean)) = epoch_means(&records).last() {
                log::info!("epoch {epoch} lr {lr} mean loss {mean:.5}");
            }
            if t.ckpt_every > 0 && self.epoch % t.ckpt_every == 0 && self.epoch < t.epochs {
                let p = out_dir.join(format!("epoch_{:04}.safetensors", self.epoch));
                save_checkpoint(&p, &self.model, &self.adam, &self.meta())?;
            }
        }
        save_checkpoint(&final_ckpt, &self.model, &self.adam, &self.meta())?;
        Ok(TrainSummary {
            checkpoint: final_ckpt,
            metrics,
            records,
        })
    }
}

/// Resolved config plus a run descriptor (seed, crate version).
pub fn write_run_files(out_dir: &Path, config: &RunConfig) -> Result<()> {
    let cfg = out_dir.join("config.conf");
    fs::write(&cfg, config.to_text()).map_err(|e| Error::io(&cfg, e))?;
    let run = out_dir.join("run.json");
    let desc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.train.seed,
        "config_source": config.source.as_ref().map(|p| p.display().to_string()),
        "overrides": config.overrides,
    });
    fs::write(&run, serde_json::to_string_pretty(&desc)?).map_err(|e| Error::io(&run, e))
}

/// Convenience wrapper: fresh trainer, full run.
pub fn run_training(config: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    Trainer::new(config.clone(), &Device::Cpu)?.run(dataset, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{synthesize_toy_dataset, ToyConfig};

    #[test]
    fn derangements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_derangement(2, &mut rng), vec![1, 0]);
        assert_eq!(sample_derangement(1, &mut rng), vec![0]);
        for _ in 0..1000 {
            let p = sample_derangement(32, &mut rng);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..32).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }

    #[test]
    fn derangements_of_three_are_uniform() {
        // exactly two derangements of three elements
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = 0;
        for _ in 0..4000 {
            if sample_derangement(3, &mut rng) == vec![1, 2, 0] {
                a += 1;
            }
        }
        assert!((1800..2200).contains(&a), "{a}");
    }

    #[test]
    fn lr_schedule() {
        let t = TrainConfig::default();
        let lrs: Vec<f64> = (0..61).map(|e| t.lr_at(e)).collect();
        assert!(lrs[..30].iter().all(|&l| l == 0.001));
        assert!(lrs[30..60].iter().all(|&l| (l - 1e-4).abs() < 1e-18));
        assert!((lrs[60] - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn batch_pairs_are_warps_of_their_sources() {
        let ds = synthesize_toy_dataset(&ToyConfig {
            count: 6,
            ..ToyConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = build_training_batch(&ds, &[4, 1, 2], &DeformRanges::default(), &mut rng).unwrap();
        for i in 0..3 {
            assert_eq!(b.x[i], ds.items[b.indices[i]].image);
            assert_eq!(b.x_prime[i], apply_warp_image(&b.x[i], &b.deform[i]).unwrap());
            assert_ne!(b.aux_index[i], i);
        }
        assert!(build_training_batch(&ds, &[], &DeformRanges::default(), &mut rng).is_err());
    }
}
