//! Autoregressive rollout training: loss, Adam, step-decay scheduler,
//! windowing, the training loop, and checkpoint I/O.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TrajectorySet;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::io::{read_records_from_file, write_records_to_file, AnyTensor};
use crate::model::{CoarseModel, ModelConfig};
use crate::pde::SystemKind;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    /// Count optimizer steps (default reading of "every 200 steps").
    Steps,
    Epochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub every: usize,
    pub gamma: f64,
    pub unit: DecayUnit,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            every: 200,
            gamma: 0.96,
            unit: DecayUnit::Steps,
        }
    }
}

/// `lr * gamma^floor(count / every)`.
pub fn step_decay(lr: f64, count: u64, every: usize, gamma: f64) -> f64 {
    lr * gamma.powi((count / every.max(1) as u64) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rollout_steps: usize,
    pub scheduler: SchedulerConfig,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Full-recipe defaults; rollout length varies per system.
    pub fn default_for(kind: SystemKind) -> Self {
        TrainConfig {
            lr: 5e-3,
            batch_size: 16,
            epochs: 500,
            rollout_steps: default_rollout_steps(kind),
            scheduler: SchedulerConfig::default(),
            seed: 0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::NonPositive {
                name: "lr",
                value: self.lr,
            });
        }
        if self.rollout_steps == 0 {
            return Err(Error::NonPositive {
                name: "rollout_steps",
                value: 0.0,
            });
        }
        if self.batch_size == 0 {
            return Err(Error::NonPositive {
                name: "batch_size",
                value: 0.0,
            });
        }
        Ok(())
    }
}

pub fn default_rollout_steps(kind: SystemKind) -> usize {
    match kind {
        SystemKind::Burgers => 20,
        SystemKind::FitzhughNagumo => 32,
        SystemKind::GrayScott => 50,
        SystemKind::NavierStokes => 32,
    }
}

// ---- Adam ------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers aligned with the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Self {
        let zeros_like = |t: &Tensor<T>| {
            if t.is_complex() {
                Tensor::zeros_complex(t.shape())
            } else {
                Tensor::zeros(t.shape())
            }
        };
        AdamState {
            cfg,
            m: store.ids().map(|id| zeros_like(store.value(id))).collect(),
            v: store.ids().map(|id| zeros_like(store.value(id))).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over all trainable parameters.
pub fn adam_update<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of_f64(state.cfg.beta1);
    let b2 = T::of_f64(state.cfg.beta2);
    let eps = T::of_f64(state.cfg.eps);
    let corr1 = T::one() - T::of_f64(state.cfg.beta1.powi(t));
    let corr2 = T::one() - T::of_f64(state.cfg.beta2.powi(t));
    let lr_t = T::of_f64(lr);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let trainable = store.get(id).trainable;
        let grad = store.grad(id).data().to_vec();
        let m = state.m[id.index()].data_mut();
        let v = state.v[id.index()].data_mut();
        for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        if !trainable {
            continue;
        }
        let value = store.value_mut(id).data_mut();
        for ((pv, mi), vi) in value.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *pv -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Optional global gradient-norm clipping (off by default).
pub fn clip_gradients<T: Real>(store: &mut ParamStore<T>, max_norm: f64) {
    let ids: Vec<_> = store.ids().collect();
    let mut total = 0.0f64;
    for &id in &ids {
        for &gi in store.grad(id).data() {
            total += gi.as_f64() * gi.as_f64();
        }
    }
    let norm = total.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return;
    }
    let scale = T::of_f64(max_norm / norm);
    for &id in &ids {
        for gi in store.grad_mut(id).data_mut() {
            *gi *= scale;
        }
    }
}

// ---- windows and loss -------------------------------------------------------

/// One training sample: `rollout_steps + 1` consecutive snapshots of one
/// trajectory starting at position `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub traj: usize,
    pub start: usize,
}

/// Non-overlapping windows (stride == rollout length) over every maximal run
/// of consecutive snapshots. Gapped trajectories contribute windows only
/// inside contiguous runs.
pub fn extract_windows(dataset: &[TrajectorySet], rollout_steps: usize) -> Vec<Window> {
    let mut windows = Vec::new();
    for (ti, traj) in dataset.iter().enumerate() {
        let n = traj.n_snapshots();
        let indices: Vec<u64> = match &traj.time_indices {
            Some(idx) => idx.clone(),
            None => (0..n as u64).collect(),
        };
        let mut run_start = 0usize;
        let mut pos = 1usize;
        loop {
            let run_ended = pos >= n || indices[pos] != indices[pos - 1] + 1;
            if run_ended {
                let run_len = pos - run_start;
                let mut local = 0usize;
                while local + rollout_steps < run_len {
                    windows.push(Window {
                        traj: ti,
                        start: run_start + local,
                    });
                    local += rollout_steps;
                }
                if pos >= n {
                    break;
                }
                run_start = pos;
            }
            pos += 1;
        }
    }
    windows
}

/// Rollout MSE for one window on a fresh region of the tape: the mean squared
/// error over all predicted steps, channels and grid points.
pub fn window_loss<T: Real>(
    g: &mut Graph<T>,
    model: &CoarseModel,
    store: &ParamStore<T>,
    u0: &Tensor<T>,
    labels: &[Tensor<T>],
) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Config("window needs at least one label".into()));
    }
    let u0v = g.constant(u0.clone());
    let states = model.rollout_tape(g, store, u0v, labels.len())?;
    let mut acc: Option<Var> = None;
    for (state, label) in states.iter().skip(1).zip(labels) {
        let lv = g.constant(label.clone());
        let diff = g.sub(*state, lv)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum_all(sq);
        acc = Some(match acc {
            Some(prev) => g.add(prev, s)?,
            None => s,
        });
    }
    let total = acc.expect("at least one label");
    let count = labels.len() * labels[0].numel();
    Ok(g.scale(total, 1.0 / count as f64))
}

fn window_tensors<T: Real>(
    dataset: &[TrajectorySet],
    w: &Window,
    rollout_steps: usize,
) -> (Tensor<T>, Vec<Tensor<T>>) {
    let traj = &dataset[w.traj];
    let u0 = Tensor::from_f64_tensor(&traj.snapshot_tensor(w.start));
    let labels = (1..=rollout_steps)
        .map(|k| Tensor::from_f64_tensor(&traj.snapshot_tensor(w.start + k)))
        .collect();
    (u0, labels)
}

/// Forward-only batch loss (mean of per-window rollout MSEs).
pub fn rollout_loss_batch<T: Real>(
    model: &CoarseModel,
    store: &ParamStore<T>,
    dataset: &[TrajectorySet],
    batch: &[Window],
    rollout_steps: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for w in batch {
        let (u0, labels) = window_tensors::<T>(dataset, w, rollout_steps);
        let mut g = Graph::new();
        let loss = window_loss(&mut g, model, store, &u0, &labels)?;
        total += g.value(loss).data()[0].as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// One optimizer step over a batch: accumulate per-window gradients of the
/// batch-mean loss, then apply Adam. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    model: &CoarseModel,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    dataset: &[TrajectorySet],
    batch: &[Window],
    rollout_steps: usize,
    lr: f64,
    grad_clip: Option<f64>,
) -> Result<f64> {
    store.zero_grads();
    let mut total = 0.0;
    for w in batch {
        let (u0, labels) = window_tensors::<T>(dataset, w, rollout_steps);
        let mut g = Graph::new();
        let loss = window_loss(&mut g, model, store, &u0, &labels)?;
        total += g.value(loss).data()[0].as_f64();
        let scaled = g.scale(loss, 1.0 / batch.len() as f64);
        g.backward(scaled, store)?;
    }
    if let Some(max_norm) = grad_clip {
        clip_gradients(store, max_norm);
    }
    adam_update(store, adam, lr);
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    let mut out = String::from("epoch,step,lr,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.lr, r.loss));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Full training loop. Windows are reshuffled deterministically per epoch;
/// divergence inside a rollout aborts with epoch/step context.
pub fn train<T: Real>(
    model: &CoarseModel,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    dataset: &[TrajectorySet],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let windows = extract_windows(dataset, cfg.rollout_steps);
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "no training windows: need at least {} consecutive snapshots",
            cfg.rollout_steps + 1
        )));
    }
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order = windows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            let count = match cfg.scheduler.unit {
                DecayUnit::Steps => adam.step,
                DecayUnit::Epochs => epoch as u64,
            };
            let lr = step_decay(cfg.lr, count, cfg.scheduler.every, cfg.scheduler.gamma);
            let loss = train_step(
                model,
                store,
                adam,
                dataset,
                batch,
                cfg.rollout_steps,
                lr,
                cfg.grad_clip,
            )
            .map_err(|e| Error::Train {
                epoch,
                step: adam.step as usize,
                source: Box::new(e),
            })?;
            log.push(LossRecord {
                epoch,
                step: adam.step,
                lr,
                loss,
            });
        }
    }
    Ok(log)
}

// ---- checkpoints -------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    config_hash: String,
    step: u64,
    adam: AdamConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_config: Option<TrainConfig>,
}

/// Loaded checkpoint contents.
pub struct Checkpoint<T: Real> {
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub store: ParamStore<T>,
    pub adam: AdamState<T>,
    pub model: CoarseModel,
    pub train_config: Option<TrainConfig>,
}

/// Writes a header record followed by one record per parameter and per Adam
/// moment tensor.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model_cfg: &ModelConfig,
    config_hash: &str,
    store: &ParamStore<T>,
    adam: &AdamState<T>,
    train_cfg: Option<&TrainConfig>,
) -> Result<()> {
    let header = CheckpointHeader {
        model_config: model_cfg.clone(),
        config_hash: config_hash.to_string(),
        step: adam.step,
        adam: adam.cfg,
        train_config: train_cfg.cloned(),
    };
    let mut records = vec![(
        AnyTensor::F64(Tensor::zeros(&[0])),
        serde_json::json!({"role": "header", "header": serde_json::to_value(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?}),
    )];
    for (i, (_, entry)) in store.iter().enumerate() {
        records.push((
            AnyTensor::from_tensor(&entry.value),
            serde_json::json!({"role": "param", "name": entry.name, "trainable": entry.trainable}),
        ));
        records.push((
            AnyTensor::from_tensor(&adam.m[i]),
            serde_json::json!({"role": "adam_m", "name": entry.name}),
        ));
        records.push((
            AnyTensor::from_tensor(&adam.v[i]),
            serde_json::json!({"role": "adam_v", "name": entry.name}),
        ));
    }
    write_records_to_file(path, &records)
}

/// Rebuilds the model from the stored config, then overwrites every
/// parameter and optimizer moment with the stored tensors.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let records = read_records_from_file(path)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Format(format!("{}: empty checkpoint", path.display())))?;
    if first.metadata["role"] != "header" {
        return Err(Error::Format(format!(
            "{}: first record is not a checkpoint header",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_value(first.metadata["header"].clone())
        .map_err(|e| Error::Format(format!("{}: header: {e}", path.display())))?;

    let mut store: ParamStore<T> = ParamStore::new();
    let model = CoarseModel::init(header.model_config.clone(), &mut store)?;
    let mut adam = AdamState::new(&store, header.adam);
    adam.step = header.step;

    for rec in &records[1..] {
        let role = rec.metadata["role"].as_str().unwrap_or_default();
        let name = rec.metadata["name"].as_str().unwrap_or_default();
        let id = store.lookup(name).ok_or_else(|| {
            Error::Format(format!("{}: unknown parameter {name}", path.display()))
        })?;
        let tensor: Tensor<T> = rec.tensor.into_tensor();
        match role {
            "param" => {
                if tensor.shape() != store.value(id).shape() {
                    return Err(Error::ShapeMismatch {
                        left: tensor.shape().to_vec(),
                        right: store.value(id).shape().to_vec(),
                    });
                }
                *store.value_mut(id) = tensor;
            }
            "adam_m" => adam.m[id.index()] = tensor,
            "adam_v" => adam.v[id.index()] = tensor,
            other => {
                return Err(Error::Format(format!(
                    "{}: unknown record role {other}",
                    path.display()
                )))
            }
        }
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        config_hash: header.config_hash,
        store,
        adam,
        model,
        train_config: header.train_config,
    })
}
