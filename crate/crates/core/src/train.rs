//! Supervised training on synthetic sets: label-smoothed cross-entropy,
//! AdamW under warmup + cosine, MBRT checkpoints and a metrics CSV.
//!
//! Each item gets its own tape. Per-item gradients are summed in item order,
//! so results do not depend on how rayon schedules the items.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mbrt::Container;
use crate::model::{ModelConfig, TapPoint, VisionMambaR};
use crate::optim::{adamw_step, AdamWConfig, AdamWState, WarmupCosine};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,step,lr,train_loss,train_acc,val_acc";

/// Input resolution over the run. Only a fixed resolution is implemented;
/// a progressive variant would add a per-epoch image side here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionSchedule {
    #[default]
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Save `ckpt_{epoch}.mbrt` every this many epochs (and after the last).
    pub checkpoint_interval: usize,
    /// Warmup starts at `lr · warmup_start_factor`.
    pub warmup_start_factor: f64,
    /// Cosine decay ends at `lr · final_lr_factor`.
    pub final_lr_factor: f64,
    /// Stop once post-epoch training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
    pub resolution: ResolutionSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            lr: 1e-3,
            warmup_epochs: 5,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            checkpoint_interval: 10,
            warmup_start_factor: 0.01,
            final_lr_factor: 0.01,
            stop_at_train_acc: None,
            resolution: ResolutionSchedule::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch > 0
            && self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.checkpoint_interval > 0
            && self.warmup_start_factor >= 0.0
            && self.final_lr_factor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> WarmupCosine {
        WarmupCosine {
            base: self.lr,
            warmup_start: self.lr * self.warmup_start_factor,
            floor: self.lr * self.final_lr_factor,
            warmup_steps: self.warmup_epochs * steps_per_epoch,
            total_steps: self.epochs * steps_per_epoch,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub max_grad_norm: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

/// Loss and parameter gradients for one item.
pub fn item_gradients<T: Scalar>(
    model: &VisionMambaR<T>,
    image: &Tensor<T>,
    label: usize,
    smoothing: f64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let vars = model.params.to_graph(&mut g, true);
    let img = g.constant(image.clone());
    let out = model.forward_graph(&mut g, &vars, img, TapPoint::PostResidual)?;
    let loss = g.cross_entropy(out.logits, &[label], T::lit(smoothing))?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).expect("parameter leaves receive gradients").to_vec())
        .collect();
    Ok((g.value(loss).data()[0].as_f64(), grads))
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Predicted class for every item, evaluated independently per item.
pub fn predict<T: Scalar>(model: &VisionMambaR<T>, data: &SyntheticDataset) -> Result<Vec<usize>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| Ok(argmax(model.logits(&data.image(i))?.data())))
        .collect()
}

/// Top-1 accuracy of `model` on `data`.
pub fn accuracy<T: Scalar>(model: &VisionMambaR<T>, data: &SyntheticDataset) -> Result<f64> {
    let pred = predict(model, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Model, optimizer state and progress counters.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: VisionMambaR<T>,
    pub config: TrainConfig,
    pub opt: AdamWState<T>,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: VisionMambaR<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model.params.tensors().iter().map(Tensor::numel).collect();
        Ok(Self {
            opt: AdamWState::new(&sizes),
            model,
            config,
            epoch: 0,
            step: 0,
        })
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Runs one optimizer step on `items`; returns the mean loss and the
    /// gradient norm.
    pub fn step_batch(&mut self, data: &SyntheticDataset, items: &[usize], lr: f64) -> Result<(f64, f64)> {
        let smoothing = self.config.label_smoothing;
        let model = &self.model;
        let per_item: Vec<(f64, Vec<Vec<T>>)> = items
            .par_iter()
            .map(|&i| item_gradients(model, &data.image(i), data.label(i), smoothing))
            .collect::<Result<_>>()?;

        let scale = T::lit(1.0 / items.len() as f64);
        let mut loss = 0.0;
        let mut grads: Vec<Vec<T>> = per_item[0].1.iter().map(|g| vec![T::zero(); g.len()]).collect();
        for (l, gs) in &per_item {
            loss += l;
            for (acc, g) in grads.iter_mut().zip(gs) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
        }
        loss /= items.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                value: loss,
            });
        }
        let mut sq = 0.0;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
                sq += v.as_f64() * v.as_f64();
            }
        }

        let grad_refs: Vec<&[T]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut [T]> = self
            .model
            .params
            .tensors_mut()
            .iter_mut()
            .map(Tensor::data_mut)
            .collect();
        adamw_step(&mut params, &grad_refs, &mut self.opt, lr, &self.config.adamw())?;
        self.step += 1;
        Ok((loss, sq.sqrt()))
    }

    /// One pass over `train` followed by evaluation on `train` and `val`.
    pub fn train_epoch(&mut self, train: &SyntheticDataset, val: &SyntheticDataset) -> Result<EpochMetrics> {
        let steps_per_epoch = train.len().div_ceil(self.config.batch);
        let schedule = self.config.schedule(steps_per_epoch);
        let order = self.epoch_order(train.len());
        let mut loss_sum = 0.0;
        let mut max_grad_norm: f64 = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(self.config.batch) {
            lr = schedule.lr(self.step);
            let (loss, norm) = self.step_batch(train, chunk, lr)?;
            loss_sum += loss * chunk.len() as f64;
            max_grad_norm = max_grad_norm.max(norm);
        }
        self.epoch += 1;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            step: self.step,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: accuracy(&self.model, train)?,
            val_acc: accuracy(&self.model, val)?,
            max_grad_norm,
        };
        log::info!(
            "epoch {} loss {:.4} train_acc {:.4} val_acc {:.4} grad_norm {:.3e}",
            metrics.epoch,
            metrics.train_loss,
            metrics.train_acc,
            metrics.val_acc,
            metrics.max_grad_norm
        );
        Ok(metrics)
    }

    /// Parameters plus optimizer moments (`opt.m.*`, `opt.v.*`), `opt.step`,
    /// `train.epoch` and `train.step`.
    pub fn checkpoint(&self) -> Container {
        let mut c = self.model.params.to_container();
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            let shape = t.shape().to_vec();
            c.push_tensor(
                format!("opt.m.{name}"),
                &Tensor::from_parts(shape.clone(), self.opt.m[i].clone()),
            );
            c.push_tensor(format!("opt.v.{name}"), &Tensor::from_parts(shape, self.opt.v[i].clone()));
        }
        c.push("opt.step", Tensor::scalar(self.opt.step as f64));
        c.push("train.epoch", Tensor::scalar(self.epoch as f64));
        c.push("train.step", Tensor::scalar(self.step as f64));
        c
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(model_config: ModelConfig, config: TrainConfig, ckpt: &Container) -> Result<Self> {
        let mut model = VisionMambaR::new(model_config)?;
        model.params.load_container(ckpt)?;
        let mut t = Self::new(model, config)?;
        let counter = |name: &str| -> Result<usize> {
            let v = ckpt
                .get(name)
                .ok_or_else(|| Error::Load {
                    name: name.into(),
                    reason: "missing from checkpoint".into(),
                })?
                .to_tensor::<f64>()
                .data()[0];
            Ok(v as usize)
        };
        t.epoch = counter("train.epoch")?;
        t.step = counter("train.step")?;
        t.opt.step = counter("opt.step")? as u64;
        for (i, (name, param)) in t.model.params.iter().enumerate() {
            for (prefix, dst) in [("opt.m", &mut t.opt.m[i]), ("opt.v", &mut t.opt.v[i])] {
                let key = format!("{prefix}.{name}");
                let stored = ckpt.get(&key).ok_or_else(|| Error::Load {
                    name: key.clone(),
                    reason: "missing from checkpoint".into(),
                })?;
                if stored.shape() != param.shape() || stored.dtype() != T::DTYPE {
                    return Err(Error::Load {
                        name: key,
                        reason: "moment does not match its parameter".into(),
                    });
                }
                *dst = stored.to_tensor::<T>().into_data();
            }
        }
        Ok(t)
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_train_acc(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.train_acc)
    }
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in metrics {
        writeln!(s, "{}", m.csv_row()).expect("writing to a String");
    }
    s
}

/// Trains until `config.epochs` (or the early-stop accuracy), writing
/// `metrics.csv` and `ckpt_{epoch}.mbrt` files into `out_dir`.
pub fn train<T: Scalar>(
    trainer: &mut Trainer<T>,
    train_set: &SyntheticDataset,
    val_set: &SyntheticDataset,
    out_dir: &Path,
) -> Result<TrainReport> {
    fs::create_dir_all(out_dir)?;
    let mut report = TrainReport {
        metrics: Vec::new(),
        checkpoints: Vec::new(),
    };
    while trainer.epoch < trainer.config.epochs {
        let m = trainer.train_epoch(train_set, val_set)?;
        let done = trainer.epoch == trainer.config.epochs
            || trainer.config.stop_at_train_acc.is_some_and(|t| m.train_acc >= t);
        report.metrics.push(m);
        fs::write(out_dir.join("metrics.csv"), metrics_csv(&report.metrics))?;
        if done || trainer.epoch.is_multiple_of(trainer.config.checkpoint_interval) {
            let path = out_dir.join(format!("ckpt_{}.mbrt", trainer.epoch));
            trainer.save_checkpoint(&path)?;
            report.checkpoints.push(path);
        }
        if done {
            break;
        }
    }
    Ok(report)
}

/// Loads the parameters of `ckpt_path` into a fresh model and reports its
/// accuracy on `data`.
pub fn evaluate<T: Scalar>(
    model_config: ModelConfig,
    ckpt_path: impl AsRef<Path>,
    data: &SyntheticDataset,
) -> Result<f64> {
    let mut model = VisionMambaR::<T>::new(model_config)?;
    model.params.load_container(&Container::load(ckpt_path)?)?;
    accuracy(&model, data)
}
