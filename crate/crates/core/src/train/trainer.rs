//! Epoch loop, evaluation and checkpoint restore.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::metrics::MetricsReport;
use super::optim::{AdamW, AdamWConfig};
use crate::autodiff::Tape;
use crate::data_io::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{argmax, Ablation, Model, ModelDims};
use crate::tensor::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted means over the epoch.
    pub ce: f64,
    pub apc: f64,
    pub total: f64,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub train_wa: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>3}  ce {:.6}  apc {:.6}  total {:.6}  train_wa {:.4}",
            self.epoch, self.ce, self.apc, self.total, self.train_wa
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub ce: f64,
    pub apc: f64,
    pub total: f64,
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub classes: Vec<String>,
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    active: Vec<ParamId>,
}

fn adam_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims {
            text_dim: dataset.text_dim,
            audio_dim: dataset.audio_dim,
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_classes: dataset.n_classes(),
        };
        let mut store = ParamStore::new();
        let model = Model::init(&mut store, dims, cfg.seed, cfg.ma_alpha)?;
        let opt = AdamW::new(adam_config(&cfg), &store);
        let active = model.params_for(ablation(&cfg));
        Ok(Self {
            cfg,
            classes: dataset.classes.clone(),
            model,
            store,
            opt,
            epoch: 0,
            active,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config.clone();
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut model = Model::init(&mut store, ckpt.dims, cfg.seed, cfg.ma_alpha)?;
        if store.len() != ckpt.params.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "{} parameters stored, model has {}",
                    ckpt.params.len(),
                    store.len()
                ),
            ));
        }
        for (p, (name, value)) in store.iter_mut().zip(&ckpt.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::invalid(
                    "checkpoint",
                    format!(
                        "parameter {name} {:?} does not match {} {:?}",
                        value.shape(),
                        p.name,
                        p.value.shape()
                    ),
                ));
            }
            p.value = value.clone();
        }
        if ckpt.label_snapshot.shape() != store.value(model.labels.param).shape() {
            return Err(Error::shape(
                "checkpoint",
                ckpt.label_snapshot.shape(),
                store.value(model.labels.param).shape(),
            ));
        }
        model.labels.snapshot = ckpt.label_snapshot.clone();
        let opt = AdamW {
            cfg: adam_config(&cfg),
            step: ckpt.adam_step,
            m: ckpt.m.clone(),
            v: ckpt.v.clone(),
        };
        let active = model.params_for(ablation(&cfg));
        Ok(Self {
            cfg,
            classes: ckpt.classes.clone(),
            model,
            store,
            opt,
            epoch: ckpt.epoch,
            active,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            dims: self.model.dims,
            classes: self.classes.clone(),
            epoch: self.epoch,
            adam_step: self.opt.step,
            params: self
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            m: self.opt.m.clone(),
            v: self.opt.v.clone(),
            label_snapshot: self.model.labels.snapshot.clone(),
        }
    }

    pub fn ablation(&self) -> Ablation {
        ablation(&self.cfg)
    }

    /// Sample order for the 0-based epoch `epoch`, a function of the seed
    /// and the epoch alone.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Batches of the upcoming epoch.
    pub fn batches(&self, n: usize) -> Vec<Vec<usize>> {
        self.epoch_order(self.epoch, n)
            .chunks(self.cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Forward, backward and one optimizer update on `batch`.
    pub fn train_step(
        &mut self,
        train: &[Sample],
        batch: &[usize],
        step: usize,
    ) -> Result<StepStats> {
        self.step_inner(train, batch).map_err(|e| Error::Step {
            epoch: self.epoch + 1,
            step,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, train: &[Sample], batch: &[usize]) -> Result<StepStats> {
        let samples: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
        self.store.zero_grads();
        let mut tape = Tape::new();
        let out = self.model.batch_loss(
            &mut tape,
            &self.store,
            &samples,
            self.ablation(),
            self.cfg.ce_weight,
            self.cfg.effective_apc_weight(),
        )?;
        let total = tape.scalar(out.total);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss {total}")));
        }
        let grads = tape.backward(out.total)?;
        grads.accumulate_into(&mut self.store);
        self.opt.step(&mut self.store, &self.active)?;
        let n = self.model.dims.n_classes;
        let logits = tape.value_f64(out.logits);
        Ok(StepStats {
            ce: tape.scalar(out.ce),
            apc: out.apc.map_or(0.0, |a| tape.scalar(a)),
            total,
            predictions: logits.chunks(n).map(argmax).collect(),
        })
    }

    /// One pass over `train` followed by the label-embedding epoch hook.
    pub fn run_epoch(&mut self, train: &[Sample]) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::EmptySplit(Split::Train.to_string()));
        }
        let (mut ce, mut apc, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let batches = self.batches(train.len());
        for (step, batch) in batches.iter().enumerate() {
            let s = self.train_step(train, batch, step + 1)?;
            let w = batch.len() as f64;
            ce += w * s.ce;
            apc += w * s.apc;
            total += w * s.total;
            correct += batch
                .iter()
                .zip(&s.predictions)
                .filter(|(&i, &p)| train[i].label == p)
                .count();
        }
        self.model
            .labels
            .end_epoch(&mut self.store, !self.cfg.disable_ma)?;
        self.epoch += 1;
        let n = train.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            steps: batches.len(),
            ce: ce / n,
            apc: apc / n,
            total: total / n,
            train_wa: correct as f64 / n,
        })
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let train = dataset.nonempty(Split::Train)?;
        self.check_dataset(dataset)?;
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch(train)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<usize>> {
        self.model
            .predict(&self.store, samples, self.ablation().lsma)
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let d = self.model.dims;
        if dataset.n_classes() != d.n_classes {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "model has {} classes, dataset has {}",
                    d.n_classes,
                    dataset.n_classes()
                ),
            ));
        }
        if (dataset.text_dim, dataset.audio_dim) != (d.text_dim, d.audio_dim) {
            return Err(Error::invalid(
                "evaluate",
                format!(
                    "model expects feature dims {} / {}, dataset has {} / {}",
                    d.text_dim, d.audio_dim, dataset.text_dim, dataset.audio_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn evaluate(&self, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
        self.check_dataset(dataset)?;
        let samples = dataset.nonempty(split)?;
        let predictions = self.predict(samples)?;
        let targets: Vec<usize> = samples.iter().map(|s| s.label).collect();
        MetricsReport::from_predictions(&self.classes, &targets, &predictions)
    }
}

fn ablation(cfg: &TrainConfig) -> Ablation {
    Ablation {
        lsma: !cfg.disable_lsma,
        joo: !cfg.disable_joo,
    }
}

/// Trains from scratch on the dataset's train split.
pub fn train(
    cfg: TrainConfig,
    dataset: &Dataset,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(cfg, dataset)?;
    let logs = trainer.fit(dataset, on_epoch)?;
    Ok((trainer, logs))
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    Trainer::from_checkpoint(ckpt)?.evaluate(dataset, split)
}
