//! Minibatch training loop: task-balanced upsampling, seeded shuffling,
//! masked multi-task BCE, and per-epoch evaluation on the held-out
//! split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{upsample_by_task, Dataset};
use crate::encoder::Example;
use crate::error::{Error, Result};
use crate::metrics::{auc, average_precision};
use crate::model::{multi_task_loss, GrecModel, MmoeModel};
use crate::moe::{RoutingDecision, TaskVocab};
use crate::nn::{Optimizer, OptimizerKind};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Optimizer {
        match self.kind {
            OptimizerKind::Sgd => Optimizer::sgd(self.lr),
            OptimizerKind::Adam => Optimizer::adam(self.lr, self.beta1, self.beta2, self.eps),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(Error::Config("optimizer.lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("optimizer.eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Balance task-sentence groups by upsampling before each run.
    pub upsample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            batch_size: 256,
            optimizer: OptimizerConfig::default(),
            upsample: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One metrics row: evaluation for one task after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub task: String,
    pub auc: f64,
    pub ap: f64,
    pub loss: f64,
}

/// Anything trainable with per-task logit heads.
pub trait TaskModel {
    fn forward_logits(&self, examples: &[Example]) -> Result<(Vec<Tensor>, RoutingDecision)>;
    fn store(&self) -> &ParamStore;
    fn vocab(&self) -> &TaskVocab;
}

impl TaskModel for GrecModel {
    fn forward_logits(&self, examples: &[Example]) -> Result<(Vec<Tensor>, RoutingDecision)> {
        GrecModel::forward_logits(self, examples)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn vocab(&self) -> &TaskVocab {
        &self.vocab
    }
}

impl TaskModel for MmoeModel {
    fn forward_logits(&self, examples: &[Example]) -> Result<(Vec<Tensor>, RoutingDecision)> {
        MmoeModel::forward_logits(self, examples)
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn vocab(&self) -> &TaskVocab {
        &self.vocab
    }
}

/// Evaluate AUC, AP, and masked BCE per task. Tasks whose split lacks
/// both classes (or any positive) get NaN for the undefined metric.
pub fn evaluate<M: TaskModel>(
    model: &M,
    dataset: &Dataset,
    batch_size: usize,
    epoch: usize,
) -> Result<Vec<EpochRow>> {
    let tasks = model.vocab().use_cases.clone();
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); tasks.len()];
    for chunk in dataset.examples.chunks(batch_size.max(1)) {
        let (logits, _) = model.forward_logits(chunk)?;
        for (t, task_logits) in logits.iter().enumerate() {
            let probs = task_logits.sigmoid().value();
            for (i, ex) in chunk.iter().enumerate() {
                if let Some(label) = ex.labels[t] {
                    scores[t].push(probs[i]);
                    labels[t].push(label);
                }
            }
        }
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let loss = if scores[t].is_empty() {
            f64::NAN
        } else {
            let mut sum = 0.0;
            for (p, y) in scores[t].iter().zip(labels[t].iter()) {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                sum -= if *y { p.ln() } else { (1.0 - p).ln() };
            }
            sum / scores[t].len() as f64
        };
        rows.push(EpochRow {
            epoch,
            task: task.clone(),
            auc: auc(&scores[t], &labels[t]).unwrap_or(f64::NAN),
            ap: average_precision(&scores[t], &labels[t]).unwrap_or(f64::NAN),
            loss,
        });
    }
    Ok(rows)
}

/// Train on `train` and evaluate on `test` after every epoch. The
/// returned history holds one row per (epoch, task). Aborts on a
/// non-finite loss, naming the first offending parameter.
pub fn train<M: TaskModel>(
    model: &M,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRow>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let train = if cfg.upsample {
        upsample_by_task(train, cfg.seed)?
    } else {
        train.clone()
    };
    let mut optimizer = cfg.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = batch_idx
                .iter()
                .map(|&i| train.examples[i].clone())
                .collect();
            if batch.iter().all(|ex| ex.labels.iter().all(|l| l.is_none())) {
                continue;
            }
            let (logits, _) = model.forward_logits(&batch)?;
            let loss = multi_task_loss(&logits, &batch)?;
            let value = loss.item();
            if !value.is_finite() {
                let culprit = model
                    .store()
                    .first_non_finite()
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!(
                    "training loss became non-finite at epoch {} ({})",
                    epoch, culprit
                )));
            }
            loss.backward()?;
            optimizer.step(model.store());
            model.store().zero_grad();
        }
        if !test.is_empty() {
            history.extend(evaluate(model, test, cfg.batch_size, epoch)?);
        }
    }
    Ok(history)
}
