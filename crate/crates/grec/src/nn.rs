//! Standard layers: linear, embedding lookup, layer norm, two-layer MLP
//! with ReLU, and the SGD / Adam optimizers.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{Init, ParamStore};
use crate::tensor::Tensor;

pub struct Linear {
    pub weight: Tensor, // [in x out]
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let weight = store.create(
            &format!("{}.weight", name),
            &[fan_in, fan_out],
            Init::GlorotUniform,
            rng,
        )?;
        let bias = store.create(&format!("{}.bias", name), &[fan_out], Init::Zeros, rng)?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    pub fn new_no_bias(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let weight = store.create(
            &format!("{}.weight", name),
            &[fan_in, fan_out],
            Init::GlorotUniform,
            rng,
        )?;
        Ok(Linear { weight, bias: None })
    }

    /// x: [n x in] -> [n x out]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

pub struct Embedding {
    pub table: Tensor, // [vocab x dim]
    name: String,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Embedding> {
        let table = store.create(
            &format!("{}.table", name),
            &[vocab, dim],
            Init::GlorotUniform,
            rng,
        )?;
        Ok(Embedding {
            table,
            name: name.to_string(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// ids -> [len x dim]; gradient scatters to the looked-up rows only.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        let vocab = self.vocab();
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "id {} out of range for feature '{}' (vocab {})",
                    id, self.name, vocab
                )));
            }
        }
        self.table.gather_rows(ids)
    }
}

pub struct LayerNorm {
    pub gain: Tensor,  // [d]
    pub shift: Tensor, // [d]
}

impl LayerNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<LayerNorm> {
        let gain = store.create(&format!("{}.gain", name), &[d], Init::Ones, rng)?;
        let shift = store.create(&format!("{}.shift", name), &[d], Init::Zeros, rng)?;
        Ok(LayerNorm { gain, shift })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.shift)
    }
}

/// Two linear layers with a ReLU between; input width == output width so
/// the block composes with residual paths.
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlpBlock> {
        Ok(MlpBlock {
            fc1: Linear::new(store, &format!("{}.fc1", name), d, hidden, rng)?,
            fc2: Linear::new(store, &format!("{}.fc2", name), hidden, d, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu())
    }
}

/// Mean BCE on logits; labels must be 0/1.
pub fn bce_loss(logits: &Tensor, labels: &[f64]) -> Result<Tensor> {
    logits.bce_with_logits(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &ParamStore) {
        self.step_count += 1;
        let t = self.step_count;
        for (name, tensor) in store.iter() {
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    tensor.apply_update(|data, grad| {
                        for (d, g) in data.iter_mut().zip(grad.iter()) {
                            *d -= lr * g;
                        }
                    });
                }
                OptimizerKind::Adam => {
                    let n = tensor.numel();
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; n]);
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; n]);
                    let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
                    tensor.apply_update(|data, grad| {
                        let bc1 = 1.0 - b1.powi(t as i32);
                        let bc2 = 1.0 - b2.powi(t as i32);
                        for i in 0..data.len() {
                            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                            let mh = m[i] / bc1;
                            let vh = v[i] / bc2;
                            data[i] -= lr * mh / (vh.sqrt() + eps);
                        }
                    });
                }
            }
        }
    }
}
