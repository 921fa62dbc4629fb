//! Full model assembly: encoder trunk, task-sentence-aware sparse MoE
//! layer, and one sigmoid head per use case; plus the dense MMoE
//! baseline sharing the same encoder and heads.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Example, FeatureBatch, FeatureSchema, GrecEncoder, TransformerConfig};
use crate::error::{Error, Result};
use crate::moe::{
    GateWeighting, Granularity, MmoeLayer, MoeBatch, MoeLayer, MoeSentence, RoutingDecision,
    TaskVocab,
};
use crate::nn::Linear;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub experts: usize,
    pub k: usize,
    /// Routing units admitted per expert per batch; absent = unlimited.
    pub capacity: Option<usize>,
    pub granularity: Granularity,
    pub weighting: GateWeighting,
    pub expert_hidden: usize,
}

impl Default for MoeConfig {
    fn default() -> MoeConfig {
        MoeConfig {
            experts: 8,
            k: 4,
            capacity: Some(2),
            granularity: Granularity::TaskSentence,
            weighting: GateWeighting::SoftmaxSelected,
            expert_hidden: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrecConfig {
    /// Trunk width.
    pub d: usize,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub moe: MoeConfig,
}

impl Default for GrecConfig {
    fn default() -> GrecConfig {
        GrecConfig {
            d: 16,
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            moe: MoeConfig::default(),
        }
    }
}

/// Per-use-case probabilities for one batch, plus the routing choices
/// that produced them.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    /// `probs[task][example]`.
    pub probs: Vec<Vec<f64>>,
    pub routing: RoutingDecision,
}

pub struct GrecModel {
    pub store: ParamStore,
    pub encoder: GrecEncoder,
    pub moe: MoeLayer,
    pub heads: Vec<Linear>,
    pub schema: FeatureSchema,
    pub vocab: TaskVocab,
    pub config: GrecConfig,
}

impl GrecModel {
    pub fn new(
        schema: &FeatureSchema,
        vocab: &TaskVocab,
        config: &GrecConfig,
        seed: u64,
    ) -> Result<GrecModel> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GrecEncoder::new(
            &mut store,
            schema,
            &config.encoder,
            &config.transformer,
            config.d,
            &mut rng,
        )?;
        let mut moe = MoeLayer::new(
            &mut store,
            "moe",
            config.d,
            config.moe.expert_hidden,
            config.moe.experts,
            config.moe.k,
            config.moe.capacity,
            config.moe.granularity,
            vocab.clone(),
            &mut rng,
        )?;
        moe.weighting = config.moe.weighting;
        let mut heads = Vec::with_capacity(vocab.use_cases.len());
        for uc in &vocab.use_cases {
            heads.push(Linear::new(
                &mut store,
                &format!("head.{}", uc),
                config.d,
                1,
                &mut rng,
            )?);
        }
        Ok(GrecModel {
            store,
            encoder,
            moe,
            heads,
            schema: schema.clone(),
            vocab: vocab.clone(),
            config: config.clone(),
        })
    }

    /// One trunk token per example, wrapped as a one-token sentence
    /// carrying the example's task sentence.
    fn moe_batch(&self, trunk: &Tensor, examples: &[Example]) -> Result<MoeBatch> {
        let mut sentences = Vec::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            sentences.push(MoeSentence {
                tokens: vec![trunk.gather_rows(&[i])?],
                task_sentence: ex.task_sentence.clone(),
            });
        }
        Ok(MoeBatch { sentences })
    }

    /// Per-task logits `[n x 1]`, on the autodiff graph.
    pub fn forward_logits(
        &self,
        examples: &[Example],
    ) -> Result<(Vec<Tensor>, RoutingDecision)> {
        let batch = FeatureBatch::new(&self.schema, examples)?;
        let trunk = self.encoder.encode_batch(&batch)?;
        let moe_batch = self.moe_batch(&trunk, examples)?;
        let (outputs, routing) = self.moe.forward(&moe_batch)?;
        let rows: Vec<Tensor> = outputs.into_iter().map(|mut s| s.remove(0)).collect();
        let hidden = Tensor::concat_rows(&rows)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            logits.push(head.forward(&hidden)?);
        }
        Ok((logits, routing))
    }

    pub fn predict(&self, examples: &[Example]) -> Result<PredictionBatch> {
        let (logits, routing) = self.forward_logits(examples)?;
        let probs = logits
            .iter()
            .map(|l| l.sigmoid().value())
            .collect();
        Ok(PredictionBatch { probs, routing })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let loaded = ParamStore::load(path)?;
        self.store.load_values_from(&loaded)
    }
}

pub struct MmoeModel {
    pub store: ParamStore,
    pub encoder: GrecEncoder,
    pub mmoe: MmoeLayer,
    pub heads: Vec<Linear>,
    pub schema: FeatureSchema,
    pub vocab: TaskVocab,
}

impl MmoeModel {
    pub fn new(
        schema: &FeatureSchema,
        vocab: &TaskVocab,
        config: &GrecConfig,
        seed: u64,
    ) -> Result<MmoeModel> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = GrecEncoder::new(
            &mut store,
            schema,
            &config.encoder,
            &config.transformer,
            config.d,
            &mut rng,
        )?;
        let mmoe = MmoeLayer::new(
            &mut store,
            "mmoe",
            config.d,
            config.moe.expert_hidden,
            config.moe.experts,
            vocab.use_cases.len(),
            &mut rng,
        )?;
        let mut heads = Vec::with_capacity(vocab.use_cases.len());
        for uc in &vocab.use_cases {
            heads.push(Linear::new(
                &mut store,
                &format!("head.{}", uc),
                config.d,
                1,
                &mut rng,
            )?);
        }
        Ok(MmoeModel {
            store,
            encoder,
            mmoe,
            heads,
            schema: schema.clone(),
            vocab: vocab.clone(),
        })
    }

    pub fn forward_logits(
        &self,
        examples: &[Example],
    ) -> Result<(Vec<Tensor>, RoutingDecision)> {
        let batch = FeatureBatch::new(&self.schema, examples)?;
        let trunk = self.encoder.encode_batch(&batch)?;
        let per_task = self.mmoe.forward(&trunk)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        for (head, hidden) in self.heads.iter().zip(per_task.iter()) {
            logits.push(head.forward(hidden)?);
        }
        Ok((logits, RoutingDecision::default()))
    }

    pub fn predict(&self, examples: &[Example]) -> Result<PredictionBatch> {
        let (logits, routing) = self.forward_logits(examples)?;
        let probs = logits.iter().map(|l| l.sigmoid().value()).collect();
        Ok(PredictionBatch { probs, routing })
    }
}

/// Mean of per-task masked BCE over the tasks that have at least one
/// labeled example in the batch.
pub fn multi_task_loss(logits: &[Tensor], examples: &[Example]) -> Result<Tensor> {
    let mut per_task = Vec::new();
    for (t, task_logits) in logits.iter().enumerate() {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            if let Some(label) = ex.labels[t] {
                rows.push(i);
                targets.push(if label { 1.0 } else { 0.0 });
            }
        }
        if rows.is_empty() {
            continue;
        }
        let selected = task_logits.gather_rows(&rows)?;
        per_task.push(selected.bce_with_logits(&targets)?);
    }
    if per_task.is_empty() {
        return Err(Error::Contract("batch has no labeled examples".into()));
    }
    let k = per_task.len() as f64;
    let mut acc = per_task.remove(0);
    for l in per_task {
        acc = acc.add(&l)?;
    }
    Ok(acc.mul_scalar(1.0 / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_config() -> GrecConfig {
        GrecConfig {
            d: 8,
            transformer: TransformerConfig {
                blocks: 1,
                heads: 2,
                d_head: 0,
                mlp_hidden: 8,
                ..Default::default()
            },
            moe: MoeConfig {
                experts: 2,
                k: 1,
                capacity: None,
                expert_hidden: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn small_dataset(n: usize) -> crate::data::Dataset {
        generate_synthetic(&SyntheticSpec {
            n,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_trunk_heads_output_sigmoid_of_bias() {
        let ds = small_dataset(4);
        let model = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 0).unwrap();
        for (name, t) in model.store.iter() {
            if !name.starts_with("head.") {
                t.set_data(vec![0.0; t.numel()]).unwrap();
            } else if name.ends_with(".weight") {
                t.set_data(vec![0.0; t.numel()]).unwrap();
            }
        }
        let pred = model.predict(&ds.examples).unwrap();
        for (t, uc) in ds.vocab.use_cases.iter().enumerate() {
            let bias = model.store.get(&format!("head.{}.bias", uc)).unwrap().value()[0];
            let expect = 1.0 / (1.0 + (-bias).exp());
            for p in &pred.probs[t] {
                assert!((p - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_examples_get_identical_predictions() {
        let ds = small_dataset(3);
        let model = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 1).unwrap();
        let twice = vec![ds.examples[0].clone(), ds.examples[0].clone()];
        let pred = model.predict(&twice).unwrap();
        for task in &pred.probs {
            assert_eq!(task[0].to_bits(), task[1].to_bits());
        }
    }

    #[test]
    fn predictions_are_probabilities() {
        let ds = small_dataset(16);
        let model = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 2).unwrap();
        let pred = model.predict(&ds.examples).unwrap();
        assert_eq!(pred.probs.len(), 4);
        for task in &pred.probs {
            assert_eq!(task.len(), 16);
            assert!(task.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn single_expert_predictions_identical_across_granularities() {
        let ds = small_dataset(12);
        let mut base: Option<Vec<Vec<f64>>> = None;
        for g in Granularity::ALL {
            let mut cfg = tiny_config();
            cfg.moe.experts = 1;
            cfg.moe.k = 1;
            cfg.moe.granularity = g;
            let model = GrecModel::new(&ds.schema, &ds.vocab, &cfg, 5).unwrap();
            let pred = model.predict(&ds.examples).unwrap();
            match &base {
                None => base = Some(pred.probs),
                Some(b) => {
                    for (a, c) in b.iter().flatten().zip(pred.probs.iter().flatten()) {
                        assert_eq!(a.to_bits(), c.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_identical_predictions() {
        let ds = small_dataset(8);
        let model = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 3).unwrap();
        let before = model.predict(&ds.examples).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let mut fresh = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 99).unwrap();
        fresh.load_params(&path).unwrap();
        let after = fresh.predict(&ds.examples).unwrap();
        for (a, b) in before.probs.iter().flatten().zip(after.probs.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masked_loss_ignores_unlabeled_tasks() {
        let ds = small_dataset(6);
        let model = GrecModel::new(&ds.schema, &ds.vocab, &tiny_config(), 4).unwrap();
        let (logits, _) = model.forward_logits(&ds.examples).unwrap();
        let loss = multi_task_loss(&logits, &ds.examples).unwrap();
        assert!(loss.item().is_finite());
        // an all-unlabeled batch is a contract error
        let mut unlabeled = ds.examples.clone();
        for ex in &mut unlabeled {
            ex.labels = vec![None; 4];
        }
        let (logits, _) = model.forward_logits(&unlabeled).unwrap();
        assert!(multi_task_loss(&logits, &unlabeled).is_err());
    }

    #[test]
    fn mmoe_baseline_runs_and_predicts() {
        let ds = small_dataset(10);
        let model = MmoeModel::new(&ds.schema, &ds.vocab, &tiny_config(), 6).unwrap();
        let pred = model.predict(&ds.examples).unwrap();
        assert_eq!(pred.probs.len(), 4);
        assert!(pred.routing.units.is_empty());
        assert!(pred.probs.iter().flatten().all(|p| p.is_finite()));
    }
}
