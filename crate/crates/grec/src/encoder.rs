//! Wide-and-deep multi-modal input encoding: categorical embeddings and
//! a deep tower on the user side, normalized numericals through wide
//! feedforward paths, precomputed embedding vectors through linear
//! adapters, item encoding, and behavior-sequence towers feeding the
//! transformer blocks.

use std::cell::Cell;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMode, BlockTopology, TransformerBlock};
use crate::error::{Error, Result};
use crate::moe::TaskSentence;
use crate::nn::{Embedding, Linear};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalField {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceField {
    pub name: String,
    pub vocab: usize,
    pub max_len: usize,
}

/// Layout of one mini-batch's raw inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub user_categorical: Vec<CategoricalField>,
    pub user_numerical_width: usize,
    /// Width of the precomputed intent vector (e.g. a search-term
    /// encoder output); 0 when absent.
    pub user_pretrained_width: usize,
    pub item_vocab: usize,
    pub item_id_dim: usize,
    pub item_categorical: Vec<CategoricalField>,
    pub item_numerical_width: usize,
    /// Width of the precomputed item image/text vector; 0 when absent.
    pub item_pretrained_width: usize,
    pub sequences: Vec<SequenceField>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = Vec::new();
        for f in self.user_categorical.iter().chain(self.item_categorical.iter()) {
            if f.vocab == 0 || f.dim == 0 {
                return Err(Error::Config(format!(
                    "categorical field '{}' must have positive vocab and dim",
                    f.name
                )));
            }
            names.push(&f.name);
        }
        for s in &self.sequences {
            if s.vocab == 0 || s.max_len == 0 {
                return Err(Error::Config(format!(
                    "sequence field '{}' must have positive vocab and max_len",
                    s.name
                )));
            }
            names.push(&s.name);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config("duplicate feature field names".into()));
        }
        if self.item_vocab == 0 || self.item_id_dim == 0 {
            return Err(Error::Config("item vocab and id dim must be positive".into()));
        }
        Ok(())
    }
}

/// A padded behavior sequence: `ids[..len]` is valid, the tail is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqData {
    pub ids: Vec<usize>,
    pub len: usize,
}

impl SeqData {
    pub fn from_ids(ids: Vec<usize>) -> SeqData {
        let len = ids.len();
        SeqData { ids, len }
    }

    pub fn valid(&self) -> &[usize] {
        &self.ids[..self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user_categorical: Vec<usize>,
    pub user_numerical: Vec<f64>,
    pub user_pretrained: Vec<f64>,
    pub item_id: usize,
    pub item_categorical: Vec<usize>,
    pub item_numerical: Vec<f64>,
    pub item_pretrained: Vec<f64>,
    pub sequences: Vec<SeqData>,
    pub task_sentence: TaskSentence,
    /// Per use case; `None` where the label mask is unset.
    pub labels: Vec<Option<bool>>,
    pub time_index: usize,
}

/// One mini-batch view over examples conforming to a schema.
#[derive(Debug)]
pub struct FeatureBatch<'a> {
    pub schema: &'a FeatureSchema,
    pub examples: &'a [Example],
}

impl<'a> FeatureBatch<'a> {
    pub fn new(schema: &'a FeatureSchema, examples: &'a [Example]) -> Result<FeatureBatch<'a>> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.user_categorical.len() != schema.user_categorical.len()
                || ex.user_numerical.len() != schema.user_numerical_width
                || ex.user_pretrained.len() != schema.user_pretrained_width
                || ex.item_categorical.len() != schema.item_categorical.len()
                || ex.item_numerical.len() != schema.item_numerical_width
                || ex.item_pretrained.len() != schema.item_pretrained_width
                || ex.sequences.len() != schema.sequences.len()
            {
                return Err(Error::Contract(format!(
                    "example {} does not conform to the feature schema",
                    i
                )));
            }
        }
        Ok(FeatureBatch { schema, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Widths of the four item-encoding segments, concatenated in the fixed
/// order id | deep | wide | pretrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemEncoding {
    pub id_dim: usize,
    pub deep_width: usize,
    pub wide_width: usize,
    pub pretrained_width: usize,
}

impl ItemEncoding {
    pub fn total(&self) -> usize {
        self.id_dim + self.deep_width + self.wide_width + self.pretrained_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output width of the user deep tower.
    pub user_deep_dim: usize,
    /// Output width of the user wide (numerical) feedforward.
    pub user_wide_dim: usize,
    /// Output width of the user intent adapter.
    pub user_intent_dim: usize,
    /// Output width of the item wide feedforward.
    pub item_wide_dim: usize,
    /// Output width of the item pretrained-vector adapter.
    pub item_pretrained_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            user_deep_dim: 16,
            user_wide_dim: 8,
            user_intent_dim: 8,
            item_wide_dim: 8,
            item_pretrained_dim: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Per-head width; defaults to d / heads when zero.
    pub d_head: usize,
    pub mlp_hidden: usize,
    pub mode: AttentionMode,
    pub topology: BlockTopology,
}

impl Default for TransformerConfig {
    fn default() -> TransformerConfig {
        TransformerConfig {
            blocks: 1,
            heads: 4,
            d_head: 0,
            mlp_hidden: 64,
            mode: AttentionMode::MultiQuery,
            topology: BlockTopology::Parallel,
        }
    }
}

impl TransformerConfig {
    pub fn head_width(&self, d: usize) -> Result<usize> {
        if self.d_head > 0 {
            return Ok(self.d_head);
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "trunk width {} is not divisible by {} heads",
                d, self.heads
            )));
        }
        Ok(d / self.heads)
    }
}

struct SeqEncoder {
    embedding: Embedding,
    positional: Embedding,
    blocks: Vec<TransformerBlock>,
    max_len: usize,
}

/// Encodes a [`FeatureBatch`] into trunk tokens of width `d`.
pub struct GrecEncoder {
    d: usize,
    user_cat_embeddings: Vec<Embedding>,
    user_deep1: Option<Linear>,
    user_deep2: Option<Linear>,
    user_wide: Option<Linear>,
    user_intent: Option<Linear>,
    item_id_embedding: Embedding,
    item_cat_embeddings: Vec<Embedding>,
    item_wide: Option<Linear>,
    item_pretrained: Option<Linear>,
    seq_encoders: Vec<SeqEncoder>,
    fusion: Linear,
    item_layout: ItemEncoding,
    user_width: usize,
    truncated: Cell<u64>,
}

impl GrecEncoder {
    pub fn new(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        cfg: &EncoderConfig,
        transformer: &TransformerConfig,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GrecEncoder> {
        schema.validate()?;
        let mut user_cat_embeddings = Vec::new();
        let mut cat_total = 0;
        for f in &schema.user_categorical {
            user_cat_embeddings.push(Embedding::new(
                store,
                &format!("encoder.user.{}", f.name),
                f.vocab,
                f.dim,
                rng,
            )?);
            cat_total += f.dim;
        }
        let (user_deep1, user_deep2) = if cat_total > 0 {
            (
                Some(Linear::new(store, "encoder.user.deep1", cat_total, cfg.user_deep_dim, rng)?),
                Some(Linear::new(
                    store,
                    "encoder.user.deep2",
                    cfg.user_deep_dim,
                    cfg.user_deep_dim,
                    rng,
                )?),
            )
        } else {
            (None, None)
        };
        let user_wide = if schema.user_numerical_width > 0 {
            Some(Linear::new(
                store,
                "encoder.user.wide",
                schema.user_numerical_width,
                cfg.user_wide_dim,
                rng,
            )?)
        } else {
            None
        };
        let user_intent = if schema.user_pretrained_width > 0 {
            Some(Linear::new_no_bias(
                store,
                "encoder.user.intent",
                schema.user_pretrained_width,
                cfg.user_intent_dim,
                rng,
            )?)
        } else {
            None
        };
        let user_width = if cat_total > 0 { cfg.user_deep_dim } else { 0 }
            + if schema.user_numerical_width > 0 { cfg.user_wide_dim } else { 0 }
            + if schema.user_pretrained_width > 0 { cfg.user_intent_dim } else { 0 };

        let item_id_embedding = Embedding::new(
            store,
            "encoder.item.id",
            schema.item_vocab,
            schema.item_id_dim,
            rng,
        )?;
        let mut item_cat_embeddings = Vec::new();
        let mut item_deep_width = 0;
        for f in &schema.item_categorical {
            item_cat_embeddings.push(Embedding::new(
                store,
                &format!("encoder.item.{}", f.name),
                f.vocab,
                f.dim,
                rng,
            )?);
            item_deep_width += f.dim;
        }
        let item_wide = if schema.item_numerical_width > 0 {
            Some(Linear::new(
                store,
                "encoder.item.wide",
                schema.item_numerical_width,
                cfg.item_wide_dim,
                rng,
            )?)
        } else {
            None
        };
        let item_pretrained = if schema.item_pretrained_width > 0 {
            Some(Linear::new_no_bias(
                store,
                "encoder.item.pretrained",
                schema.item_pretrained_width,
                cfg.item_pretrained_dim,
                rng,
            )?)
        } else {
            None
        };
        let item_layout = ItemEncoding {
            id_dim: schema.item_id_dim,
            deep_width: item_deep_width,
            wide_width: if schema.item_numerical_width > 0 { cfg.item_wide_dim } else { 0 },
            pretrained_width: if schema.item_pretrained_width > 0 {
                cfg.item_pretrained_dim
            } else {
                0
            },
        };

        let mut seq_encoders = Vec::new();
        for f in &schema.sequences {
            let embedding = Embedding::new(
                store,
                &format!("encoder.seq.{}.embedding", f.name),
                f.vocab,
                d,
                rng,
            )?;
            let positional = Embedding::new(
                store,
                &format!("encoder.seq.{}.positional", f.name),
                f.max_len,
                d,
                rng,
            )?;
            let d_head = transformer.head_width(d)?;
            let mut blocks = Vec::new();
            for b in 0..transformer.blocks {
                blocks.push(TransformerBlock::new(
                    store,
                    &format!("encoder.seq.{}.block{}", f.name, b),
                    d,
                    transformer.heads,
                    d_head,
                    transformer.mlp_hidden,
                    transformer.mode,
                    transformer.topology,
                    rng,
                )?);
            }
            seq_encoders.push(SeqEncoder {
                embedding,
                positional,
                blocks,
                max_len: f.max_len,
            });
        }

        let fused_in = user_width + seq_encoders.len() * d + item_layout.total();
        let fusion = Linear::new(store, "encoder.fusion", fused_in, d, rng)?;

        Ok(GrecEncoder {
            d,
            user_cat_embeddings,
            user_deep1,
            user_deep2,
            user_wide,
            user_intent,
            item_id_embedding,
            item_cat_embeddings,
            item_wide,
            item_pretrained,
            seq_encoders,
            fusion,
            item_layout,
            user_width,
            truncated: Cell::new(0),
        })
    }

    pub fn user_width(&self) -> usize {
        self.user_width
    }

    pub fn item_layout(&self) -> ItemEncoding {
        self.item_layout
    }

    /// Sequences longer than max_len are truncated (keeping the most
    /// recent entries); this counts how many were.
    pub fn truncation_count(&self) -> u64 {
        self.truncated.get()
    }

    fn numerical_tensor(rows: &[&[f64]], width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::from_vec(vec![rows.len(), width], data)
    }

    /// User side: deep tower over categorical embeddings, wide
    /// feedforward over numericals, intent adapter over the pretrained
    /// vector, concatenated.
    pub fn encode_user(&self, batch: &FeatureBatch) -> Result<Tensor> {
        let n = batch.len();
        let mut parts = Vec::new();
        if let (Some(d1), Some(d2)) = (&self.user_deep1, &self.user_deep2) {
            let mut embs = Vec::new();
            for (fi, emb) in self.user_cat_embeddings.iter().enumerate() {
                let ids: Vec<usize> =
                    batch.examples.iter().map(|e| e.user_categorical[fi]).collect();
                embs.push(emb.lookup(&ids)?);
            }
            let deep_in = Tensor::concat_cols(&embs)?;
            parts.push(d2.forward(&d1.forward(&deep_in)?.relu())?);
        }
        if let Some(wide) = &self.user_wide {
            let rows: Vec<&[f64]> =
                batch.examples.iter().map(|e| e.user_numerical.as_slice()).collect();
            let x = Self::numerical_tensor(&rows, batch.schema.user_numerical_width)?;
            parts.push(wide.forward(&x)?);
        }
        if let Some(intent) = &self.user_intent {
            let rows: Vec<&[f64]> =
                batch.examples.iter().map(|e| e.user_pretrained.as_slice()).collect();
            let x = Self::numerical_tensor(&rows, batch.schema.user_pretrained_width)?;
            parts.push(intent.forward(&x)?);
        }
        if parts.is_empty() {
            return Err(Error::Config("user side has no feature fields".into()));
        }
        let _ = n;
        Tensor::concat_cols(&parts)
    }

    /// Item side, concatenated in the fixed order
    /// id embedding | deep | wide | pretrained.
    pub fn encode_item(&self, batch: &FeatureBatch) -> Result<Tensor> {
        let ids: Vec<usize> = batch.examples.iter().map(|e| e.item_id).collect();
        let mut parts = vec![self.item_id_embedding.lookup(&ids)?];
        if !self.item_cat_embeddings.is_empty() {
            let mut embs = Vec::new();
            for (fi, emb) in self.item_cat_embeddings.iter().enumerate() {
                let ids: Vec<usize> =
                    batch.examples.iter().map(|e| e.item_categorical[fi]).collect();
                embs.push(emb.lookup(&ids)?);
            }
            parts.push(Tensor::concat_cols(&embs)?);
        }
        if let Some(wide) = &self.item_wide {
            let rows: Vec<&[f64]> =
                batch.examples.iter().map(|e| e.item_numerical.as_slice()).collect();
            let x = Self::numerical_tensor(&rows, batch.schema.item_numerical_width)?;
            parts.push(wide.forward(&x)?);
        }
        if let Some(adapter) = &self.item_pretrained {
            let rows: Vec<&[f64]> =
                batch.examples.iter().map(|e| e.item_pretrained.as_slice()).collect();
            let x = Self::numerical_tensor(&rows, batch.schema.item_pretrained_width)?;
            parts.push(adapter.forward(&x)?);
        }
        Tensor::concat_cols(&parts)
    }

    /// One pooled vector per example for sequence field `field`:
    /// embedded ids plus positional embeddings through the transformer
    /// blocks, mean-pooled over valid positions. Empty sequences pool to
    /// the zero vector.
    pub fn encode_sequence_pooled(&self, field: usize, batch: &FeatureBatch) -> Result<Tensor> {
        let enc = &self.seq_encoders[field];
        let mut pooled = Vec::with_capacity(batch.len());
        for ex in batch.examples {
            let seq = &ex.sequences[field];
            let valid = seq.valid();
            let ids: &[usize] = if valid.len() > enc.max_len {
                self.truncated.set(self.truncated.get() + 1);
                &valid[valid.len() - enc.max_len..]
            } else {
                valid
            };
            if ids.is_empty() {
                pooled.push(Tensor::zeros(vec![1, self.d]));
                continue;
            }
            let positions: Vec<usize> = (0..ids.len()).collect();
            let mut x = enc
                .embedding
                .lookup(ids)?
                .add(&enc.positional.lookup(&positions)?)?;
            for block in &enc.blocks {
                x = block.forward(&x)?;
            }
            pooled.push(x.mean_rows()?);
        }
        Tensor::concat_rows(&pooled)
    }

    /// Full fusion: user vector, pooled sequence vectors, and item
    /// vector concatenated and projected to the trunk width.
    pub fn encode_batch(&self, batch: &FeatureBatch) -> Result<Tensor> {
        let mut parts = vec![self.encode_user(batch)?];
        for field in 0..self.seq_encoders.len() {
            parts.push(self.encode_sequence_pooled(field, batch)?);
        }
        parts.push(self.encode_item(batch)?);
        self.fusion.forward(&Tensor::concat_cols(&parts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::TaskSentence;
    use rand::Rng;
    use rand::SeedableRng;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            user_categorical: vec![CategoricalField {
                name: "segment".into(),
                vocab: 10,
                dim: 4,
            }],
            user_numerical_width: 3,
            user_pretrained_width: 4,
            item_vocab: 20,
            item_id_dim: 4,
            item_categorical: vec![CategoricalField {
                name: "brand".into(),
                vocab: 6,
                dim: 3,
            }],
            item_numerical_width: 2,
            item_pretrained_width: 4,
            sequences: vec![SequenceField {
                name: "devices".into(),
                vocab: 20,
                max_len: 4,
            }],
        }
    }

    fn example(r: &mut ChaCha8Rng, s: &FeatureSchema, seq: Vec<usize>) -> Example {
        Example {
            user_categorical: vec![r.gen_range(0..10)],
            user_numerical: (0..s.user_numerical_width).map(|_| r.gen_range(-1.0..1.0)).collect(),
            user_pretrained: (0..s.user_pretrained_width).map(|_| r.gen_range(-1.0..1.0)).collect(),
            item_id: r.gen_range(0..20),
            item_categorical: vec![r.gen_range(0..6)],
            item_numerical: (0..s.item_numerical_width).map(|_| r.gen_range(-1.0..1.0)).collect(),
            item_pretrained: (0..s.item_pretrained_width).map(|_| r.gen_range(-1.0..1.0)).collect(),
            sequences: vec![SeqData::from_ids(seq)],
            task_sentence: TaskSentence::pair(0, 0),
            labels: vec![None; 4],
            time_index: 0,
        }
    }

    fn build(seed: u64) -> (ParamStore, GrecEncoder, FeatureSchema) {
        let s = schema();
        let mut store = ParamStore::new();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let enc = GrecEncoder::new(
            &mut store,
            &s,
            &EncoderConfig::default(),
            &TransformerConfig {
                blocks: 1,
                heads: 2,
                d_head: 0,
                mlp_hidden: 8,
                mode: AttentionMode::MultiQuery,
                topology: BlockTopology::Parallel,
            },
            8,
            &mut r,
        )
        .unwrap();
        (store, enc, s)
    }

    #[test]
    fn zero_numericals_with_zero_bias_give_zero_wide_component() {
        let (store, enc, s) = build(0);
        let w = store.get("encoder.user.wide.weight").unwrap();
        w.set_data(vec![0.0; w.numel()]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let mut ex = example(&mut r, &s, vec![1, 2]);
        ex.user_numerical = vec![0.0; 3];
        let exs = [ex];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_user(&batch).unwrap().value();
        // wide segment sits after the deep tower output
        let cfg = EncoderConfig::default();
        let wide = &out[cfg.user_deep_dim..cfg.user_deep_dim + cfg.user_wide_dim];
        assert!(wide.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_categorical_deep_input_is_its_embedding_row() {
        let (_store, enc, s) = build(2);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let ex = example(&mut r, &s, vec![]);
        let id = ex.user_categorical[0];
        let table = enc.user_cat_embeddings[0].table.value();
        let expected = &table[id * 4..(id + 1) * 4];
        let got = enc.user_cat_embeddings[0].lookup(&[id]).unwrap().value();
        assert_eq!(got, expected.to_vec());
    }

    #[test]
    fn user_width_arithmetic() {
        let (_store, enc, s) = build(4);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let exs = [example(&mut r, &s, vec![0])];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_user(&batch).unwrap();
        let cfg = EncoderConfig::default();
        let expect = cfg.user_deep_dim + cfg.user_wide_dim + cfg.user_intent_dim;
        assert_eq!(out.shape(), vec![1, expect]);
        assert_eq!(enc.user_width(), expect);
    }

    #[test]
    fn item_zero_pretrained_zeroes_only_last_segment() {
        let (_store, enc, s) = build(6);
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut ex = example(&mut r, &s, vec![]);
        let mut ex_zero = ex.clone();
        ex_zero.item_pretrained = vec![0.0; 4];
        ex.item_pretrained = vec![0.5; 4];
        let layout = enc.item_layout();
        let a = {
            let exs = [ex];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_item(&batch).unwrap().value()
        };
        let b = {
            let exs = [ex_zero];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_item(&batch).unwrap().value()
        };
        let split = layout.total() - layout.pretrained_width;
        assert_eq!(&a[..split], &b[..split]);
        assert!(b[split..].iter().all(|v| *v == 0.0));
        assert!(a[split..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn items_differing_only_in_id_differ_only_in_id_segment() {
        let (_store, enc, s) = build(8);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let ex = example(&mut r, &s, vec![]);
        let mut ex2 = ex.clone();
        ex2.item_id = (ex.item_id + 1) % 20;
        let layout = enc.item_layout();
        let exs = [ex, ex2];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_item(&batch).unwrap().value();
        let w = layout.total();
        assert_eq!(out[w + layout.id_dim..2 * w], out[layout.id_dim..w]);
        assert_ne!(out[w..w + layout.id_dim], out[..layout.id_dim]);
    }

    #[test]
    fn item_width_is_sum_of_parts() {
        let (_store, enc, s) = build(10);
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let exs = [example(&mut r, &s, vec![])];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_item(&batch).unwrap();
        assert_eq!(out.shape()[1], enc.item_layout().total());
    }

    #[test]
    fn empty_sequence_pools_to_zero() {
        let (_store, enc, s) = build(12);
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let exs = [example(&mut r, &s, vec![])];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_sequence_pooled(0, &batch).unwrap().value();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_item_sequence_with_zero_blocks_is_embedding_plus_positional() {
        let (store, enc, s) = build(14);
        // zero every block parameter so the block is the identity
        for (name, t) in store.iter() {
            if name.contains(".block0.") {
                t.set_data(vec![0.0; t.numel()]).unwrap();
            }
        }
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let exs = [example(&mut r, &s, vec![3])];
        let batch = FeatureBatch::new(&s, &exs).unwrap();
        let out = enc.encode_sequence_pooled(0, &batch).unwrap().value();
        let emb = enc.seq_encoders[0].embedding.table.value();
        let pos = enc.seq_encoders[0].positional.table.value();
        for j in 0..8 {
            assert!((out[j] - (emb[3 * 8 + j] + pos[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn pad_invariance() {
        let (_store, enc, s) = build(16);
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let ex = example(&mut r, &s, vec![5, 2, 9]);
        let mut padded = ex.clone();
        padded.sequences[0] = SeqData {
            ids: vec![5, 2, 9, 17],
            len: 3,
        };
        let a = {
            let exs = [ex];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_batch(&batch).unwrap().value()
        };
        let b = {
            let exs = [padded];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_batch(&batch).unwrap().value()
        };
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn overlong_sequence_truncates_keeping_most_recent() {
        let (_store, enc, s) = build(18);
        let mut r = ChaCha8Rng::seed_from_u64(19);
        let long = example(&mut r, &s, vec![1, 2, 3, 4, 5, 6]);
        let mut tail = long.clone();
        tail.sequences[0] = SeqData::from_ids(vec![3, 4, 5, 6]);
        let a = {
            let exs = [long];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_sequence_pooled(0, &batch).unwrap().value()
        };
        assert_eq!(enc.truncation_count(), 1);
        let b = {
            let exs = [tail];
            let batch = FeatureBatch::new(&s, &exs).unwrap();
            enc.encode_sequence_pooled(0, &batch).unwrap().value()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_given_seed() {
        let mut r1 = ChaCha8Rng::seed_from_u64(21);
        let (_s1, e1, s) = build(20);
        let exs1 = [example(&mut r1, &s, vec![1, 2])];
        let mut r2 = ChaCha8Rng::seed_from_u64(21);
        let (_s2, e2, s2) = build(20);
        let exs2 = [example(&mut r2, &s2, vec![1, 2])];
        let a = {
            let b = FeatureBatch::new(&s, &exs1).unwrap();
            e1.encode_batch(&b).unwrap().value()
        };
        let b = {
            let b = FeatureBatch::new(&s2, &exs2).unwrap();
            e2.encode_batch(&b).unwrap().value()
        };
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn schema_violation_names_the_example() {
        let s = schema();
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let mut ex = example(&mut r, &s, vec![]);
        ex.user_numerical = vec![0.0; 99];
        let exs = [ex];
        let err = FeatureBatch::new(&s, &exs).unwrap_err().to_string();
        assert!(err.contains("example 0"), "{}", err);
    }
}
