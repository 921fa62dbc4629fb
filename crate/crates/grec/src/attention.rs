//! Scaled dot-product attention, multi-head and multi-query (shared
//! key/value) variants, and sequential vs. parallel transformer blocks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, MlpBlock};
use crate::param::{Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    MultiHead,
    MultiQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTopology {
    Sequential,
    Parallel,
}

pub struct AttentionParams {
    pub w_q: Tensor, // [d x (h * d_head)]
    pub w_k: Tensor, // [d x kv_width]
    pub w_v: Tensor, // [d x kv_width]
    pub w_o: Tensor, // [(h * d_head) x d]
    pub heads: usize,
    pub d_head: usize,
    pub mode: AttentionMode,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_head: usize,
        mode: AttentionMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<AttentionParams> {
        let kv_width = match mode {
            AttentionMode::MultiHead => heads * d_head,
            AttentionMode::MultiQuery => d_head,
        };
        Ok(AttentionParams {
            w_q: store.create(
                &format!("{}.w_q", name),
                &[d, heads * d_head],
                Init::GlorotUniform,
                rng,
            )?,
            w_k: store.create(
                &format!("{}.w_k", name),
                &[d, kv_width],
                Init::GlorotUniform,
                rng,
            )?,
            w_v: store.create(
                &format!("{}.w_v", name),
                &[d, kv_width],
                Init::GlorotUniform,
                rng,
            )?,
            w_o: store.create(
                &format!("{}.w_o", name),
                &[heads * d_head, d],
                Init::GlorotUniform,
                rng,
            )?,
            heads,
            d_head,
            mode,
        })
    }

    pub fn kv_width(&self) -> usize {
        self.w_k.shape()[1]
    }
}

/// softmax(Q K^T / sqrt(dk)) V
pub fn scaled_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::Dim(format!(
            "scaled_attention key width mismatch: Q [{}x{}] vs K [{}x{}]",
            sq[0], sq[1], sk[0], sk[1]
        )));
    }
    if sv[0] != sk[0] {
        return Err(Error::Dim(format!(
            "scaled_attention K has {} rows but V has {}",
            sk[0], sv[0]
        )));
    }
    let dk = sq[1];
    let logits = q
        .matmul(&k.transpose2()?)?
        .mul_scalar(1.0 / (dk as f64).sqrt());
    let weights = logits.softmax(1)?;
    weights.matmul(v)
}

/// Per-head attention over projected tensors, concatenated and projected
/// by w_o. In multi-query mode every head shares the single K/V
/// projection.
pub fn attention_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    let q_all = x.matmul(&p.w_q)?;
    let k_all = x.matmul(&p.w_k)?;
    let v_all = x.matmul(&p.w_v)?;
    let mut heads = Vec::with_capacity(p.heads);
    for i in 0..p.heads {
        let q_i = q_all.slice_cols(i * p.d_head, p.d_head)?;
        let (k_i, v_i) = match p.mode {
            AttentionMode::MultiHead => (
                k_all.slice_cols(i * p.d_head, p.d_head)?,
                v_all.slice_cols(i * p.d_head, p.d_head)?,
            ),
            AttentionMode::MultiQuery => (
                k_all.slice_cols(0, p.d_head)?,
                v_all.slice_cols(0, p.d_head)?,
            ),
        };
        heads.push(scaled_attention(&q_i, &k_i, &v_i)?);
    }
    Tensor::concat_cols(&heads)?.matmul(&p.w_o)
}

pub fn multi_head_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    if p.mode != AttentionMode::MultiHead {
        return Err(Error::Contract(
            "multi_head_forward requires multi_head mode".into(),
        ));
    }
    attention_forward(x, p)
}

pub fn multi_query_forward(x: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    if p.mode != AttentionMode::MultiQuery {
        return Err(Error::Contract(
            "multi_query_forward requires multi_query mode".into(),
        ));
    }
    attention_forward(x, p)
}

pub struct TransformerBlock {
    pub attn: AttentionParams,
    pub mlp: MlpBlock,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub topology: BlockTopology,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        d_head: usize,
        mlp_hidden: usize,
        mode: AttentionMode,
        topology: BlockTopology,
        rng: &mut ChaCha8Rng,
    ) -> Result<TransformerBlock> {
        Ok(TransformerBlock {
            attn: AttentionParams::new(store, &format!("{}.attn", name), d, heads, d_head, mode, rng)?,
            mlp: MlpBlock::new(store, &format!("{}.mlp", name), d, mlp_hidden, rng)?,
            ln1: LayerNorm::new(store, &format!("{}.ln1", name), d, rng)?,
            ln2: LayerNorm::new(store, &format!("{}.ln2", name), d, rng)?,
            topology,
        })
    }

    /// Sequential: y = x + MLP(LN2(x + Attn(LN1(x))))
    /// Parallel:   y = x + MLP(LN1(x)) + Attn(LN1(x))
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self.topology {
            BlockTopology::Sequential => {
                let attn = attention_forward(&self.ln1.forward(x)?, &self.attn)?;
                let inner = x.add(&attn)?;
                x.add(&self.mlp.forward(&self.ln2.forward(&inner)?)?)
            }
            BlockTopology::Parallel => {
                let normed = self.ln1.forward(x)?;
                let mlp = self.mlp.forward(&normed)?;
                let attn = attention_forward(&normed, &self.attn)?;
                x.add(&mlp)?.add(&attn)
            }
        }
    }
}
