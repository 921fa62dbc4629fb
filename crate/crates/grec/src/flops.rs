//! Analytic FLOPs accounting: multiply-add counts by formula, exact
//! integers, no hardware measurement. Used to compare routing
//! granularities and to show that growing the expert pool at fixed k
//! barely moves total model cost.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::encoder::Example;
use crate::error::{Error, Result};
use crate::moe::Granularity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Per-token dispatch overhead, in units of d.
    pub c_tok: u64,
    /// Per-group dispatch overhead, in units of d.
    pub c_grp: u64,
}

impl Default for CostModel {
    fn default() -> CostModel {
        CostModel { c_tok: 2, c_grp: 2 }
    }
}

/// Routing-relevant counts for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchProfile {
    /// Content tokens N.
    pub tokens: u64,
    /// Sentences M.
    pub sentences: u64,
    /// Distinct tasks T.
    pub distinct_tasks: u64,
    /// Distinct task sentences TS.
    pub distinct_task_sentences: u64,
    /// Task tokens per task sentence S.
    pub task_tokens_per_sentence: u64,
}

impl BatchProfile {
    /// The fixed profile used for routing-cost comparisons: a batch
    /// drawn from the default synthetic task structure (3 flows x 4 use
    /// cases = 12 task sentences, each appearing twice, one trunk token
    /// per example).
    pub fn calibration() -> BatchProfile {
        BatchProfile {
            tokens: 24,
            sentences: 24,
            distinct_tasks: 4,
            distinct_task_sentences: 12,
            task_tokens_per_sentence: 2,
        }
    }

    /// Measure a concrete batch: one trunk token and one sentence per
    /// example, tasks/task-sentences deduplicated.
    pub fn from_examples(examples: &[Example]) -> BatchProfile {
        let mut tasks: Vec<usize> = Vec::new();
        let mut sentences: Vec<&crate::moe::TaskSentence> = Vec::new();
        let mut s_max = 0u64;
        for ex in examples {
            if let Some(uc) = ex.task_sentence.use_case() {
                if !tasks.contains(&uc.id) {
                    tasks.push(uc.id);
                }
            }
            if !sentences.iter().any(|ts| **ts == ex.task_sentence) {
                sentences.push(&ex.task_sentence);
            }
            s_max = s_max.max(ex.task_sentence.tokens.len() as u64);
        }
        BatchProfile {
            tokens: examples.len() as u64,
            sentences: examples.len() as u64,
            distinct_tasks: tasks.len() as u64,
            distinct_task_sentences: sentences.len() as u64,
            task_tokens_per_sentence: s_max,
        }
    }
}

/// Itemized multiply-add counts. `gate + dispatch` is the routing cost;
/// `experts`, `attention`, and `mlp` cover the compute they steer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopsReport {
    pub attention: u128,
    pub mlp: u128,
    pub gate: u128,
    pub dispatch: u128,
    pub experts: u128,
}

impl FlopsReport {
    pub fn routing_total(&self) -> u128 {
        self.gate + self.dispatch
    }

    pub fn model_total(&self) -> u128 {
        self.attention + self.mlp + self.gate + self.dispatch + self.experts
    }

    /// Machine-readable line: `component=count` pairs.
    pub fn line(&self) -> String {
        format!(
            "attention={} mlp={} gate={} dispatch={} experts={} routing_total={} model_total={}",
            self.attention,
            self.mlp,
            self.gate,
            self.dispatch,
            self.experts,
            self.routing_total(),
            self.model_total()
        )
    }
}

/// Routing cost (gate plus dispatch) for one MoE invocation over a
/// batch. Gate cost is 2dE per routed unit; pooling costs d per pooled
/// token; dispatch overhead is c_tok·d per token or c_grp·d per group.
pub fn count_routing_flops(
    granularity: Granularity,
    profile: &BatchProfile,
    d: u64,
    experts: u64,
    k: u64,
    cost: &CostModel,
) -> Result<FlopsReport> {
    if profile.tokens == 0 {
        return Err(Error::Contract("routing flops: zero tokens in batch".into()));
    }
    if cost.c_tok == 0 || cost.c_grp == 0 {
        return Err(Error::Config("cost model parameters must be positive".into()));
    }
    let d = d as u128;
    let e = experts as u128;
    let k = k as u128;
    let n = profile.tokens as u128;
    let m = profile.sentences as u128;
    let t = profile.distinct_tasks as u128;
    let ts = profile.distinct_task_sentences as u128;
    let s = profile.task_tokens_per_sentence as u128;
    let gate_each = 2 * d * e;
    let (gate, dispatch) = match granularity {
        Granularity::Token => (n * gate_each, n * k * cost.c_tok as u128 * d),
        Granularity::Sentence => (
            m * gate_each,
            n * d + n * k * cost.c_tok as u128 * d,
        ),
        Granularity::Task => (t * gate_each, t * k * cost.c_grp as u128 * d),
        Granularity::TaskSentence => (
            ts * gate_each,
            ts * s * d + ts * k * cost.c_grp as u128 * d,
        ),
    };
    Ok(FlopsReport {
        gate,
        dispatch,
        ..FlopsReport::default()
    })
}

/// Transformer-side dimensions needed for whole-model accounting.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub d: u64,
    pub heads: u64,
    pub d_head: u64,
    pub mlp_hidden: u64,
    pub blocks: u64,
    pub mode: AttentionMode,
    pub expert_hidden: u64,
    pub experts: u64,
    pub k: u64,
}

/// Attention multiply-adds for one sequence of length `s` through one
/// block: Q/K/V projections, score and value products, output
/// projection. Multi-query shrinks the KV projection by 1/heads.
pub fn attention_flops(seq_len: u64, dims: &ModelDims) -> u128 {
    let s = seq_len as u128;
    let d = dims.d as u128;
    let h = dims.heads as u128;
    let dh = dims.d_head as u128;
    let kv_width = match dims.mode {
        AttentionMode::MultiHead => h * dh,
        AttentionMode::MultiQuery => dh,
    };
    let q = 2 * s * d * h * dh;
    let kv = 2 * 2 * s * d * kv_width;
    let scores = 2 * s * s * h * dh;
    let values = 2 * s * s * h * dh;
    let out = 2 * s * h * dh * d;
    q + kv + scores + values + out
}

/// Two-layer feedforward multiply-adds for `rows` rows.
pub fn mlp_flops(rows: u64, d: u64, hidden: u64) -> u128 {
    4 * rows as u128 * d as u128 * hidden as u128
}

/// Whole-model cost for one batch: sequence transformer blocks, MoE
/// routing, and expert compute. Experts are counted only for dispatched
/// (unit, expert) pairs, so the expert term grows with k but not with E;
/// only the gate term sees E.
pub fn count_model_flops(
    granularity: Granularity,
    profile: &BatchProfile,
    seq_lens: &[u64],
    dims: &ModelDims,
    cost: &CostModel,
) -> Result<FlopsReport> {
    let routing = count_routing_flops(granularity, profile, dims.d, dims.experts, dims.k, cost)?;
    let mut attention = 0u128;
    let mut mlp = 0u128;
    for &s in seq_lens {
        if s == 0 {
            continue;
        }
        attention += dims.blocks as u128 * attention_flops(s, dims);
        mlp += dims.blocks as u128 * mlp_flops(s, dims.d, dims.mlp_hidden);
    }
    let experts = profile.tokens as u128 * dims.k as u128 * mlp_flops(1, dims.d, dims.expert_hidden);
    Ok(FlopsReport {
        attention,
        mlp,
        gate: routing.gate,
        dispatch: routing.dispatch,
        experts,
    })
}

/// Dense MMoE baseline: every expert runs on every sentence input, and
/// each task owns a softmax gate over all experts.
pub fn count_mmoe_flops(
    inputs: u64,
    tasks: u64,
    d: u64,
    experts: u64,
    expert_hidden: u64,
) -> FlopsReport {
    let gate = inputs as u128 * tasks as u128 * 2 * d as u128 * experts as u128;
    let expert_cost = experts as u128 * mlp_flops(inputs, d, expert_hidden);
    FlopsReport {
        gate,
        experts: expert_cost,
        ..FlopsReport::default()
    }
}
