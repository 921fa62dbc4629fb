//! Sparse mixture-of-experts layer with top-k gating, expert capacity,
//! four routing granularities (token, sentence, task, task-sentence),
//! and a dense multi-gate (MMoE) baseline.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, MlpBlock};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Flow,
    UseCase,
}

/// A routable task token: a flow (customer journey) or a use case
/// (optimized outcome), identified by an index into its kind's vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskToken {
    pub kind: TokenKind,
    pub id: usize,
}

impl TaskToken {
    pub fn flow(id: usize) -> TaskToken {
        TaskToken {
            kind: TokenKind::Flow,
            id,
        }
    }

    pub fn use_case(id: usize) -> TaskToken {
        TaskToken {
            kind: TokenKind::UseCase,
            id,
        }
    }
}

/// Ordered task tokens identifying a routing unit; canonically
/// `[flow, use_case]`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskSentence {
    pub tokens: Vec<TaskToken>,
}

impl TaskSentence {
    pub fn pair(flow_id: usize, use_case_id: usize) -> TaskSentence {
        TaskSentence {
            tokens: vec![TaskToken::flow(flow_id), TaskToken::use_case(use_case_id)],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The use-case token, which defines the task boundary for
    /// task-level routing.
    pub fn use_case(&self) -> Option<TaskToken> {
        self.tokens
            .iter()
            .copied()
            .find(|t| t.kind == TokenKind::UseCase)
    }
}

/// Names for flows and use cases; also fixes the global task-embedding
/// indices (flows first, then use cases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskVocab {
    pub flows: Vec<String>,
    pub use_cases: Vec<String>,
}

impl TaskVocab {
    pub fn standard() -> TaskVocab {
        TaskVocab {
            flows: vec!["EUP".into(), "AAL".into(), "NSE".into()],
            use_cases: vec!["CTR".into(), "CTCVR".into(), "ATC".into(), "CVR".into()],
        }
    }

    pub fn total(&self) -> usize {
        self.flows.len() + self.use_cases.len()
    }

    pub fn global_index(&self, t: &TaskToken) -> Result<usize> {
        match t.kind {
            TokenKind::Flow if t.id < self.flows.len() => Ok(t.id),
            TokenKind::UseCase if t.id < self.use_cases.len() => {
                Ok(self.flows.len() + t.id)
            }
            _ => Err(Error::Index(format!(
                "task token {:?} outside vocabulary ({} flows, {} use cases)",
                t,
                self.flows.len(),
                self.use_cases.len()
            ))),
        }
    }

    pub fn token_name(&self, t: &TaskToken) -> &str {
        match t.kind {
            TokenKind::Flow => &self.flows[t.id],
            TokenKind::UseCase => &self.use_cases[t.id],
        }
    }

    pub fn sentence_name(&self, s: &TaskSentence) -> String {
        s.tokens
            .iter()
            .map(|t| self.token_name(t))
            .collect::<Vec<_>>()
            .join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Sentence,
    Task,
    TaskSentence,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Token,
        Granularity::Sentence,
        Granularity::Task,
        Granularity::TaskSentence,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Granularity::Token => "token",
            Granularity::Sentence => "sentence",
            Granularity::Task => "task",
            Granularity::TaskSentence => "task_sentence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateWeighting {
    /// Softmax over the k selected logits (default).
    SoftmaxSelected,
    /// Full softmax, truncated to the selection and renormalized.
    TruncateRenormalize,
}

/// Gating network: task embedding table plus a single linear projection
/// from the routing-unit representation to per-expert logits.
pub struct GateNetwork {
    pub task_embedding: Embedding, // [task_vocab x d]
    pub proj: Linear,              // [d x E]
}

impl GateNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        task_vocab: usize,
        d: usize,
        experts: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GateNetwork> {
        Ok(GateNetwork {
            task_embedding: Embedding::new(
                store,
                &format!("{}.task_embedding", name),
                task_vocab,
                d,
                rng,
            )?,
            proj: Linear::new(store, &format!("{}.proj", name), d, experts, rng)?,
        })
    }
}

/// One routing unit: the representation fed to the gate and the content
/// tokens (sentence index, token index) it covers.
pub struct RoutingUnit {
    pub id: String,
    pub repr: Tensor, // [1 x d]
    pub token_refs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRouting {
    pub unit_id: String,
    /// Selected expert indices, sorted ascending.
    pub experts: Vec<usize>,
    /// Gate weights aligned with `experts`; sum to 1.
    pub weights: Vec<f64>,
    /// Experts rejected by capacity for this unit.
    pub overflowed: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingDecision {
    pub units: Vec<UnitRouting>,
}

impl RoutingDecision {
    /// Line-oriented dump: unit_id, expert indices, weights, overflow flag.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for u in &self.units {
            let experts = u
                .experts
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let weights = u
                .weights
                .iter()
                .map(|w| format!("{:.6}", w))
                .collect::<Vec<_>>()
                .join(",");
            let overflow = if u.overflowed.is_empty() {
                "-".to_string()
            } else {
                u.overflowed
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let _ = writeln!(out, "{}\t{}\t{}\t{}", u.unit_id, experts, weights, overflow);
        }
        out
    }
}

/// One example's content tokens plus its task sentence.
pub struct MoeSentence {
    pub tokens: Vec<Tensor>, // each [1 x d]
    pub task_sentence: TaskSentence,
}

pub struct MoeBatch {
    pub sentences: Vec<MoeSentence>,
}

pub struct MoeLayer {
    pub experts: Vec<MlpBlock>,
    pub gate: GateNetwork,
    pub k: usize,
    /// Max routing units per expert per batch; `None` = unlimited.
    pub capacity: Option<usize>,
    pub granularity: Granularity,
    pub weighting: GateWeighting,
    pub vocab: TaskVocab,
}

impl MoeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        expert_hidden: usize,
        num_experts: usize,
        k: usize,
        capacity: Option<usize>,
        granularity: Granularity,
        vocab: TaskVocab,
        rng: &mut ChaCha8Rng,
    ) -> Result<MoeLayer> {
        if k < 1 || k > num_experts {
            return Err(Error::Contract(format!(
                "top-k {} must lie in 1..={}",
                k, num_experts
            )));
        }
        if capacity == Some(0) {
            return Err(Error::Contract("expert capacity must be >= 1".into()));
        }
        let mut experts = Vec::with_capacity(num_experts);
        for e in 0..num_experts {
            experts.push(MlpBlock::new(
                store,
                &format!("{}.expert{}", name, e),
                d,
                expert_hidden,
                rng,
            )?);
        }
        let gate = GateNetwork::new(store, &format!("{}.gate", name), vocab.total(), d, num_experts, rng)?;
        Ok(MoeLayer {
            experts,
            gate,
            k,
            capacity,
            granularity,
            weighting: GateWeighting::SoftmaxSelected,
            vocab,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Per-expert logits for one routing-unit representation; no softmax.
    pub fn gate_logits(&self, unit_repr: &Tensor) -> Result<Tensor> {
        self.gate.proj.forward(unit_repr)
    }

    /// Build routing units for the layer's granularity.
    pub fn routing_units(&self, batch: &MoeBatch) -> Result<Vec<RoutingUnit>> {
        let mut units: Vec<RoutingUnit> = Vec::new();
        match self.granularity {
            Granularity::Token => {
                for (si, s) in batch.sentences.iter().enumerate() {
                    if s.tokens.is_empty() {
                        return Err(Error::Contract(format!(
                            "sentence {} has no content tokens",
                            si
                        )));
                    }
                    for (ti, tok) in s.tokens.iter().enumerate() {
                        units.push(RoutingUnit {
                            id: format!("s{}.t{}", si, ti),
                            repr: tok.clone(),
                            token_refs: vec![(si, ti)],
                        });
                    }
                }
            }
            Granularity::Sentence => {
                for (si, s) in batch.sentences.iter().enumerate() {
                    if s.tokens.is_empty() {
                        return Err(Error::Contract(format!(
                            "sentence {} has no content tokens",
                            si
                        )));
                    }
                    let repr = Tensor::concat_rows(&s.tokens)?.mean_rows()?;
                    units.push(RoutingUnit {
                        id: format!("s{}", si),
                        repr,
                        token_refs: (0..s.tokens.len()).map(|ti| (si, ti)).collect(),
                    });
                }
            }
            Granularity::Task => {
                // one unit per distinct use-case token, first-appearance order
                let mut groups: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
                for (si, s) in batch.sentences.iter().enumerate() {
                    let uc = s.task_sentence.use_case().ok_or_else(|| {
                        Error::Contract(format!(
                            "sentence {} has no use-case task token",
                            si
                        ))
                    })?;
                    let gid = self.vocab.global_index(&uc)?;
                    let refs: Vec<(usize, usize)> =
                        (0..s.tokens.len()).map(|ti| (si, ti)).collect();
                    match groups.iter_mut().find(|(g, _)| *g == gid) {
                        Some((_, v)) => v.extend(refs),
                        None => groups.push((gid, refs)),
                    }
                }
                for (gid, refs) in groups {
                    let repr = self.gate.task_embedding.lookup(&[gid])?;
                    let name = TaskToken::use_case(gid - self.vocab.flows.len());
                    units.push(RoutingUnit {
                        id: format!("task:{}", self.vocab.token_name(&name)),
                        repr,
                        token_refs: refs,
                    });
                }
            }
            Granularity::TaskSentence => {
                let mut groups: Vec<(TaskSentence, Vec<(usize, usize)>)> = Vec::new();
                for (si, s) in batch.sentences.iter().enumerate() {
                    if s.task_sentence.is_empty() {
                        return Err(Error::Contract(format!(
                            "sentence {} has an empty task sentence",
                            si
                        )));
                    }
                    let refs: Vec<(usize, usize)> =
                        (0..s.tokens.len()).map(|ti| (si, ti)).collect();
                    match groups
                        .iter_mut()
                        .find(|(g, _)| *g == s.task_sentence)
                    {
                        Some((_, v)) => v.extend(refs),
                        None => groups.push((s.task_sentence.clone(), refs)),
                    }
                }
                for (ts, refs) in groups {
                    let ids: Vec<usize> = ts
                        .tokens
                        .iter()
                        .map(|t| self.vocab.global_index(t))
                        .collect::<Result<_>>()?;
                    // mean of the task-token embeddings
                    let repr = self.gate.task_embedding.lookup(&ids)?.mean_rows()?;
                    units.push(RoutingUnit {
                        id: format!("ts:{}", self.vocab.sentence_name(&ts)),
                        repr,
                        token_refs: refs,
                    });
                }
            }
        }
        Ok(units)
    }

    /// Select the k largest logits (ties toward the lower index) and
    /// return (ascending indices, weight tensor aligned with them).
    pub fn top_k_select(&self, logits: &Tensor) -> Result<(Vec<usize>, Tensor)> {
        top_k_select(logits, self.k, self.weighting)
    }

    /// Route the batch: unit representations, gate logits, top-k, and
    /// first-come capacity assignment in unit order.
    pub fn route(&self, batch: &MoeBatch) -> Result<(Vec<RoutingUnit>, Vec<Tensor>, RoutingDecision)> {
        let units = self.routing_units(batch)?;
        let mut weight_tensors = Vec::with_capacity(units.len());
        let mut decision = RoutingDecision::default();
        let mut load = vec![0usize; self.num_experts()];
        for unit in &units {
            let logits = self.gate_logits(&unit.repr)?;
            let (experts, weights) = self.top_k_select(&logits)?;
            let mut overflowed = Vec::new();
            for &e in &experts {
                match self.capacity {
                    Some(cap) if load[e] >= cap => overflowed.push(e),
                    _ => load[e] += 1,
                }
            }
            decision.units.push(UnitRouting {
                unit_id: unit.id.clone(),
                experts,
                weights: weights.value(),
                overflowed,
            });
            weight_tensors.push(weights);
        }
        Ok((units, weight_tensors, decision))
    }

    /// Full sparse forward: per sentence, per token outputs. Each token's
    /// output is the gate-weighted sum of its unit's surviving experts,
    /// with residual passthrough of the token for overflowed assignments.
    pub fn forward(&self, batch: &MoeBatch) -> Result<(Vec<Vec<Tensor>>, RoutingDecision)> {
        let (units, weight_tensors, decision) = self.route(batch)?;
        let mut outputs: Vec<Vec<Option<Tensor>>> = batch
            .sentences
            .iter()
            .map(|s| vec![None; s.tokens.len()])
            .collect();
        for ((unit, weights), routing) in
            units.iter().zip(weight_tensors.iter()).zip(decision.units.iter())
        {
            for &(si, ti) in &unit.token_refs {
                let token = &batch.sentences[si].tokens[ti];
                let mut acc: Option<Tensor> = None;
                for (pos, &e) in routing.experts.iter().enumerate() {
                    let w = weights.gather(&[pos])?;
                    let term = if routing.overflowed.contains(&e) {
                        token.scale_by(&w)?
                    } else {
                        self.experts[e].forward(token)?.scale_by(&w)?
                    };
                    acc = Some(match acc {
                        Some(a) => a.add(&term)?,
                        None => term,
                    });
                }
                outputs[si][ti] = acc;
            }
        }
        let outputs = outputs
            .into_iter()
            .enumerate()
            .map(|(si, sent)| {
                sent.into_iter()
                    .enumerate()
                    .map(|(ti, t)| {
                        t.ok_or_else(|| {
                            Error::Contract(format!(
                                "token s{}.t{} not covered by any routing unit",
                                si, ti
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((outputs, decision))
    }

    /// Optional importance-balancing regularizer over the full gate
    /// softmax (coefficient applied by the caller).
    pub fn importance_balance_loss(&self, units: &[RoutingUnit]) -> Result<Tensor> {
        let mut probs = Vec::with_capacity(units.len());
        for u in units {
            probs.push(self.gate_logits(&u.repr)?.softmax(1)?);
        }
        let mean = Tensor::concat_rows(&probs)?.mean_rows()?;
        let e = self.num_experts() as f64;
        Ok(mean.mul(&mean)?.sum_all().mul_scalar(e).add_scalar(-1.0))
    }
}

/// Standalone top-k selection; weights are a softmax over the selected
/// logits (or truncate-then-renormalize of the full softmax).
pub fn top_k_select(
    logits: &Tensor,
    k: usize,
    weighting: GateWeighting,
) -> Result<(Vec<usize>, Tensor)> {
    let e = logits.numel();
    if k < 1 || k > e {
        return Err(Error::Contract(format!(
            "top-k {} must lie in 1..={}",
            k, e
        )));
    }
    let values = logits.value();
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..k].to_vec();
    selected.sort_unstable();
    let weights = match weighting {
        GateWeighting::SoftmaxSelected => logits.gather(&selected)?.softmax(0)?,
        GateWeighting::TruncateRenormalize => {
            let flat = logits.reshape(vec![e])?;
            flat.softmax(0)?.gather(&selected)?.normalize_sum()?
        }
    };
    Ok((selected, weights))
}

/// Dense multi-gate mixture of experts: every expert runs on every input
/// and each task has its own softmax gate.
pub struct MmoeLayer {
    pub experts: Vec<MlpBlock>,
    pub gates: Vec<Linear>, // one [d x E] gate per task
}

impl MmoeLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        expert_hidden: usize,
        num_experts: usize,
        num_tasks: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MmoeLayer> {
        let mut experts = Vec::with_capacity(num_experts);
        for e in 0..num_experts {
            experts.push(MlpBlock::new(
                store,
                &format!("{}.expert{}", name, e),
                d,
                expert_hidden,
                rng,
            )?);
        }
        let mut gates = Vec::with_capacity(num_tasks);
        for t in 0..num_tasks {
            gates.push(Linear::new(
                store,
                &format!("{}.gate{}", name, t),
                d,
                num_experts,
                rng,
            )?);
        }
        Ok(MmoeLayer { experts, gates })
    }

    /// x: [n x d] -> one [n x d] output per task.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let expert_outs: Vec<Tensor> = self
            .experts
            .iter()
            .map(|e| e.forward(x))
            .collect::<Result<_>>()?;
        let mut per_task = Vec::with_capacity(self.gates.len());
        for gate in &self.gates {
            let w = gate.forward(x)?.softmax(1)?;
            let mut acc: Option<Tensor> = None;
            for (e, out) in expert_outs.iter().enumerate() {
                let col = w.slice_cols(e, 1)?;
                let term = out.mul_col(&col)?;
                acc = Some(match acc {
                    Some(a) => a.add(&term)?,
                    None => term,
                });
            }
            per_task.push(acc.unwrap());
        }
        Ok(per_task)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_token(r: &mut ChaCha8Rng, d: usize) -> Tensor {
        let data: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![1, d], data).unwrap()
    }

    fn layer(
        seed: u64,
        d: usize,
        e: usize,
        k: usize,
        capacity: Option<usize>,
        granularity: Granularity,
    ) -> (ParamStore, MoeLayer) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let l = MoeLayer::new(
            &mut store,
            "moe",
            d,
            2 * d,
            e,
            k,
            capacity,
            granularity,
            TaskVocab::standard(),
            &mut r,
        )
        .unwrap();
        (store, l)
    }

    fn random_batch(r: &mut ChaCha8Rng, d: usize, sentences: usize, max_tokens: usize) -> MoeBatch {
        let sents = (0..sentences)
            .map(|_| {
                let n = r.gen_range(1..=max_tokens);
                MoeSentence {
                    tokens: (0..n).map(|_| rand_token(r, d)).collect(),
                    task_sentence: TaskSentence::pair(r.gen_range(0..3), r.gen_range(0..4)),
                }
            })
            .collect();
        MoeBatch { sentences: sents }
    }

    #[test]
    fn gate_logits_cases() {
        let (store, l) = layer(0, 4, 3, 1, None, Granularity::Token);
        // zero input, zero bias -> zero logits
        let bias = store.get("moe.gate.proj.bias").unwrap();
        assert!(bias.value().iter().all(|v| *v == 0.0));
        let zero = Tensor::zeros(vec![1, 4]);
        assert!(l.gate_logits(&zero).unwrap().value().iter().all(|v| *v == 0.0));
        // unit vector -> matching projection row + bias
        let w = store.get("moe.gate.proj.weight").unwrap().value();
        let mut unit = vec![0.0; 4];
        unit[2] = 1.0;
        let got = l
            .gate_logits(&Tensor::from_vec(vec![1, 4], unit).unwrap())
            .unwrap()
            .value();
        assert_eq!(got, w[2 * 3..3 * 3].to_vec());
        // random vs naive dot-product oracle
        let mut r = rng(1);
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = l
            .gate_logits(&Tensor::from_vec(vec![1, 4], x.clone()).unwrap())
            .unwrap()
            .value();
        for j in 0..3 {
            let mut expect = 0.0;
            for i in 0..4 {
                expect += x[i] * w[i * 3 + j];
            }
            assert!((got[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_full_is_plain_softmax() {
        let logits = Tensor::from_vec(vec![1, 3], vec![1.0, -0.5, 0.25]).unwrap();
        let (idx, w) = top_k_select(&logits, 3, GateWeighting::SoftmaxSelected).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
        let full = logits.softmax(1).unwrap().value();
        for (a, b) in w.value().iter().zip(full.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_two_of_four_scalar_oracle() {
        let logits = Tensor::from_vec(vec![1, 4], vec![2.0, 1.0, 0.0, -1.0]).unwrap();
        let (idx, w) = top_k_select(&logits, 2, GateWeighting::SoftmaxSelected).unwrap();
        assert_eq!(idx, vec![0, 1]);
        let w = w.value();
        assert!((w[0] - 0.7311).abs() < 1e-4);
        assert!((w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn top_k_tie_breaks_toward_lower_index() {
        let logits = Tensor::from_vec(vec![1, 4], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let (idx, w) = top_k_select(&logits, 2, GateWeighting::SoftmaxSelected).unwrap();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(w.value(), vec![0.5, 0.5]);
    }

    #[test]
    fn top_k_out_of_range_is_error() {
        let logits = Tensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert!(top_k_select(&logits, 3, GateWeighting::SoftmaxSelected).is_err());
    }

    #[test]
    fn weighting_conventions_agree() {
        let mut r = rng(2);
        for _ in 0..50 {
            let logits = Tensor::from_vec(
                vec![1, 6],
                (0..6).map(|_| r.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap();
            let (ia, wa) = top_k_select(&logits, 3, GateWeighting::SoftmaxSelected).unwrap();
            let (ib, wb) = top_k_select(&logits, 3, GateWeighting::TruncateRenormalize).unwrap();
            assert_eq!(ia, ib);
            for (a, b) in wa.value().iter().zip(wb.value().iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_matches_full_sort_oracle() {
        let mut r = rng(3);
        for _ in 0..200 {
            let e = r.gen_range(2..9);
            let k = r.gen_range(1..=e);
            let vals: Vec<f64> = (0..e).map(|_| r.gen_range(-3.0..3.0)).collect();
            let logits = Tensor::from_vec(vec![1, e], vals.clone()).unwrap();
            let (idx, w) = top_k_select(&logits, k, GateWeighting::SoftmaxSelected).unwrap();
            // oracle: full sort by (value desc, index asc)
            let mut order: Vec<usize> = (0..e).collect();
            order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap().then(a.cmp(&b)));
            let mut expect = order[..k].to_vec();
            expect.sort_unstable();
            assert_eq!(idx, expect);
            let sum: f64 = w.value().iter().sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sentence_unit_of_single_token_is_that_token() {
        let (_s, l) = layer(4, 4, 3, 1, None, Granularity::Sentence);
        let mut r = rng(5);
        let tok = rand_token(&mut r, 4);
        let batch = MoeBatch {
            sentences: vec![MoeSentence {
                tokens: vec![tok.clone()],
                task_sentence: TaskSentence::pair(0, 0),
            }],
        };
        let units = l.routing_units(&batch).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].repr.value(), tok.value());
    }

    #[test]
    fn task_sentence_repr_is_mean_of_task_embeddings() {
        let (_s, l) = layer(6, 4, 3, 1, None, Granularity::TaskSentence);
        let mut r = rng(7);
        // sentence (AAL, CVR): flow id 1, use case id 3
        let batch = MoeBatch {
            sentences: vec![MoeSentence {
                tokens: vec![rand_token(&mut r, 4)],
                task_sentence: TaskSentence::pair(1, 3),
            }],
        };
        let units = l.routing_units(&batch).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].id, "ts:AAL+CVR");
        let table = l.gate.task_embedding.table.value();
        let aal = &table[1 * 4..2 * 4];
        let cvr = &table[(3 + 3) * 4..(3 + 4) * 4];
        let got = units[0].repr.value();
        for j in 0..4 {
            assert!((got[j] - (aal[j] + cvr[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn task_granularity_dedups_by_use_case() {
        let (_s, l) = layer(8, 4, 3, 1, None, Granularity::Task);
        let mut r = rng(9);
        let batch = MoeBatch {
            sentences: vec![
                MoeSentence {
                    tokens: vec![rand_token(&mut r, 4)],
                    task_sentence: TaskSentence::pair(0, 2),
                },
                MoeSentence {
                    tokens: vec![rand_token(&mut r, 4)],
                    task_sentence: TaskSentence::pair(1, 2),
                },
            ],
        };
        let units = l.routing_units(&batch).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].id, "task:ATC");
        assert_eq!(units[0].token_refs, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn empty_sentence_is_contract_error() {
        let (_s, l) = layer(10, 4, 3, 1, None, Granularity::Sentence);
        let batch = MoeBatch {
            sentences: vec![MoeSentence {
                tokens: vec![],
                task_sentence: TaskSentence::pair(0, 0),
            }],
        };
        assert!(l.routing_units(&batch).is_err());
    }

    #[test]
    fn k1_unlimited_capacity_uses_exactly_top_expert() {
        let (_s, l) = layer(11, 4, 4, 1, None, Granularity::Token);
        let mut r = rng(12);
        let batch = random_batch(&mut r, 4, 3, 2);
        let (outputs, decision) = l.forward(&batch).unwrap();
        for u in &decision.units {
            assert_eq!(u.experts.len(), 1);
            assert_eq!(u.weights, vec![1.0]);
            assert!(u.overflowed.is_empty());
        }
        // each token equals its top expert's output exactly
        for (si, s) in batch.sentences.iter().enumerate() {
            for (ti, tok) in s.tokens.iter().enumerate() {
                let unit = decision
                    .units
                    .iter()
                    .find(|u| u.unit_id == format!("s{}.t{}", si, ti))
                    .unwrap();
                let expect = l.experts[unit.experts[0]].forward(tok).unwrap().value();
                let got = outputs[si][ti].value();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn capacity_overflow_is_first_come_with_identity_passthrough() {
        // E=2, k=1, capacity=2, 5 units all preferring expert 0
        let (store, l) = layer(13, 4, 2, 1, Some(2), Granularity::Token);
        // force all gate logits toward expert 0
        let w = store.get("moe.gate.proj.weight").unwrap();
        w.set_data(vec![0.0; w.numel()]).unwrap();
        let b = store.get("moe.gate.proj.bias").unwrap();
        b.set_data(vec![1.0, 0.0]).unwrap();
        let mut r = rng(14);
        let tokens: Vec<Tensor> = (0..5).map(|_| rand_token(&mut r, 4)).collect();
        let batch = MoeBatch {
            sentences: vec![MoeSentence {
                tokens: tokens.clone(),
                task_sentence: TaskSentence::pair(0, 0),
            }],
        };
        let (outputs, decision) = l.forward(&batch).unwrap();
        for (i, u) in decision.units.iter().enumerate() {
            assert_eq!(u.experts, vec![0]);
            if i < 2 {
                assert!(u.overflowed.is_empty());
            } else {
                assert_eq!(u.overflowed, vec![0]);
            }
        }
        for (i, tok) in tokens.iter().enumerate() {
            let got = outputs[0][i].value();
            if i < 2 {
                let expect = l.experts[0].forward(tok).unwrap().value();
                for (a, b) in got.iter().zip(expect.iter()) {
                    assert!((a - b).abs() < 1e-15);
                }
            } else {
                // identity passthrough
                assert_eq!(got, tok.value());
            }
        }
    }

    #[test]
    fn sentence_granularity_routes_whole_sentence_together() {
        let mut r = rng(15);
        for trial in 0..20 {
            let (_s, l) = layer(100 + trial, 4, 4, 2, None, Granularity::Sentence);
            let batch = random_batch(&mut r, 4, 4, 3);
            let (_outputs, decision) = l.forward(&batch).unwrap();
            // one unit per sentence covering every token
            assert_eq!(decision.units.len(), batch.sentences.len());
        }
    }

    // Granularity invariants (a)-(d) over random batches.

    #[test]
    fn invariant_token_permutation_equivariance() {
        let mut r = rng(16);
        for trial in 0..30 {
            let (_s, l) = layer(200 + trial, 4, 4, 2, None, Granularity::Token);
            let tokens: Vec<Tensor> = (0..4).map(|_| rand_token(&mut r, 4)).collect();
            let ts = TaskSentence::pair(r.gen_range(0..3), r.gen_range(0..4));
            let batch = MoeBatch {
                sentences: vec![MoeSentence {
                    tokens: tokens.clone(),
                    task_sentence: ts.clone(),
                }],
            };
            let perm = [2usize, 0, 3, 1];
            let permuted = MoeBatch {
                sentences: vec![MoeSentence {
                    tokens: perm.iter().map(|&i| tokens[i].clone()).collect(),
                    task_sentence: ts,
                }],
            };
            let (_, d1) = l.forward(&batch).unwrap();
            let (_, d2) = l.forward(&permuted).unwrap();
            for (new_pos, &src) in perm.iter().enumerate() {
                assert_eq!(d2.units[new_pos].experts, d1.units[src].experts);
                assert_eq!(d2.units[new_pos].weights, d1.units[src].weights);
            }
        }
    }

    #[test]
    fn invariant_sentence_constant_expert_sets() {
        let mut r = rng(17);
        for trial in 0..30 {
            let (_s, l) = layer(300 + trial, 4, 4, 2, None, Granularity::Sentence);
            let batch = random_batch(&mut r, 4, 3, 4);
            let (_, decision) = l.forward(&batch).unwrap();
            // by construction there is exactly one unit per sentence, so
            // every token of a sentence shares that unit's expert set
            assert_eq!(decision.units.len(), 3);
        }
    }

    #[test]
    fn invariant_task_routing_depends_only_on_task_ids() {
        let mut r = rng(18);
        for trial in 0..30 {
            let (_s, l) = layer(400 + trial, 4, 4, 2, None, Granularity::Task);
            let sentences: Vec<TaskSentence> = (0..3)
                .map(|_| TaskSentence::pair(r.gen_range(0..3), r.gen_range(0..4)))
                .collect();
            let make = |r: &mut ChaCha8Rng| MoeBatch {
                sentences: sentences
                    .iter()
                    .map(|ts| MoeSentence {
                        tokens: (0..2).map(|_| rand_token(r, 4)).collect(),
                        task_sentence: ts.clone(),
                    })
                    .collect(),
            };
            let (_, d1) = l.forward(&make(&mut r)).unwrap();
            let (_, d2) = l.forward(&make(&mut r)).unwrap();
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn invariant_task_sentence_routing_depends_only_on_task_tokens() {
        let mut r = rng(19);
        for trial in 0..30 {
            let (_s, l) = layer(500 + trial, 4, 4, 2, None, Granularity::TaskSentence);
            let ts = TaskSentence::pair(r.gen_range(0..3), r.gen_range(0..4));
            let make = |r: &mut ChaCha8Rng| MoeBatch {
                sentences: vec![MoeSentence {
                    tokens: (0..3).map(|_| rand_token(r, 4)).collect(),
                    task_sentence: ts.clone(),
                }],
            };
            let (_, d1) = l.forward(&make(&mut r)).unwrap();
            let (_, d2) = l.forward(&make(&mut r)).unwrap();
            assert_eq!(d1, d2);
        }
    }

    #[test]
    fn capacity_never_exceeded() {
        let mut r = rng(20);
        for trial in 0..30 {
            let cap = r.gen_range(1..4);
            let (_s, l) = layer(600 + trial, 4, 3, 2, Some(cap), Granularity::Token);
            let batch = random_batch(&mut r, 4, 4, 3);
            let (_, decision) = l.forward(&batch).unwrap();
            let mut load = vec![0usize; 3];
            for u in &decision.units {
                for &e in &u.experts {
                    if !u.overflowed.contains(&e) {
                        load[e] += 1;
                    }
                }
            }
            assert!(load.iter().all(|&l| l <= cap));
        }
    }

    #[test]
    fn gate_weights_sum_to_one() {
        let mut r = rng(21);
        let (_s, l) = layer(22, 4, 6, 3, None, Granularity::Token);
        let batch = random_batch(&mut r, 4, 5, 2);
        let (_, decision) = l.forward(&batch).unwrap();
        for u in &decision.units {
            let s: f64 = u.weights.iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn sparse_k_equals_e_matches_dense_mixture_oracle() {
        let mut r = rng(23);
        for trial in 0..20 {
            let e = 3;
            let (_s, l) = layer(700 + trial, 4, e, e, None, Granularity::Token);
            let batch = random_batch(&mut r, 4, 2, 2);
            let (outputs, _) = l.forward(&batch).unwrap();
            for (si, s) in batch.sentences.iter().enumerate() {
                for (ti, tok) in s.tokens.iter().enumerate() {
                    // dense oracle: full softmax over all logits, weighted sum
                    let w = l.gate_logits(tok).unwrap().softmax(1).unwrap().value();
                    let mut expect = vec![0.0; 4];
                    for (ei, expert) in l.experts.iter().enumerate() {
                        let out = expert.forward(tok).unwrap().value();
                        for j in 0..4 {
                            expect[j] += w[ei] * out[j];
                        }
                    }
                    let got = outputs[si][ti].value();
                    for (a, b) in got.iter().zip(expect.iter()) {
                        assert!((a - b).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_flow_through_gate_and_experts() {
        // 2-expert, k=1 toy with deterministic routing; finite differences
        let eval = |perturb: Option<(&str, usize, f64)>| -> (f64, ParamStore) {
            let mut store = ParamStore::new();
            let mut r = rng(24);
            let l = MoeLayer::new(
                &mut store,
                "moe",
                3,
                4,
                2,
                1,
                None,
                Granularity::Token,
                TaskVocab::standard(),
                &mut r,
            )
            .unwrap();
            if let Some((name, i, delta)) = perturb {
                let t = store.get(name).unwrap();
                let mut d = t.value();
                d[i] += delta;
                t.set_data(d).unwrap();
            }
            let tok = Tensor::from_vec(vec![1, 3], vec![0.4, -0.9, 1.3]).unwrap();
            let batch = MoeBatch {
                sentences: vec![MoeSentence {
                    tokens: vec![tok],
                    task_sentence: TaskSentence::pair(0, 0),
                }],
            };
            let (outputs, _) = l.forward(&batch).unwrap();
            let out = &outputs[0][0];
            let loss = out.mul(out).unwrap().sum_all();
            loss.backward().unwrap();
            (loss.item(), store)
        };
        // finite-difference on the routed expert and the gate projection
        let (_, base_store) = eval(None);
        let routed = if base_store
            .get("moe.expert0.fc1.weight")
            .unwrap()
            .grad()
            .is_some()
        {
            "moe.expert0.fc1.weight"
        } else {
            "moe.expert1.fc1.weight"
        };
        let eps = 1e-5;
        for name in [routed, "moe.gate.proj.weight"] {
            let grad = base_store.get(name).unwrap().grad().unwrap_or_else(|| {
                vec![0.0; base_store.get(name).unwrap().numel()]
            });
            for i in 0..grad.len().min(6) {
                let (fp, _) = eval(Some((name, i, eps)));
                let (fm, _) = eval(Some((name, i, -eps)));
                let fd = (fp - fm) / (2.0 * eps);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(
                    (fd - grad[i]).abs() / denom < 1e-4,
                    "{}[{}]: fd {} vs {}",
                    name,
                    i,
                    fd,
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn mmoe_degenerate_cases() {
        let mut store = ParamStore::new();
        let mut r = rng(25);
        // one expert: output equals that expert's output
        let m = MmoeLayer::new(&mut store, "mmoe", 3, 4, 1, 2, &mut r).unwrap();
        let x = rand_token(&mut r, 3);
        let outs = m.forward(&x).unwrap();
        let expect = m.experts[0].forward(&x).unwrap().value();
        for o in &outs {
            for (a, b) in o.value().iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mmoe_identical_experts_convexity() {
        let mut store = ParamStore::new();
        let mut r = rng(26);
        let m = MmoeLayer::new(&mut store, "mmoe", 3, 4, 2, 1, &mut r).unwrap();
        // copy expert0 params into expert1
        for part in ["fc1", "fc2"] {
            for leaf in ["weight", "bias"] {
                let src = store.get(&format!("mmoe.expert0.{}.{}", part, leaf)).unwrap();
                let dst = store.get(&format!("mmoe.expert1.{}.{}", part, leaf)).unwrap();
                dst.set_data(src.value()).unwrap();
            }
        }
        let x = rand_token(&mut r, 3);
        let out = m.forward(&x).unwrap()[0].value();
        let expect = m.experts[0].forward(&x).unwrap().value();
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mmoe_matches_naive_weighted_sum_oracle() {
        let mut store = ParamStore::new();
        let mut r = rng(27);
        let m = MmoeLayer::new(&mut store, "mmoe", 3, 4, 4, 2, &mut r).unwrap();
        let x = Tensor::from_vec(
            vec![2, 3],
            (0..6).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let outs = m.forward(&x).unwrap();
        for (t, gate) in m.gates.iter().enumerate() {
            let w = gate.forward(&x).unwrap().softmax(1).unwrap().value();
            let mut expect = vec![0.0; 2 * 3];
            for (e, expert) in m.experts.iter().enumerate() {
                let eo = expert.forward(&x).unwrap().value();
                for row in 0..2 {
                    for j in 0..3 {
                        expect[row * 3 + j] += w[row * 4 + e] * eo[row * 3 + j];
                    }
                }
            }
            for (a, b) in outs[t].value().iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decision_dump_format() {
        let d = RoutingDecision {
            units: vec![UnitRouting {
                unit_id: "ts:AAL+CVR".into(),
                experts: vec![1, 3],
                weights: vec![0.25, 0.75],
                overflowed: vec![3],
            }],
        };
        assert_eq!(d.dump(), "ts:AAL+CVR\t1,3\t0.250000,0.750000\t3\n");
    }
}
