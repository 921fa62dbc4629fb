//! Datasets: synthetic generation with controllable task structure, CSV
//! ingestion with hashed categoricals, time-based splits, and
//! task-balanced upsampling.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{CategoricalField, Example, FeatureSchema, SeqData, SequenceField};
use crate::error::{Error, Result};
use crate::moe::{TaskSentence, TaskVocab};

/// Fraction of examples (by time order) held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub vocab: TaskVocab,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Split on `time_index`: the most recent `test_fraction` of
    /// examples become the test set.
    pub fn split_by_time(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        order.sort_by_key(|&i| self.examples[i].time_index);
        let n_test = ((self.examples.len() as f64) * test_fraction).round() as usize;
        let n_train = self.examples.len().saturating_sub(n_test);
        let train = order[..n_train]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        let test = order[n_train..]
            .iter()
            .map(|&i| self.examples[i].clone())
            .collect();
        (
            Dataset {
                schema: self.schema.clone(),
                vocab: self.vocab.clone(),
                examples: train,
            },
            Dataset {
                schema: self.schema.clone(),
                vocab: self.vocab.clone(),
                examples: test,
            },
        )
    }
}

/// Balance task-sentence groups by upsampling each group (with
/// replacement) to the size of the largest, then reshuffling. A dataset
/// that is already balanced comes back as a permutation of itself.
pub fn upsample_by_task(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    if dataset.is_empty() {
        return Err(Error::Contract("upsample_by_task: empty dataset".into()));
    }
    // group indices by task sentence, first-appearance order
    let mut groups: Vec<(TaskSentence, Vec<usize>)> = Vec::new();
    for (i, ex) in dataset.examples.iter().enumerate() {
        match groups.iter_mut().find(|(ts, _)| *ts == ex.task_sentence) {
            Some((_, ids)) => ids.push(i),
            None => groups.push((ex.task_sentence.clone(), vec![i])),
        }
    }
    let target = groups.iter().map(|(_, ids)| ids.len()).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = Vec::new();
    for (_, ids) in &groups {
        picked.extend_from_slice(ids);
        for _ in ids.len()..target {
            picked.push(ids[rng.gen_range(0..ids.len())]);
        }
    }
    picked.shuffle(&mut rng);
    Ok(Dataset {
        schema: dataset.schema.clone(),
        vocab: dataset.vocab.clone(),
        examples: picked.iter().map(|&i| dataset.examples[i].clone()).collect(),
    })
}

// ---------------------------------------------------------------------------
// synthetic data

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub seed: u64,
    /// Label noise temperature; 0 gives deterministic threshold labels.
    pub noise: f64,
    /// Fraction of hidden-scorer variance shared across task sentences.
    pub shared_signal: f64,
    /// Target positive rate per use case.
    pub base_rates: Vec<f64>,
    /// Traffic mix over use cases.
    pub use_case_mix: Vec<f64>,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            n: 20_000,
            seed: 0,
            noise: 1.0,
            shared_signal: 0.8,
            base_rates: vec![0.30, 0.05, 0.30, 0.05],
            use_case_mix: vec![0.40, 0.20, 0.25, 0.15],
        }
    }
}

pub fn synthetic_schema() -> FeatureSchema {
    FeatureSchema {
        user_categorical: vec![CategoricalField {
            name: "user_segment".into(),
            vocab: 20,
            dim: 4,
        }],
        user_numerical_width: 4,
        user_pretrained_width: 0,
        item_vocab: 100,
        item_id_dim: 4,
        item_categorical: vec![CategoricalField {
            name: "item_category".into(),
            vocab: 10,
            dim: 4,
        }],
        item_numerical_width: 4,
        item_pretrained_width: 0,
        sequences: vec![
            SequenceField {
                name: "device_history".into(),
                vocab: 100,
                max_len: 3,
            },
            SequenceField {
                name: "page_history".into(),
                vocab: 30,
                max_len: 3,
            },
        ],
    }
}

impl SyntheticSpec {
    fn validate(&self, vocab: &TaskVocab) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Contract("synthetic dataset size must be positive".into()));
        }
        if self.base_rates.len() != vocab.use_cases.len()
            || self.use_case_mix.len() != vocab.use_cases.len()
        {
            return Err(Error::Config(format!(
                "base_rates and use_case_mix must have one entry per use case ({})",
                vocab.use_cases.len()
            )));
        }
        if self.base_rates.iter().any(|r| *r <= 0.0 || *r >= 1.0) {
            return Err(Error::Config("base rates must lie in (0, 1)".into()));
        }
        if self.use_case_mix.iter().any(|m| *m < 0.0)
            || self.use_case_mix.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("use_case_mix must be non-negative and non-empty".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_signal) {
            return Err(Error::Config("shared_signal must lie in [0, 1]".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Labels come from hidden linear scorers over the numerical features.
/// Each (flow, use case) pair's scorer blends a common direction with a
/// pair-specific one, weighted by `shared_signal`, so tasks share
/// structure without being identical. Per-use-case biases are fitted so
/// realized positive rates match `base_rates`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let vocab = TaskVocab::standard();
    spec.validate(&vocab)?;
    let schema = synthetic_schema();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let f = schema.user_numerical_width + schema.item_numerical_width;
    let n_flows = vocab.flows.len();
    let n_ucs = vocab.use_cases.len();

    let gauss = |r: &mut ChaCha8Rng| {
        // Box-Muller
        let u1: f64 = r.gen_range(f64::EPSILON..1.0);
        let u2: f64 = r.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let w_common: Vec<f64> = (0..f).map(|_| gauss(&mut rng)).collect();
    let mut scorers: Vec<Vec<f64>> = Vec::new(); // indexed flow * n_ucs + uc
    let a = spec.shared_signal.sqrt();
    let b = (1.0 - spec.shared_signal).sqrt();
    for _ in 0..n_flows * n_ucs {
        let w: Vec<f64> = (0..f)
            .map(|j| a * w_common[j] + b * gauss(&mut rng))
            .collect();
        scorers.push(w);
    }

    let mix_total: f64 = spec.use_case_mix.iter().sum();
    let mut examples = Vec::with_capacity(spec.n);
    let mut scores = Vec::with_capacity(spec.n);
    let mut ucs = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let flow = rng.gen_range(0..n_flows);
        let mut pick = rng.gen_range(0.0..mix_total);
        let mut uc = n_ucs - 1;
        for (j, m) in spec.use_case_mix.iter().enumerate() {
            if pick < *m {
                uc = j;
                break;
            }
            pick -= *m;
        }
        let user_numerical: Vec<f64> = (0..schema.user_numerical_width)
            .map(|_| gauss(&mut rng))
            .collect();
        let item_numerical: Vec<f64> = (0..schema.item_numerical_width)
            .map(|_| gauss(&mut rng))
            .collect();
        let x: Vec<f64> = user_numerical
            .iter()
            .chain(item_numerical.iter())
            .copied()
            .collect();
        let w = &scorers[flow * n_ucs + uc];
        let score: f64 = w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
            / (f as f64).sqrt();
        let seq = |r: &mut ChaCha8Rng, vocab: usize, max_len: usize| {
            let len = r.gen_range(0..=max_len);
            SeqData::from_ids((0..len).map(|_| r.gen_range(0..vocab)).collect())
        };
        let sequences = schema
            .sequences
            .iter()
            .map(|sf| seq(&mut rng, sf.vocab, sf.max_len))
            .collect();
        examples.push(Example {
            user_categorical: vec![rng.gen_range(0..schema.user_categorical[0].vocab)],
            user_numerical,
            user_pretrained: vec![],
            item_id: rng.gen_range(0..schema.item_vocab),
            item_categorical: vec![rng.gen_range(0..schema.item_categorical[0].vocab)],
            item_numerical,
            item_pretrained: vec![],
            sequences,
            task_sentence: TaskSentence::pair(flow, uc),
            labels: vec![None; n_ucs],
            time_index: i,
        });
        scores.push(score);
        ucs.push(uc);
    }

    // fit a per-use-case bias so the positive rate matches the target
    for uc in 0..n_ucs {
        let idx: Vec<usize> = (0..spec.n).filter(|&i| ucs[i] == uc).collect();
        if idx.is_empty() {
            continue;
        }
        let rate = spec.base_rates[uc];
        if spec.noise == 0.0 {
            // threshold at the (1 - rate) quantile of scores
            let mut s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cut = ((s.len() as f64) * (1.0 - rate)).floor() as usize;
            let threshold = s[cut.min(s.len() - 1)];
            for &i in &idx {
                examples[i].labels[uc] = Some(scores[i] > threshold);
            }
        } else {
            let mean_prob = |bias: f64| -> f64 {
                idx.iter()
                    .map(|&i| 1.0 / (1.0 + (-(scores[i] + bias) / spec.noise).exp()))
                    .sum::<f64>()
                    / idx.len() as f64
            };
            let (mut lo, mut hi) = (-60.0, 60.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mean_prob(mid) < rate {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let bias = 0.5 * (lo + hi);
            for &i in &idx {
                let p = 1.0 / (1.0 + (-(scores[i] + bias) / spec.noise).exp());
                examples[i].labels[uc] = Some(rng.gen_bool(p.clamp(0.0, 1.0)));
            }
        }
    }

    Ok(Dataset {
        schema,
        vocab,
        examples,
    })
}

// ---------------------------------------------------------------------------
// CSV ingestion

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSpec {
    pub path: PathBuf,
    pub delimiter: String,
    /// Categorical columns hashed into `categorical_vocab` buckets.
    pub categorical_columns: Vec<String>,
    pub categorical_vocab: usize,
    pub embedding_dim: usize,
    pub numerical_columns: Vec<String>,
    /// Binary 0/1 columns, one per use case. The first names the
    /// primary use case attached to each row's task sentence.
    pub label_columns: Vec<String>,
    /// Optional column (e.g. country) hashed into the flow vocabulary.
    pub flow_column: Option<String>,
    pub flow_vocab: usize,
}

impl Default for CsvSpec {
    fn default() -> CsvSpec {
        CsvSpec {
            path: PathBuf::new(),
            delimiter: ",".into(),
            categorical_columns: vec![],
            categorical_vocab: 1000,
            embedding_dim: 8,
            numerical_columns: vec![],
            label_columns: vec![],
            flow_column: None,
            flow_vocab: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvReport {
    pub rows_read: usize,
    pub rows_skipped: usize,
}

/// Load a labeled interaction table. Categorical values are hashed
/// (FNV-1a, 64-bit) into fixed vocabularies; numericals are
/// standardized using statistics from the training portion of the time
/// split; malformed rows are skipped and counted.
pub fn load_csv(spec: &CsvSpec) -> Result<(Dataset, CsvReport)> {
    if spec.label_columns.is_empty() {
        return Err(Error::Config("csv: at least one label column is required".into()));
    }
    if spec.delimiter.as_bytes().len() != 1 {
        return Err(Error::Config("csv: delimiter must be a single byte".into()));
    }
    if spec.categorical_vocab == 0 || spec.embedding_dim == 0 || spec.flow_vocab == 0 {
        return Err(Error::Config("csv: vocab and embedding sizes must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter.as_bytes()[0])
        .from_path(&spec.path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("csv: column '{}' not found in header", name)))
    };
    let cat_idx: Vec<usize> = spec
        .categorical_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let num_idx: Vec<usize> = spec
        .numerical_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let label_idx: Vec<usize> = spec
        .label_columns
        .iter()
        .map(|c| col(c))
        .collect::<Result<_>>()?;
    let flow_idx = match &spec.flow_column {
        Some(c) => Some(col(c)?),
        None => None,
    };

    let vocab = TaskVocab {
        flows: match flow_idx {
            Some(_) => (0..spec.flow_vocab).map(|i| format!("flow{}", i)).collect(),
            None => vec!["default".into()],
        },
        use_cases: spec.label_columns.clone(),
    };
    let schema = FeatureSchema {
        user_categorical: spec
            .categorical_columns
            .iter()
            .map(|c| CategoricalField {
                name: c.clone(),
                vocab: spec.categorical_vocab,
                dim: spec.embedding_dim,
            })
            .collect(),
        user_numerical_width: spec.numerical_columns.len(),
        user_pretrained_width: 0,
        item_vocab: 1,
        item_id_dim: spec.embedding_dim,
        item_categorical: vec![],
        item_numerical_width: 0,
        item_pretrained_width: 0,
        sequences: vec![],
    };

    let mut report = CsvReport::default();
    let mut examples: Vec<Example> = Vec::new();
    for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        let parse_row = || -> Option<Example> {
            let mut user_categorical = Vec::with_capacity(cat_idx.len());
            for &i in &cat_idx {
                user_categorical
                    .push((fnv1a64(record.get(i)?) % spec.categorical_vocab as u64) as usize);
            }
            let mut user_numerical = Vec::with_capacity(num_idx.len());
            for &i in &num_idx {
                user_numerical.push(record.get(i)?.trim().parse::<f64>().ok()?);
            }
            let mut labels = Vec::with_capacity(label_idx.len());
            for &i in &label_idx {
                let v = record.get(i)?.trim();
                labels.push(match v {
                    "" => None,
                    "0" => Some(false),
                    "1" => Some(true),
                    _ => return None,
                });
            }
            if labels.iter().all(|l| l.is_none()) {
                return None;
            }
            let flow = match flow_idx {
                Some(i) => (fnv1a64(record.get(i)?) % spec.flow_vocab as u64) as usize,
                None => 0,
            };
            Some(Example {
                user_categorical,
                user_numerical,
                user_pretrained: vec![],
                item_id: 0,
                item_categorical: vec![],
                item_numerical: vec![],
                item_pretrained: vec![],
                sequences: vec![],
                task_sentence: TaskSentence::pair(flow, 0),
                labels,
                time_index: 0,
            })
        };
        match parse_row() {
            Some(mut ex) => {
                ex.time_index = examples.len();
                examples.push(ex);
            }
            None => report.rows_skipped += 1,
        }
    }
    if examples.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }

    // standardize numericals with training-split statistics
    let n_test = ((examples.len() as f64) * TEST_FRACTION).round() as usize;
    let n_train = examples.len() - n_test.min(examples.len());
    let width = num_idx.len();
    if width > 0 && n_train > 0 {
        let mut mean = vec![0.0f64; width];
        for ex in &examples[..n_train] {
            for j in 0..width {
                mean[j] += ex.user_numerical[j];
            }
        }
        for m in &mut mean {
            *m /= n_train as f64;
        }
        let mut var = vec![0.0f64; width];
        for ex in &examples[..n_train] {
            for j in 0..width {
                let d = ex.user_numerical[j] - mean[j];
                var[j] += d * d;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|v| (v / n_train as f64).sqrt())
            .collect();
        for ex in &mut examples {
            for j in 0..width {
                ex.user_numerical[j] = if std[j] > 0.0 {
                    (ex.user_numerical[j] - mean[j]) / std[j]
                } else {
                    0.0
                };
            }
        }
    }

    Ok((
        Dataset {
            schema,
            vocab,
            examples,
        },
        report,
    ))
}
