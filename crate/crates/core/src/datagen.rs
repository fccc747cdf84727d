//! Synthetic corpora with a known noise process, and the line-delimited
//! dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{LabeledInstance, RESERVED_TOKENS};
use crate::error::{Error, Result};
use crate::noise::TransitionMatrix;
use crate::tensor::Span;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub instances: usize,
    /// Probability that an entity-span token is drawn from the class's
    /// signal set rather than the noise vocabulary.
    pub signal_strength: f64,
    pub signal_tokens_per_class: usize,
    pub span_len: usize,
    /// Bag sizes are uniform on `1..=max_bag_size`.
    pub max_bag_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            vocab: 400,
            seq_len: 10,
            instances: 1000,
            signal_strength: 0.5,
            signal_tokens_per_class: 8,
            span_len: 2,
            max_bag_size: 4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.instances < 1 {
            return fail("instances must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail(format!("signal_strength must lie in [0, 1], got {}", self.signal_strength));
        }
        if self.signal_tokens_per_class < 1 || self.span_len < 1 || self.max_bag_size < 1 {
            return fail("signal_tokens_per_class, span_len and max_bag_size must be at least 1".into());
        }
        if self.seq_len < 2 * self.span_len {
            return fail(format!(
                "seq_len {} cannot hold two spans of length {}",
                self.seq_len, self.span_len
            ));
        }
        let needed = self.noise_start() + 1;
        if self.vocab < needed {
            return fail(format!(
                "vocab {} too small for {} disjoint signal sets of {} tokens plus noise (need {needed})",
                self.vocab, self.classes, self.signal_tokens_per_class
            ));
        }
        Ok(())
    }

    /// Token ids owned by `class`.
    pub fn signal_range(&self, class: usize) -> std::ops::Range<usize> {
        let start = RESERVED_TOKENS + class * self.signal_tokens_per_class;
        start..start + self.signal_tokens_per_class
    }

    /// First id of the shared noise vocabulary.
    pub fn noise_start(&self) -> usize {
        RESERVED_TOKENS + self.classes * self.signal_tokens_per_class
    }
}

/// Probability that an instance keeps its true label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KeepRate {
    Constant { rate: f64 },
    /// Interpolates from `low` to `high` with the fraction of entity-span
    /// tokens whose id lies in `signal_start..signal_end`.
    SignalDependent {
        low: f64,
        high: f64,
        signal_start: usize,
        signal_end: usize,
    },
}

impl KeepRate {
    fn for_instance(&self, inst: &LabeledInstance) -> f64 {
        match *self {
            KeepRate::Constant { rate } => rate,
            KeepRate::SignalDependent {
                low,
                high,
                signal_start,
                signal_end,
            } => {
                let span_tokens = [inst.e1, inst.e2]
                    .iter()
                    .flat_map(|s| inst.tokens[s.start..=s.end].iter().copied())
                    .collect::<Vec<_>>();
                let hits = span_tokens
                    .iter()
                    .filter(|&&t| (signal_start..signal_end).contains(&t))
                    .count();
                low + (high - low) * hits as f64 / span_tokens.len() as f64
            }
        }
    }

    /// Mean keep rate for constant specs, `None` otherwise.
    pub fn constant(&self) -> Option<f64> {
        match self {
            KeepRate::Constant { rate } => Some(*rate),
            KeepRate::SignalDependent { .. } => None,
        }
    }
}

/// Ground-truth noise process: keep the true label with probability `ρ`,
/// otherwise draw the annotation from column `y` of `T*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub transition: TransitionMatrix,
    pub keep: KeepRate,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        self.transition.validate()?;
        let rates: Vec<f64> = match self.keep {
            KeepRate::Constant { rate } => vec![rate],
            KeepRate::SignalDependent { low, high, .. } => vec![low, high],
        };
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("keep rate outside [0, 1]: {rates:?}")));
        }
        Ok(())
    }
}

fn counter_rng(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(counter) << 16);
    rng
}

const BAG_STREAM: u64 = 11;
const CORRUPT_STREAM: u64 = 12;
const TRANSITION_STREAM: u64 = 13;

/// Generates bags of clean instances. Each bag has one class and one
/// synthetic entity pair; `noisy_label` equals `true_label`.
pub fn generate_clean(config: &SyntheticConfig) -> Result<Vec<LabeledInstance>> {
    config.validate()?;
    let noise = config.noise_start()..config.vocab;
    let mut out = Vec::with_capacity(config.instances);
    let mut bag = 0u64;
    while out.len() < config.instances {
        let mut rng = counter_rng(config.seed, BAG_STREAM, bag);
        let class = rng.random_range(0..config.classes);
        let size = rng.random_range(1..=config.max_bag_size).min(config.instances - out.len());
        let bag_id = format!("bag-{bag:07}");
        for _ in 0..size {
            let mut tokens: Vec<usize> = (0..config.seq_len).map(|_| rng.random_range(noise.clone())).collect();
            let (e1, e2) = place_spans(config.seq_len, config.span_len, &mut rng);
            for span in [e1, e2] {
                for tok in &mut tokens[span.start..=span.end] {
                    if rng.random_bool(config.signal_strength) {
                        *tok = rng.random_range(config.signal_range(class));
                    }
                }
            }
            out.push(LabeledInstance {
                tokens,
                e1,
                e2,
                noisy_label: class,
                true_label: Some(class),
                bag_id: bag_id.clone(),
            });
        }
        bag += 1;
    }
    Ok(out)
}

/// Two non-overlapping spans of `span_len` tokens in random order.
fn place_spans<R: Rng>(seq_len: usize, span_len: usize, rng: &mut R) -> (Span, Span) {
    let a = rng.random_range(0..=seq_len - 2 * span_len);
    let b = rng.random_range(a + span_len..=seq_len - span_len);
    let first = Span::new(a, a + span_len - 1);
    let second = Span::new(b, b + span_len - 1);
    if rng.random_bool(0.5) {
        (first, second)
    } else {
        (second, first)
    }
}

/// A random valid transition matrix with each column's off-diagonal part
/// drawn from a flat Dirichlet.
pub fn random_transition<R: Rng>(classes: usize, rng: &mut R) -> Result<TransitionMatrix> {
    if classes < 2 {
        return Err(Error::Argument(format!("transition matrix needs at least 2 classes, got {classes}")));
    }
    let mut rows = vec![vec![0.0; classes]; classes];
    for k in 0..classes {
        let draws: Vec<f64> = (0..classes)
            .map(|i| if i == k { 0.0 } else { Exp1.sample(rng) })
            .collect();
        let total: f64 = draws.iter().sum();
        for i in 0..classes {
            rows[i][k] = draws[i] / total;
        }
    }
    TransitionMatrix::from_rows(rows)
}

/// Overwrites `noisy_label` by sampling the noise process. `true_label` is
/// kept. Instance `i` uses its own random stream, so results do not depend
/// on processing order.
pub fn corrupt_labels(instances: &[LabeledInstance], spec: &NoiseSpec, seed: u64) -> Result<Vec<LabeledInstance>> {
    spec.validate()?;
    let k = spec.transition.classes();
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let y = inst
                .true_label
                .ok_or_else(|| Error::Argument(format!("instance {i} has no true label")))?;
            if y >= k {
                return Err(Error::Index { index: y, len: k });
            }
            let mut rng = counter_rng(seed, CORRUPT_STREAM, i as u64);
            let keep = spec.keep.for_instance(inst).clamp(0.0, 1.0);
            let noisy = if rng.random_bool(keep) {
                y
            } else {
                sample_off_diagonal(&spec.transition, y, rng.random::<f64>())
            };
            Ok(LabeledInstance {
                noisy_label: noisy,
                ..inst.clone()
            })
        })
        .collect()
}

/// Inverse-CDF draw from column `y` over rows other than `y`.
fn sample_off_diagonal(t: &TransitionMatrix, y: usize, u: f64) -> usize {
    let candidates: Vec<usize> = (0..t.classes()).filter(|&i| i != y && t.get(i, y) > 0.0).collect();
    let total: f64 = candidates.iter().map(|&i| t.get(i, y)).sum();
    let mut acc = 0.0;
    for &i in &candidates {
        acc += t.get(i, y) / total;
        if u < acc {
            return i;
        }
    }
    *candidates.last().expect("column has positive off-diagonal mass")
}

/// A train/test split under one noise process.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<LabeledInstance>,
    pub test: Vec<LabeledInstance>,
    pub noise: NoiseSpec,
}

/// Generates `config.instances` training and `test` held-out instances with
/// a random `T*` and constant keep rate, all from `config.seed`. Held-out
/// labels are corrupted too; `true_label` keeps the clean class.
pub fn synthetic_corpus(config: &SyntheticConfig, test: usize, keep: f64) -> Result<Corpus> {
    let total = SyntheticConfig {
        instances: config.instances + test,
        ..config.clone()
    };
    let clean = generate_clean(&total)?;
    let mut rng = counter_rng(config.seed, TRANSITION_STREAM, 0);
    let noise = NoiseSpec {
        transition: random_transition(config.classes, &mut rng)?,
        keep: KeepRate::Constant { rate: keep },
    };
    let mut all = corrupt_labels(&clean, &noise, config.seed)?;
    // Keep whole bags on one side of the split.
    let mut cut = config.instances;
    while cut > 0 && cut < all.len() && all[cut].bag_id == all[cut - 1].bag_id {
        cut += 1;
    }
    let test = all.split_off(cut);
    Ok(Corpus { train: all, test, noise })
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

pub fn write_dataset(instances: &[LabeledInstance], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).expect("instance serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset. With `classes` set, labels are checked against it.
pub fn read_dataset(path: &Path, classes: Option<usize>) -> Result<Vec<LabeledInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push(parse_instance(&line, i + 1, classes)?);
    }
    Ok(out)
}

pub fn parse_instance(text: &str, line: usize, classes: Option<usize>) -> Result<LabeledInstance> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    fn field<T: serde::de::DeserializeOwned>(
        map: &serde_json::Map<String, Value>,
        name: &str,
        line: usize,
    ) -> Result<T> {
        let raw = map.get(name).ok_or_else(|| Error::Schema {
            line,
            field: name.into(),
            message: "missing".into(),
        })?;
        serde_json::from_value(raw.clone()).map_err(|e| Error::Schema {
            line,
            field: name.into(),
            message: e.to_string(),
        })
    }
    let inst = LabeledInstance {
        tokens: field(&map, "tokens", line)?,
        e1: field::<(usize, usize)>(&map, "e1", line)?.into(),
        e2: field::<(usize, usize)>(&map, "e2", line)?.into(),
        noisy_label: field(&map, "noisy_label", line)?,
        true_label: field(&map, "true_label", line)?,
        bag_id: field(&map, "bag_id", line)?,
    };
    inst.validate(classes.unwrap_or(usize::MAX))
        .map_err(|(field, message)| Error::Schema {
            line,
            field: field.into(),
            message,
        })?;
    Ok(inst)
}

/// Largest label mentioned plus one.
pub fn infer_classes(instances: &[LabeledInstance]) -> usize {
    instances
        .iter()
        .flat_map(|i| std::iter::once(i.noisy_label).chain(i.true_label))
        .max()
        .map_or(0, |m| m + 1)
}
