//! Synthetic classification tasks.
//!
//! Every sequence is content noise from the shared bigram chain with the
//! label carried by marker tokens: either which marker is present, or (binary
//! tasks only) the order of two markers, A before B being class 1. Class counts are exact (rounded); label noise is applied by
//! drawing the marker pattern of a different class for an exact share of the
//! examples, so class proportions are unaffected.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::Metric;
use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::vocab::{self, TokenChain};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// The class is the marker present in the sequence.
    #[default]
    Presence,
    /// The class is the relative order of markers 0 and 1.
    Order,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub train_size: usize,
    pub validation_size: usize,
    #[serde(default = "two")]
    pub num_classes: usize,
    /// Share of examples in the majority class.
    pub imbalance: f64,
    #[serde(default = "one")]
    pub majority_class: usize,
    #[serde(default)]
    pub label_noise: f64,
    pub seq_len: usize,
    #[serde(default)]
    pub pattern: Pattern,
    /// Extra marker tokens outside the label's markers, scattered as
    /// distractors.
    #[serde(default)]
    pub distractors: usize,
    pub metric: Metric,
    #[serde(default)]
    pub seed: u64,
}

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task {}: {m}", self.name)));
        if self.train_size == 0 || self.validation_size == 0 {
            return bad("train and validation sizes must be at least 1".into());
        }
        if !(2..=vocab::NUM_MARKERS).contains(&self.num_classes) {
            return bad(format!("num_classes must lie in 2..={}", vocab::NUM_MARKERS));
        }
        if self.majority_class >= self.num_classes {
            return bad(format!("majority_class {} out of range", self.majority_class));
        }
        let floor = 1.0 / self.num_classes as f64;
        if !(self.imbalance > 0.0 && self.imbalance < 1.0) || self.imbalance < floor {
            return bad(format!(
                "imbalance must lie in [{floor}, 1), got {}",
                self.imbalance
            ));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 0.5), got {}", self.label_noise));
        }
        if self.seq_len < 2 + self.distractors {
            return bad("seq_len must leave room for the markers and distractors".into());
        }
        if self.pattern == Pattern::Order && self.num_classes != 2 {
            return bad("the order pattern needs a binary task".into());
        }
        if self.distractors > 0 && self.num_classes == vocab::NUM_MARKERS {
            return bad("distractors need a marker outside the label set".into());
        }
        if matches!(self.metric, Metric::F1 | Metric::Mcc) && self.num_classes != 2 {
            return bad(format!("{} needs a binary task", self.metric));
        }
        Ok(())
    }

    /// Exact per-class counts for a split of size `n`.
    pub fn class_counts(&self, n: usize) -> Vec<usize> {
        let major = ((self.imbalance * n as f64).round() as usize).min(n);
        let others = self.num_classes - 1;
        let rest = n - major;
        let mut counts = vec![0; self.num_classes];
        let mut slot = 0;
        for c in 0..self.num_classes {
            if c == self.majority_class {
                counts[c] = major;
            } else {
                counts[c] = rest / others + usize::from(slot < rest % others);
                slot += 1;
            }
        }
        counts
    }
}

fn pattern<R: Rng>(spec: &TaskSpec, chain: &TokenChain, class: usize, rng: &mut R) -> Vec<usize> {
    let len = spec.seq_len;
    let mut s = chain.sample(len, rng);
    let need = 1 + usize::from(spec.pattern == Pattern::Order) + spec.distractors;
    let slots = rand::seq::index::sample(rng, len, need).into_vec();
    let (label_slots, rest) = slots.split_at(need - spec.distractors);
    match spec.pattern {
        Pattern::Presence => s[label_slots[0]] = vocab::marker(class),
        Pattern::Order => {
            let first = label_slots[0].min(label_slots[1]);
            let second = label_slots[0].max(label_slots[1]);
            let (a, b) = (vocab::marker(0), vocab::marker(1));
            (s[first], s[second]) = if class == 1 { (a, b) } else { (b, a) };
        }
    }
    let spare = match spec.pattern {
        Pattern::Presence => spec.num_classes,
        Pattern::Order => 2,
    };
    for &i in rest {
        s[i] = vocab::marker(rng.random_range(spare..vocab::NUM_MARKERS));
    }
    s
}

fn split<R: Rng>(spec: &TaskSpec, chain: &TokenChain, n: usize, rng: &mut R) -> Vec<Example> {
    let mut labels: Vec<usize> = spec
        .class_counts(n)
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(rng);
    let n_noisy = (spec.label_noise * n as f64).round() as usize;
    let mut noisy = vec![false; n];
    for &i in rand::seq::index::sample(rng, n, n_noisy).iter().collect::<Vec<_>>().iter() {
        noisy[i] = true;
    }
    labels
        .into_iter()
        .zip(noisy)
        .map(|(label, flip)| {
            let class = if flip {
                let other = rng.random_range(0..spec.num_classes - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            };
            Example {
                tokens: pattern(spec, chain, class, rng),
                label,
            }
        })
        .collect()
}

/// Deterministic train/validation splits for `spec` over a vocabulary of
/// `vocab` tokens.
pub fn gen_dataset(spec: &TaskSpec, vocab: usize) -> Result<Dataset> {
    spec.validate()?;
    let chain = TokenChain::new(vocab)?;
    let mut rng = seed::rng(seed::derive(spec.seed, &["task", &spec.name]));
    let train = split(spec, &chain, spec.train_size, &mut rng);
    let validation = split(spec, &chain, spec.validation_size, &mut rng);
    Ok(Dataset {
        train,
        validation,
        num_classes: spec.num_classes,
    })
}

/// The three default tasks: balanced accuracy, imbalanced F1, and noisy
/// imbalanced MCC (the hardest and least stable).
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "order-acc".into(),
            train_size: 160,
            validation_size: 100,
            num_classes: 2,
            imbalance: 0.5,
            majority_class: 1,
            label_noise: 0.05,
            seq_len: 12,
            pattern: Pattern::Presence,
            distractors: 0,
            metric: Metric::Accuracy,
            seed: 11,
        },
        TaskSpec {
            name: "order-f1".into(),
            train_size: 160,
            validation_size: 100,
            num_classes: 2,
            imbalance: 0.68,
            majority_class: 1,
            label_noise: 0.05,
            seq_len: 12,
            pattern: Pattern::Presence,
            distractors: 0,
            metric: Metric::F1,
            seed: 12,
        },
        TaskSpec {
            name: "order-mcc".into(),
            train_size: 160,
            validation_size: 100,
            num_classes: 2,
            imbalance: 0.7,
            majority_class: 1,
            label_noise: 0.15,
            seq_len: 12,
            pattern: Pattern::Presence,
            distractors: 0,
            metric: Metric::Mcc,
            seed: 13,
        },
    ]
}
