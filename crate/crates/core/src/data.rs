//! Labelled token sequences.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn train_labels(&self) -> Vec<usize> {
        self.train.iter().map(|e| e.label).collect()
    }

    pub fn validation_labels(&self) -> Vec<usize> {
        self.validation.iter().map(|e| e.label).collect()
    }

    /// Most frequent training label, lowest id on ties.
    pub fn majority_label(&self) -> usize {
        let mut counts = vec![0usize; self.num_classes];
        for e in &self.train {
            counts[e.label] += 1;
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best
    }
}
