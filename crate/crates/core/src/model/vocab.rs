//! Token layout shared by pretraining and the synthetic tasks.
//!
//! Id 0 is the mask token, ids `1..=NUM_MARKERS` are marker tokens the tasks
//! use to carry labels, and the rest is "content" produced by a fixed sparse
//! bigram chain, so pretraining on the chain teaches structure that the
//! downstream noise shares. Content tokens fall into small clusters and the
//! chain mostly stays inside a cluster, so a sequence's tokens say something
//! about each other even without word order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

pub const MASK: usize = 0;
pub const NUM_MARKERS: usize = 4;
pub const FIRST_CONTENT: usize = 1 + NUM_MARKERS;

const LANGUAGE_SEED: u64 = 0x5eed_1a49;
const SUCCESSORS: usize = 3;
const CLUSTER: usize = 8;
const STAY_ON_CHAIN: f64 = 0.9;

pub fn marker(i: usize) -> usize {
    assert!(i < NUM_MARKERS, "marker index {i} out of range");
    1 + i
}

/// Sparse bigram chain over the content tokens.
#[derive(Clone, Debug)]
pub struct TokenChain {
    vocab: usize,
    successors: Vec<[usize; SUCCESSORS]>,
}

impl TokenChain {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < FIRST_CONTENT + SUCCESSORS {
            return Err(Error::Config(format!(
                "vocabulary of {vocab} leaves no room for content tokens (need at least {})",
                FIRST_CONTENT + SUCCESSORS
            )));
        }
        let mut rng = seed::rng(seed::derive(LANGUAGE_SEED, &["chain", &vocab.to_string()]));
        let mut content: Vec<usize> = (FIRST_CONTENT..vocab).collect();
        content.shuffle(&mut rng);
        let mut successors = vec![[FIRST_CONTENT; SUCCESSORS]; vocab];
        for group in content.chunks(CLUSTER) {
            for &t in group {
                successors[t] = std::array::from_fn(|_| group[rng.random_range(0..group.len())]);
            }
        }
        Ok(TokenChain { vocab, successors })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn random_content<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(FIRST_CONTENT..self.vocab)
    }

    pub fn next<R: Rng + ?Sized>(&self, prev: usize, rng: &mut R) -> usize {
        if rng.random_bool(STAY_ON_CHAIN) {
            self.successors[prev][rng.random_range(0..SUCCESSORS)]
        } else {
            self.random_content(rng)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut tok = self.random_content(rng);
        for _ in 0..len {
            out.push(tok);
            tok = self.next(tok, rng);
        }
        out
    }
}
