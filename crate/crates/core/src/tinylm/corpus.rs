//! Synthetic dialogue corpus.
//!
//! Every pair is `(input, output)` with fixed lengths. Input tokens are drawn
//! from a skewed distribution over the lower three quarters of the
//! vocabulary; each output token is a fixed permutation of the input token at
//! the same position, replaced by a uniformly random content token with a
//! small probability. The top quarter of the vocabulary never occurs in the
//! corpus.

use serde::{Deserialize, Serialize};

use super::config::LmConfig;
use crate::error::{Error, Result};
use crate::numkit::Rng;

/// Upper bound on the number of pairs `generate_corpus` will produce.
pub const MAX_CORPUS_PAIRS: usize = 100_000;

const NOISE: f64 = 0.02;
const ZIPF_EXPONENT: f64 = 0.6;
const MAX_SIDE_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Base,
    Mismatched,
    Clean,
    Backdoor,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub input: Vec<u32>,
    pub output: Vec<u32>,
}

impl Pair {
    pub fn new(input: Vec<u32>, output: Vec<u32>) -> Self {
        Pair { input, output }
    }

    pub fn len(&self) -> usize {
        self.input.len() + self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty() && self.output.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueDataset {
    pub provenance: Provenance,
    pub pairs: Vec<Pair>,
    /// For derived datasets: `(input source index, output source index)`
    /// into the dataset the pairs were taken from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub origin: Vec<(usize, usize)>,
}

impl DialogueDataset {
    pub fn new(provenance: Provenance, pairs: Vec<Pair>) -> Self {
        DialogueDataset {
            provenance,
            pairs,
            origin: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Errors on empty sequences or pairs longer than the context window.
    pub fn validate(&self, context_len: usize) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.input.is_empty() || p.output.is_empty() {
                return Err(Error::input(format!("pair {i} has an empty sequence")));
            }
            if p.len() > context_len {
                return Err(Error::Capacity(format!(
                    "pair {i} length {} exceeds context {context_len}",
                    p.len()
                )));
            }
        }
        Ok(())
    }

    /// First `n` pairs and the remainder.
    pub fn split_at(&self, n: usize) -> (DialogueDataset, DialogueDataset) {
        let n = n.min(self.pairs.len());
        (
            DialogueDataset::new(self.provenance, self.pairs[..n].to_vec()),
            DialogueDataset::new(self.provenance, self.pairs[n..].to_vec()),
        )
    }

    /// Per-token occurrence counts over inputs and outputs.
    pub fn token_counts(&self, vocab_size: usize) -> Vec<usize> {
        let mut counts = vec![0usize; vocab_size];
        for p in &self.pairs {
            for &t in p.input.iter().chain(&p.output) {
                if let Some(c) = counts.get_mut(t as usize) {
                    *c += 1;
                }
            }
        }
        counts
    }
}

/// The fixed generative rule behind the synthetic corpus for one vocabulary
/// size. Independent of any run seed so that corpora drawn with different
/// seeds share one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Grammar {
    pub vocab_size: usize,
    pub content: usize,
    pub input_len: usize,
    pub output_len: usize,
    weights: Vec<f64>,
    mapping: Vec<u32>,
}

impl Grammar {
    pub fn new(cfg: &LmConfig) -> Self {
        Grammar::with_tag(cfg, "grammar")
    }

    /// A second task over the same alphabet (different token mapping), used
    /// to train expert models for merging.
    pub fn expert(cfg: &LmConfig) -> Self {
        Grammar::with_tag(cfg, "expert-grammar")
    }

    fn with_tag(cfg: &LmConfig, tag: &str) -> Self {
        let vocab = cfg.vocab_size;
        let content = vocab - vocab / 4;
        let side = MAX_SIDE_LEN.min(cfg.context_len / 2);
        let weights = (0..content)
            .map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT))
            .collect();
        let mut rng = Rng::derive(vocab as u64, tag);
        let mapping = rng.permutation(content).into_iter().map(|t| t as u32).collect();
        Grammar {
            vocab_size: vocab,
            content,
            input_len: side,
            output_len: side,
            weights,
            mapping,
        }
    }

    pub fn map_token(&self, t: u32) -> u32 {
        self.mapping.get(t as usize).copied().unwrap_or(t)
    }

    /// The noise-free output for `input`.
    pub fn canonical_output(&self, input: &[u32]) -> Vec<u32> {
        input
            .iter()
            .take(self.output_len)
            .map(|&t| self.map_token(t))
            .collect()
    }

    pub fn sample_input(&self, rng: &mut Rng) -> Vec<u32> {
        (0..self.input_len).map(|_| rng.weighted(&self.weights) as u32).collect()
    }

    pub fn sample_pair(&self, rng: &mut Rng) -> Pair {
        let input = self.sample_input(rng);
        let output = self
            .canonical_output(&input)
            .into_iter()
            .map(|t| {
                if rng.bernoulli(NOISE) {
                    rng.below(self.content) as u32
                } else {
                    t
                }
            })
            .collect();
        Pair { input, output }
    }

    pub fn generate(&self, n_pairs: usize, seed: u64, provenance: Provenance) -> Result<DialogueDataset> {
        if n_pairs == 0 {
            return Err(Error::input("n_pairs must be at least 1"));
        }
        if n_pairs > MAX_CORPUS_PAIRS {
            return Err(Error::Capacity(format!(
                "{n_pairs} pairs requested, cap is {MAX_CORPUS_PAIRS}"
            )));
        }
        let mut rng = Rng::derive(seed, "corpus");
        let pairs = (0..n_pairs).map(|_| self.sample_pair(&mut rng)).collect();
        Ok(DialogueDataset::new(provenance, pairs))
    }
}

/// Draws `n_pairs` pairs of the synthetic task. Deterministic in `seed`.
pub fn generate_corpus(cfg: &LmConfig, n_pairs: usize, seed: u64) -> Result<DialogueDataset> {
    cfg.validate()?;
    Grammar::new(cfg).generate(n_pairs, seed, Provenance::Base)
}

/// Like [`generate_corpus`] but for the expert task.
pub fn generate_expert_corpus(cfg: &LmConfig, n_pairs: usize, seed: u64) -> Result<DialogueDataset> {
    cfg.validate()?;
    Grammar::expert(cfg).generate(n_pairs, seed, Provenance::Expert)
}

/// Single-token classification probes: the prompt is a corpus input and the
/// label is the noise-free first output token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationProbes {
    pub items: Vec<(Vec<u32>, u32)>,
}

impl ClassificationProbes {
    pub fn generate(cfg: &LmConfig, n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("need at least one probe"));
        }
        let g = Grammar::new(cfg);
        let mut rng = Rng::derive(seed, "probes");
        let items = (0..n)
            .map(|_| {
                let x = g.sample_input(&mut rng);
                let y = g.canonical_output(&x)[0];
                (x, y)
            })
            .collect();
        Ok(ClassificationProbes { items })
    }
}
