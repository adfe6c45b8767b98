//! Synthetic multi-modal reward: a fixed value at each listed mode response,
//! zero elsewhere. Keeps the tilted target exactly enumerable, which is what
//! the distribution-matching oracle experiments run against.

use crate::error::{Error, Result};
use crate::mdm::{Prompt, Sequence, Vocabulary};

#[derive(Debug, Clone)]
pub struct SynthEnv {
    vocab: Vocabulary,
    response_len: usize,
    modes: Vec<(Vec<u16>, f64)>,
}

impl SynthEnv {
    /// `modes` lists `(response tokens, reward value)` pairs; duplicates are
    /// rejected. An empty list makes the reward identically zero (so the
    /// tilted target is the reference distribution itself).
    pub fn new(vocab_size: u16, response_len: usize, modes: Vec<(Vec<u16>, f64)>) -> Result<Self> {
        let vocab = Vocabulary::new(vocab_size)?;
        for (tokens, _) in &modes {
            if tokens.len() != response_len {
                return Err(Error::InvalidInput(format!(
                    "mode {tokens:?} has length {}, expected {response_len}",
                    tokens.len()
                )));
            }
            if tokens.iter().any(|&t| t >= vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "mode {tokens:?} has tokens outside the vocabulary"
                )));
            }
        }
        for i in 0..modes.len() {
            for j in i + 1..modes.len() {
                if modes[i].0 == modes[j].0 {
                    return Err(Error::InvalidInput(format!(
                        "duplicate mode {:?}",
                        modes[i].0
                    )));
                }
            }
        }
        Ok(Self {
            vocab,
            response_len,
            modes,
        })
    }

    /// The standard two-mode world: V=2, D=3, reward `mode_value` at
    /// all-zeros and all-ones.
    pub fn two_mode(mode_value: f64) -> Self {
        Self::new(2, 3, vec![(vec![0, 0, 0], mode_value), (vec![1, 1, 1], mode_value)])
            .expect("static mode set is valid")
    }

    /// Single-mode world used by the zero-temperature concentration runs.
    pub fn one_mode(mode_value: f64) -> Self {
        Self::new(2, 3, vec![(vec![1, 1, 1], mode_value)]).expect("static mode set is valid")
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn modes(&self) -> &[(Vec<u16>, f64)] {
        &self.modes
    }

    pub fn mode_sequences(&self) -> Vec<Sequence> {
        self.modes
            .iter()
            .map(|(tokens, _)| Sequence {
                tokens: tokens.clone(),
            })
            .collect()
    }

    /// Single empty prompt; the tabular backend keys on its id.
    pub fn prompt(&self) -> Prompt {
        Prompt::new(0, vec![], self.response_len)
    }

    pub fn reward(&self, response: &Sequence) -> f64 {
        for (tokens, value) in &self.modes {
            if tokens == &response.tokens {
                return *value;
            }
        }
        0.0
    }
}
