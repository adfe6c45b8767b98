//! Tabular backend: one logit row per (prompt id, masked response state,
//! position). Exactly enumerable, which is what every oracle test leans on.
//!
//! States are indexed by base-(V+1) encoding of the masked response with the
//! mask sentinel as digit V: `state = sum_d tokens[d] * (V+1)^d`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdm::{MaskedSequence, Prompt, Vocabulary};
use crate::policy::{softmax_into, Policy, PolicyOutput, PolicyParams, ShapeMeta, TapeEntry};

/// Default cap on `(V+1)^D` states per prompt.
pub const DEFAULT_STATE_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabularShape {
    pub num_prompts: usize,
    pub response_len: usize,
    pub vocab_size: u16,
}

impl TabularShape {
    pub fn n_states(&self) -> usize {
        (self.vocab_size as usize + 1).pow(self.response_len as u32)
    }

    pub fn param_count(&self) -> usize {
        self.num_prompts * self.n_states() * self.response_len * self.vocab_size as usize
    }

    /// Base-(V+1) state index of a masked response.
    pub fn state_index(&self, tokens: &[u16]) -> usize {
        let radix = self.vocab_size as usize + 1;
        let mut idx = 0usize;
        let mut scale = 1usize;
        for &t in tokens {
            idx += t as usize * scale;
            scale *= radix;
        }
        idx
    }

    /// Offset of the V-wide logit row for (prompt, state, position).
    pub fn row_offset(&self, prompt_id: usize, state: usize, pos: usize) -> usize {
        ((prompt_id * self.n_states() + state) * self.response_len + pos)
            * self.vocab_size as usize
    }

    pub(crate) fn forward(
        &self,
        flat: &[f64],
        prompt: &Prompt,
        masked: &MaskedSequence,
        _aux: Option<&mut Vec<f64>>,
    ) -> Result<PolicyOutput> {
        if prompt.id >= self.num_prompts {
            return Err(Error::InvalidInput(format!(
                "unknown prompt id {} (tabular backend holds {})",
                prompt.id, self.num_prompts
            )));
        }
        let d = self.response_len;
        let v = self.vocab_size as usize;
        if masked.len() != d {
            return Err(Error::InvalidInput(format!(
                "masked length {} != response length {d}",
                masked.len()
            )));
        }
        let state = self.state_index(masked.tokens());
        let mut probs = vec![0.0; d * v];
        for pos in 0..d {
            let row = &mut probs[pos * v..(pos + 1) * v];
            let tok = masked.tokens()[pos];
            if tok == self.vocab_size {
                let off = self.row_offset(prompt.id, state, pos);
                softmax_into(&flat[off..off + v], row);
            } else {
                row[tok as usize] = 1.0;
            }
        }
        Ok(PolicyOutput::from_rows(d, v, probs))
    }

    pub(crate) fn backprop(
        &self,
        _flat: &[f64],
        entry: &TapeEntry,
        by_pos: &BTreeMap<usize, Vec<(u16, f64)>>,
        grad: &mut [f64],
    ) {
        let v = self.vocab_size as usize;
        let state = self.state_index(&entry.masked_tokens);
        for (&pos, coeffs) in by_pos {
            debug_assert_eq!(entry.masked_tokens[pos], self.vocab_size);
            let base = self.row_offset(entry.prompt_id, state, pos);
            let row = &entry.probs[pos * v..(pos + 1) * v];
            // d loss / d logit_u = g_u - pi_u * sum(g), for upstream g on log probs
            let mut total = 0.0;
            for &(tok, c) in coeffs {
                grad[base + tok as usize] += c;
                total += c;
            }
            for u in 0..v {
                grad[base + u] -= row[u] * total;
            }
        }
    }
}

/// Zero-initialized tabular policy (uniform conditionals everywhere).
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    params: PolicyParams,
}

impl TabularPolicy {
    pub fn init(num_prompts: usize, response_len: usize, vocab: &Vocabulary) -> Result<Self> {
        Self::init_capped(num_prompts, response_len, vocab, DEFAULT_STATE_CAP)
    }

    pub fn init_capped(
        num_prompts: usize,
        response_len: usize,
        vocab: &Vocabulary,
        state_cap: usize,
    ) -> Result<Self> {
        let radix = vocab.size() as usize + 1;
        let mut n_states: usize = 1;
        for _ in 0..response_len {
            n_states = n_states.saturating_mul(radix);
            if n_states > state_cap {
                return Err(Error::Capacity(format!(
                    "(V+1)^D = {radix}^{response_len} exceeds the tabular state cap {state_cap}"
                )));
            }
        }
        let shape = TabularShape {
            num_prompts,
            response_len,
            vocab_size: vocab.size(),
        };
        let flat = vec![0.0; shape.param_count()];
        Ok(Self {
            params: PolicyParams {
                flat,
                shape: ShapeMeta::Tabular(shape),
            },
        })
    }

    /// Set the logit row for a masked state and position.
    pub fn set_row(
        &mut self,
        prompt_id: usize,
        masked_tokens: &[u16],
        pos: usize,
        logits: &[f64],
    ) -> Result<()> {
        let shape = match &self.params.shape {
            ShapeMeta::Tabular(s) => s.clone(),
            _ => unreachable!(),
        };
        if logits.len() != shape.vocab_size as usize {
            return Err(Error::InvalidInput("logit row length mismatch".into()));
        }
        let state = shape.state_index(masked_tokens);
        let off = shape.row_offset(prompt_id, state, pos);
        self.params.flat[off..off + logits.len()].copy_from_slice(logits);
        Ok(())
    }

    pub fn into_params(self) -> PolicyParams {
        self.params
    }

    pub fn into_policy(self) -> Policy {
        Policy::new(self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::apply_mask;
    use crate::mdm::Sequence;

    #[test]
    fn state_count_matches_radix_power() {
        let vocab = Vocabulary::new(3).unwrap();
        let pol = TabularPolicy::init(1, 4, &vocab).unwrap();
        match &pol.params.shape {
            ShapeMeta::Tabular(s) => assert_eq!(s.n_states(), 256),
            _ => unreachable!(),
        }
    }

    #[test]
    fn state_index_example() {
        // [M, a] with V=2: 2*3^0 + 0*3^1 = 2
        let s = TabularShape {
            num_prompts: 1,
            response_len: 2,
            vocab_size: 2,
        };
        assert_eq!(s.state_index(&[2, 0]), 2);
    }

    #[test]
    fn zero_init_is_uniform_and_one_hot_at_unmasked() {
        let vocab = Vocabulary::new(3).unwrap();
        let pol = TabularPolicy::init(1, 3, &vocab).unwrap().into_params();
        let prompt = Prompt::new(0, vec![], 3);
        let response = Sequence::new(vec![1, 2, 0], &vocab).unwrap();
        let masked = apply_mask(&response, &[0, 2], &vocab).unwrap();
        let out = pol.output(&prompt, &masked).unwrap();
        for u in 0..3u16 {
            assert!((out.prob(0, u) - 1.0 / 3.0).abs() < 1e-12);
            assert!((out.prob(2, u) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(out.prob(1, 2), 1.0);
        assert_eq!(out.prob(1, 0), 0.0);
    }

    #[test]
    fn unknown_prompt_id_is_a_lookup_error() {
        let vocab = Vocabulary::new(2).unwrap();
        let pol = TabularPolicy::init(2, 2, &vocab).unwrap().into_params();
        let prompt = Prompt::new(5, vec![], 2);
        let masked = MaskedSequence::fully_masked(2, &vocab);
        assert!(pol.output(&prompt, &masked).is_err());
    }

    #[test]
    fn capacity_cap_enforced() {
        let vocab = Vocabulary::new(9).unwrap();
        assert!(matches!(
            TabularPolicy::init_capped(1, 8, &vocab, 1000),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        // loss = -log pi(u* | state), gradient wrt that row = pi - onehot(u*).
        let vocab = Vocabulary::new(3).unwrap();
        let mut pol = TabularPolicy::init(1, 2, &vocab).unwrap();
        pol.set_row(0, &[3, 3], 0, &[0.3, -0.1, 0.5]).unwrap();
        let policy = pol.into_policy();
        let prompt = Prompt::new(0, vec![], 2);
        let masked = MaskedSequence::fully_masked(2, &vocab);

        let mut tape = policy.begin_tape();
        let e = policy.forward_traced(&prompt, &masked, &mut tape).unwrap();
        let mut up = crate::policy::Upstream::new(1);
        up.add(e, 0, 1, -1.0); // d(-log pi(1)) / d log pi(1) = -1
        let mut grad = vec![0.0; policy.param_count()];
        policy.backprop(&tape, &up, &mut grad).unwrap();

        let out = policy.output(&prompt, &masked).unwrap();
        let shape = match policy.shape() {
            ShapeMeta::Tabular(s) => s.clone(),
            _ => unreachable!(),
        };
        let base = shape.row_offset(0, shape.state_index(&[3, 3]), 0);
        for u in 0..3u16 {
            let expected = out.prob(0, u) - if u == 1 { 1.0 } else { 0.0 };
            assert!(
                (grad[base + u as usize] - expected).abs() < 1e-12,
                "grad[{u}] = {}, expected {expected}",
                grad[base + u as usize]
            );
        }
    }
}
