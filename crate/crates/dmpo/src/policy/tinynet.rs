//! Tiny fixed-architecture network backend.
//!
//! Stands in for the large masked-diffusion transformer so the estimator
//! pipeline (sampled masks, importance weights, off-policy reuse) runs
//! against a policy that cannot be enumerated. The forward pass is pinned
//! exactly so independent implementations agree:
//!
//! ```text
//! c        = mean over all positions j of (emb(token_j) + pos_j)
//! a_d      = concat(emb(x_d) + pos_d, c)
//! logits_d = W2 * relu(W1 * a_d + b1) + b2
//! row_d    = softmax(logits_d), overridden to one-hot at unmasked positions
//! ```
//!
//! Positions run prompt-first then response; the embedding table covers the
//! mask sentinel. Initialization: weights and embeddings `Unif(-s, s)` with
//! `s = 1/sqrt(fan_in)` (embeddings use their dimension as fan-in), zero
//! biases.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdm::{MaskedSequence, Prompt, Vocabulary};
use crate::policy::{softmax_into, Policy, PolicyOutput, PolicyParams, ShapeMeta, TapeEntry};
use crate::rng::DmpoRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyNetShape {
    pub vocab_size: u16,
    pub response_len: usize,
    pub prompt_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl TinyNetShape {
    fn v(&self) -> usize {
        self.vocab_size as usize
    }

    /// Total positions: prompt first, then response.
    pub fn n_positions(&self) -> usize {
        self.prompt_len + self.response_len
    }

    fn emb_off(&self, token: u16) -> usize {
        token as usize * self.embed_dim
    }

    fn pos_off(&self, j: usize) -> usize {
        (self.v() + 1) * self.embed_dim + j * self.embed_dim
    }

    fn w1_off(&self) -> usize {
        (self.v() + 1 + self.n_positions()) * self.embed_dim
    }

    fn b1_off(&self) -> usize {
        self.w1_off() + self.hidden_dim * 2 * self.embed_dim
    }

    fn w2_off(&self) -> usize {
        self.b1_off() + self.hidden_dim
    }

    fn b2_off(&self) -> usize {
        self.w2_off() + self.v() * self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        self.b2_off() + self.v()
    }

    fn token_at(&self, j: usize, prompt: &Prompt, masked: &[u16]) -> u16 {
        if j < self.prompt_len {
            prompt.tokens[j]
        } else {
            masked[j - self.prompt_len]
        }
    }

    /// Context vector: mean over all positions of token + positional
    /// embedding.
    fn context(&self, flat: &[f64], prompt: &Prompt, masked: &[u16]) -> Vec<f64> {
        let e = self.embed_dim;
        let p = self.n_positions();
        let mut c = vec![0.0; e];
        for j in 0..p {
            let tok = self.token_at(j, prompt, masked);
            let eo = self.emb_off(tok);
            let po = self.pos_off(j);
            for k in 0..e {
                c[k] += flat[eo + k] + flat[po + k];
            }
        }
        for ck in c.iter_mut() {
            *ck /= p as f64;
        }
        c
    }

    pub(crate) fn forward(
        &self,
        flat: &[f64],
        prompt: &Prompt,
        masked: &MaskedSequence,
        aux: Option<&mut Vec<f64>>,
    ) -> Result<PolicyOutput> {
        let d = self.response_len;
        let v = self.v();
        let e = self.embed_dim;
        let h = self.hidden_dim;
        if masked.len() != d {
            return Err(Error::InvalidInput(format!(
                "masked length {} != response length {d}",
                masked.len()
            )));
        }
        if prompt.tokens.len() != self.prompt_len {
            return Err(Error::InvalidInput(format!(
                "prompt length {} != configured {}",
                prompt.tokens.len(),
                self.prompt_len
            )));
        }
        let c = self.context(flat, prompt, masked.tokens());

        let mut probs = vec![0.0; d * v];
        let mut hidden = aux.map(|a| {
            a.clear();
            a.resize(d * h, 0.0);
            a
        });
        let mut logits = vec![0.0; v];
        let mut act = vec![0.0; h];
        for pos in 0..d {
            let tok = masked.tokens()[pos];
            let row = &mut probs[pos * v..(pos + 1) * v];
            if tok != self.vocab_size {
                row[tok as usize] = 1.0;
                continue;
            }
            let eo = self.emb_off(tok);
            let po = self.pos_off(self.prompt_len + pos);
            // a = [emb + pos, c]; fold the two halves into the W1 product.
            let w1 = self.w1_off();
            let b1 = self.b1_off();
            for hh in 0..h {
                let wrow = &flat[w1 + hh * 2 * e..w1 + (hh + 1) * 2 * e];
                let mut acc = flat[b1 + hh];
                for k in 0..e {
                    acc += wrow[k] * (flat[eo + k] + flat[po + k]);
                    acc += wrow[e + k] * c[k];
                }
                act[hh] = if acc > 0.0 { acc } else { 0.0 };
            }
            if let Some(hbuf) = hidden.as_deref_mut() {
                hbuf[pos * h..(pos + 1) * h].copy_from_slice(&act);
            }
            let w2 = self.w2_off();
            let b2 = self.b2_off();
            for (u, l) in logits.iter_mut().enumerate() {
                let wrow = &flat[w2 + u * h..w2 + (u + 1) * h];
                let mut acc = flat[b2 + u];
                for hh in 0..h {
                    acc += wrow[hh] * act[hh];
                }
                *l = acc;
            }
            softmax_into(&logits, row);
        }
        Ok(PolicyOutput::from_rows(d, v, probs))
    }

    pub(crate) fn backprop(
        &self,
        flat: &[f64],
        entry: &TapeEntry,
        by_pos: &BTreeMap<usize, Vec<(u16, f64)>>,
        grad: &mut [f64],
    ) {
        let v = self.v();
        let e = self.embed_dim;
        let h = self.hidden_dim;
        let p = self.n_positions();
        let prompt = Prompt::new(entry.prompt_id, entry.prompt_tokens.clone(), self.response_len);
        let c = self.context(flat, &prompt, &entry.masked_tokens);

        let w1 = self.w1_off();
        let b1 = self.b1_off();
        let w2 = self.w2_off();
        let b2 = self.b2_off();

        let mut dc = vec![0.0; e];
        let mut dlogits = vec![0.0; v];
        let mut dh = vec![0.0; h];
        for (&pos, coeffs) in by_pos {
            let tok = entry.masked_tokens[pos];
            debug_assert_eq!(tok, self.vocab_size, "upstream touched an unmasked row");
            let row = &entry.probs[pos * v..(pos + 1) * v];
            let act = &entry.aux[pos * h..(pos + 1) * h];

            dlogits.iter_mut().for_each(|x| *x = 0.0);
            let mut total = 0.0;
            for &(u, cf) in coeffs {
                dlogits[u as usize] += cf;
                total += cf;
            }
            for (u, dl) in dlogits.iter_mut().enumerate() {
                *dl -= row[u] * total;
            }

            // W2, b2 and hidden sensitivity
            for hh in dh.iter_mut() {
                *hh = 0.0;
            }
            for u in 0..v {
                let dl = dlogits[u];
                if dl == 0.0 {
                    continue;
                }
                grad[b2 + u] += dl;
                let wrow = &flat[w2 + u * h..w2 + (u + 1) * h];
                let grow = &mut grad[w2 + u * h..w2 + (u + 1) * h];
                for hh in 0..h {
                    grow[hh] += dl * act[hh];
                    dh[hh] += dl * wrow[hh];
                }
            }
            // relu gate
            for hh in 0..h {
                if act[hh] <= 0.0 {
                    dh[hh] = 0.0;
                }
            }

            // W1, b1, and input sensitivity (split halves: direct, context)
            let eo = self.emb_off(tok);
            let po = self.pos_off(self.prompt_len + pos);
            for hh in 0..h {
                let g = dh[hh];
                if g == 0.0 {
                    continue;
                }
                grad[b1 + hh] += g;
                let row_off = w1 + hh * 2 * e;
                for k in 0..e {
                    let a_direct = flat[eo + k] + flat[po + k];
                    grad[row_off + k] += g * a_direct;
                    grad[row_off + e + k] += g * c[k];
                    // d a_direct flows to the mask embedding and position
                    grad[eo + k] += g * flat[row_off + k];
                    grad[po + k] += g * flat[row_off + k];
                    dc[k] += g * flat[row_off + e + k];
                }
            }
        }

        // Context mean distributes evenly over every position's token and
        // positional embedding.
        let scale = 1.0 / p as f64;
        for j in 0..p {
            let tok = self.token_at(j, &prompt, &entry.masked_tokens);
            let eo = self.emb_off(tok);
            let po = self.pos_off(j);
            for k in 0..e {
                let g = dc[k] * scale;
                grad[eo + k] += g;
                grad[po + k] += g;
            }
        }
    }
}

/// Seeded tiny network.
#[derive(Debug, Clone)]
pub struct TinyNetPolicy {
    params: PolicyParams,
}

impl TinyNetPolicy {
    pub fn init(
        vocab: &Vocabulary,
        response_len: usize,
        prompt_len: usize,
        embed_dim: usize,
        hidden_dim: usize,
        rng: &mut DmpoRng,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden_dim == 0 {
            return Err(Error::Config("tinynet dims must be positive".into()));
        }
        let shape = TinyNetShape {
            vocab_size: vocab.size(),
            response_len,
            prompt_len,
            embed_dim,
            hidden_dim,
        };
        let mut flat = vec![0.0; shape.param_count()];

        let emb_end = (shape.v() + 1 + shape.n_positions()) * embed_dim;
        let s_emb = 1.0 / (embed_dim as f64).sqrt();
        for x in &mut flat[..emb_end] {
            *x = rng.gen_range(-s_emb..s_emb);
        }
        let s_w1 = 1.0 / ((2 * embed_dim) as f64).sqrt();
        let (w1_off, b1_off) = (shape.w1_off(), shape.b1_off());
        for x in &mut flat[w1_off..b1_off] {
            *x = rng.gen_range(-s_w1..s_w1);
        }
        let s_w2 = 1.0 / (hidden_dim as f64).sqrt();
        let (w2_off, b2_off) = (shape.w2_off(), shape.b2_off());
        for x in &mut flat[w2_off..b2_off] {
            *x = rng.gen_range(-s_w2..s_w2);
        }
        // biases stay zero

        Ok(Self {
            params: PolicyParams {
                flat,
                shape: ShapeMeta::TinyNet(shape),
            },
        })
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
    use crate::mdm::{apply_mask, Sequence};
    use crate::rng::master;

    fn net(vocab_size: u16, d: usize, p: usize) -> Policy {
        let vocab = Vocabulary::new(vocab_size).unwrap();
        TinyNetPolicy::init(&vocab, d, p, 4, 6, &mut master(42))
            .unwrap()
            .into_policy()
    }

    #[test]
    fn zero_weights_give_uniform_masked_rows() {
        let vocab = Vocabulary::new(3).unwrap();
        let mut policy = net(3, 3, 2);
        for w in policy.flat_mut() {
            *w = 0.0;
        }
        let prompt = Prompt::new(0, vec![0, 1], 3);
        let response = Sequence::new(vec![2, 0, 1], &vocab).unwrap();
        let masked = apply_mask(&response, &[0, 2], &vocab).unwrap();
        let out = policy.output(&prompt, &masked).unwrap();
        for u in 0..3u16 {
            assert!((out.prob(0, u) - 1.0 / 3.0).abs() < 1e-12);
            assert!((out.prob(2, u) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(out.prob(1, 0), 1.0);
    }

    #[test]
    fn rows_are_stochastic_and_one_hot_at_unmasked() {
        let vocab = Vocabulary::new(4).unwrap();
        let policy = net(4, 4, 3);
        let prompt = Prompt::new(0, vec![1, 2, 3], 4);
        let response = Sequence::new(vec![0, 3, 1, 2], &vocab).unwrap();
        let masked = apply_mask(&response, &[1, 3], &vocab).unwrap();
        let out = policy.output(&prompt, &masked).unwrap();
        for pos in 0..4 {
            let sum: f64 = out.row(pos).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row {pos} sums to {sum}");
        }
        assert_eq!(out.prob(0, 0), 1.0);
        assert_eq!(out.prob(2, 1), 1.0);
    }

    #[test]
    fn swapping_unmasked_tokens_keeps_context_mean() {
        // Permuting two revealed positions' contents changes only their own
        // one-hot rows; masked rows see the same context mean.
        let vocab = Vocabulary::new(4).unwrap();
        let policy = net(4, 4, 2);
        let prompt = Prompt::new(0, vec![1, 2], 4);
        let a = MaskedSequence::from_tokens(vec![0, 3, 4, 4], &vocab).unwrap();
        let b = MaskedSequence::from_tokens(vec![3, 0, 4, 4], &vocab).unwrap();
        let out_a = policy.output(&prompt, &a).unwrap();
        let out_b = policy.output(&prompt, &b).unwrap();
        for pos in 2..4 {
            for u in 0..4u16 {
                assert!((out_a.prob(pos, u) - out_b.prob(pos, u)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn prompt_length_mismatch_is_rejected() {
        let vocab = Vocabulary::new(3).unwrap();
        let policy = net(3, 2, 2);
        let prompt = Prompt::new(0, vec![0], 2);
        let masked = MaskedSequence::fully_masked(2, &vocab);
        assert!(policy.output(&prompt, &masked).is_err());
    }
}
