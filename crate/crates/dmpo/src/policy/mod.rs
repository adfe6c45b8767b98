//! Parametric policies over masked sequences.
//!
//! Two backends share one parameter container: `tabular` stores an explicit
//! logit row per (prompt, masked state, position) and is exactly enumerable;
//! `tinynet` is a small fixed-architecture network that exercises the
//! estimator code paths a real model would. Both emit a row-stochastic
//! `D x V` matrix with one-hot rows at unmasked positions.
//!
//! Gradients run through an explicit forward tape: losses record traced
//! forwards, attach `d loss / d log prob` coefficients to the entries they
//! touched, and [`Policy::backprop`] accumulates exact parameter gradients.

pub mod tabular;
pub mod tinynet;

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckReport};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mdm::{MaskedSequence, Prompt};
use crate::rng::DmpoRng;
pub use tabular::TabularShape;
pub use tinynet::TinyNetShape;

/// Backend-specific dimension record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShapeMeta {
    Tabular(TabularShape),
    TinyNet(TinyNetShape),
}

impl ShapeMeta {
    pub fn param_count(&self) -> usize {
        match self {
            ShapeMeta::Tabular(s) => s.param_count(),
            ShapeMeta::TinyNet(s) => s.param_count(),
        }
    }

    pub fn response_len(&self) -> usize {
        match self {
            ShapeMeta::Tabular(s) => s.response_len,
            ShapeMeta::TinyNet(s) => s.response_len,
        }
    }

    pub fn vocab_size(&self) -> u16 {
        match self {
            ShapeMeta::Tabular(s) => s.vocab_size,
            ShapeMeta::TinyNet(s) => s.vocab_size,
        }
    }

    pub fn backend_name(&self) -> &'static str {
        match self {
            ShapeMeta::Tabular(_) => "tabular",
            ShapeMeta::TinyNet(_) => "tinynet",
        }
    }
}

/// Dense parameter vector plus its shape record.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub flat: Vec<f64>,
    pub shape: ShapeMeta,
}

impl PolicyParams {
    pub fn new(flat: Vec<f64>, shape: ShapeMeta) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::InvalidInput(format!(
                "flat length {} does not match shape ({} params)",
                flat.len(),
                shape.param_count()
            )));
        }
        Ok(Self { flat, shape })
    }

    /// Row-stochastic `D x V` output for a prompt and masked response.
    pub fn output(&self, prompt: &Prompt, masked: &MaskedSequence) -> Result<PolicyOutput> {
        match &self.shape {
            ShapeMeta::Tabular(s) => s.forward(&self.flat, prompt, masked, None),
            ShapeMeta::TinyNet(s) => s.forward(&self.flat, prompt, masked, None),
        }
    }

    fn output_traced(
        &self,
        prompt: &Prompt,
        masked: &MaskedSequence,
        aux: &mut Vec<f64>,
    ) -> Result<PolicyOutput> {
        match &self.shape {
            ShapeMeta::Tabular(s) => s.forward(&self.flat, prompt, masked, Some(aux)),
            ShapeMeta::TinyNet(s) => s.forward(&self.flat, prompt, masked, Some(aux)),
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        if self.flat.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidInput("non-finite parameter entry".into()))
        }
    }
}

/// Per-position conditionals emitted by a policy forward pass.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    d: usize,
    v: usize,
    probs: Vec<f64>,
}

impl PolicyOutput {
    pub(crate) fn from_rows(d: usize, v: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len(), d * v);
        Self { d, v, probs }
    }

    pub fn response_len(&self) -> usize {
        self.d
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn prob(&self, pos: usize, token: u16) -> f64 {
        self.probs[pos * self.v + token as usize]
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.probs[pos * self.v..(pos + 1) * self.v]
    }

    /// Inverse-CDF draw from the row's categorical.
    pub fn sample_row(&self, pos: usize, rng: &mut DmpoRng) -> u16 {
        let row = self.row(pos);
        let u: f64 = rand::Rng::gen::<f64>(rng);
        let mut acc = 0.0;
        for (t, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return t as u16;
            }
        }
        (self.v - 1) as u16
    }
}

/// Numerically stable softmax into `out`.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Role of a frozen parameter copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotTag {
    Ref,
    V,
    ThetaBar,
    Adhoc,
}

/// Immutable parameter copy playing the reference / sampler / detached-model
/// roles in the weight formulas.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: PolicyParams,
    pub tag: SnapshotTag,
}

impl PolicySnapshot {
    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn output(&self, prompt: &Prompt, masked: &MaskedSequence) -> Result<PolicyOutput> {
        self.params.output(prompt, masked)
    }

    /// FNV-1a over the parameter bit patterns; constant for the snapshot's
    /// lifetime by construction.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for &x in &self.params.flat {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Live, trainable policy. Parameter mutation bumps an internal version so
/// stale forward tapes are rejected at backprop time.
#[derive(Debug, Clone)]
pub struct Policy {
    params: PolicyParams,
    version: u64,
}

impl Policy {
    pub fn new(params: PolicyParams) -> Self {
        Self { params, version: 0 }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn shape(&self) -> &ShapeMeta {
        &self.params.shape
    }

    pub fn param_count(&self) -> usize {
        self.params.flat.len()
    }

    /// Mutable access to the flat parameters; invalidates existing tapes.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params.flat
    }

    pub fn output(&self, prompt: &Prompt, masked: &MaskedSequence) -> Result<PolicyOutput> {
        self.params.output(prompt, masked)
    }

    pub fn snapshot(&self, tag: SnapshotTag) -> PolicySnapshot {
        PolicySnapshot {
            params: self.params.clone(),
            tag,
        }
    }

    pub fn from_snapshot(snap: &PolicySnapshot) -> Self {
        Self::new(snap.params().clone())
    }

    pub fn begin_tape(&self) -> Tape {
        Tape {
            version: self.version,
            entries: Vec::new(),
        }
    }

    /// Forward pass recorded on a tape for later backprop. Returns the
    /// entry index.
    pub fn forward_traced(
        &self,
        prompt: &Prompt,
        masked: &MaskedSequence,
        tape: &mut Tape,
    ) -> Result<usize> {
        if tape.version != self.version {
            return Err(Error::Usage(
                "forward tape is stale: parameters changed since begin_tape".into(),
            ));
        }
        let mut aux = Vec::new();
        let out = self.params.output_traced(prompt, masked, &mut aux)?;
        tape.entries.push(TapeEntry {
            prompt_id: prompt.id,
            prompt_tokens: prompt.tokens.clone(),
            masked_tokens: masked.tokens().to_vec(),
            probs: out.probs.clone(),
            aux,
        });
        Ok(tape.entries.len() - 1)
    }

    /// Accumulate the exact gradient of a scalar loss into `grad`, given the
    /// loss's sensitivities to the log-probabilities emitted by each traced
    /// forward. Additive over calls.
    pub fn backprop(&self, tape: &Tape, upstream: &Upstream, grad: &mut [f64]) -> Result<()> {
        if tape.version != self.version {
            return Err(Error::Usage(
                "forward tape is stale: parameters changed since the forward pass".into(),
            ));
        }
        if upstream.rows.len() != tape.entries.len() {
            return Err(Error::Usage(format!(
                "upstream covers {} entries but tape has {}",
                upstream.rows.len(),
                tape.entries.len()
            )));
        }
        if grad.len() != self.params.flat.len() {
            return Err(Error::Usage("gradient buffer length mismatch".into()));
        }
        for (entry, rows) in tape.entries.iter().zip(&upstream.rows) {
            if rows.is_empty() {
                continue;
            }
            // Group coefficients per touched position, deterministically.
            let mut by_pos: BTreeMap<usize, Vec<(u16, f64)>> = BTreeMap::new();
            for &(pos, tok, coeff) in rows {
                by_pos.entry(pos).or_default().push((tok, coeff));
            }
            match &self.params.shape {
                ShapeMeta::Tabular(s) => s.backprop(&self.params.flat, entry, &by_pos, grad),
                ShapeMeta::TinyNet(s) => s.backprop(&self.params.flat, entry, &by_pos, grad),
            }
        }
        Ok(())
    }
}

/// Recorded forward passes for one gradient computation.
#[derive(Debug)]
pub struct Tape {
    version: u64,
    entries: Vec<TapeEntry>,
}

impl Tape {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Probability at `(pos, token)` of the recorded entry.
    pub fn prob(&self, entry: usize, pos: usize, token: u16) -> f64 {
        let e = &self.entries[entry];
        let v = e.probs.len() / e.masked_tokens.len();
        e.probs[pos * v + token as usize]
    }
}

#[derive(Debug)]
pub(crate) struct TapeEntry {
    pub prompt_id: usize,
    pub prompt_tokens: Vec<u16>,
    pub masked_tokens: Vec<u16>,
    /// Row-major `D x V` output probabilities.
    pub probs: Vec<f64>,
    /// Backend-specific activations (tinynet: post-relu hidden, `D x H`).
    pub aux: Vec<f64>,
}

/// Sensitivity of a scalar loss to the log-probabilities emitted by traced
/// forwards: per entry, a list of `(position, token, d loss / d log prob)`.
#[derive(Debug, Clone)]
pub struct Upstream {
    rows: Vec<Vec<(usize, u16, f64)>>,
}

impl Upstream {
    pub fn new(n_entries: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n_entries],
        }
    }

    pub fn add(&mut self, entry: usize, pos: usize, token: u16, coeff: f64) {
        self.rows[entry].push((pos, token, coeff));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::Vocabulary;
    use crate::policy::tabular::TabularPolicy;

    #[test]
    fn stale_tape_is_rejected() {
        let vocab = Vocabulary::new(2).unwrap();
        let mut policy = TabularPolicy::init(1, 2, &vocab).unwrap().into_policy();
        let prompt = Prompt::new(0, vec![], 2);
        let masked = MaskedSequence::fully_masked(2, &vocab);
        let mut tape = policy.begin_tape();
        policy.forward_traced(&prompt, &masked, &mut tape).unwrap();
        policy.flat_mut()[0] += 0.1;
        let upstream = Upstream::new(1);
        let mut grad = vec![0.0; policy.param_count()];
        assert!(matches!(
            policy.backprop(&tape, &upstream, &mut grad),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn snapshot_restore_round_trip_is_bit_identical() {
        let vocab = Vocabulary::new(3).unwrap();
        let mut policy = TabularPolicy::init(2, 2, &vocab).unwrap().into_policy();
        for (i, w) in policy.flat_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        let snap = policy.snapshot(SnapshotTag::Ref);
        let restored = Policy::from_snapshot(&snap);
        assert_eq!(policy.params().flat, restored.params().flat);

        let prompt = Prompt::new(1, vec![], 2);
        let masked = MaskedSequence::fully_masked(2, &vocab);
        let a = policy.output(&prompt, &masked).unwrap();
        let b = restored.output(&prompt, &masked).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn snapshot_hash_ignores_later_policy_updates() {
        let vocab = Vocabulary::new(2).unwrap();
        let mut policy = TabularPolicy::init(1, 2, &vocab).unwrap().into_policy();
        let snap = policy.snapshot(SnapshotTag::Ref);
        let h0 = snap.content_hash();
        policy.flat_mut()[3] = 42.0;
        assert_eq!(snap.content_hash(), h0);
    }
}
