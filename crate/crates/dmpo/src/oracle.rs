//! Brute-force ground truth for small worlds: dense reward-tilted target
//! distributions, exact model distributions, KL divergences, and mode-mass /
//! diversity metrics. Everything here is deterministic and seed-free.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mdm::{
    exact_seq_prob, index_to_response, response_index, EnumCaps, Prompt, Sequence, Vocabulary,
};
use crate::par;
use crate::policy::tabular::TabularPolicy;
use crate::policy::PolicyParams;

/// Dense probability table over all `V^D` responses for one prompt, indexed
/// by the little-endian base-V response encoding.
#[derive(Debug, Clone)]
pub struct ExactDistribution {
    pub prompt_id: usize,
    pub vocab_size: u16,
    pub response_len: usize,
    pub probs: Vec<f64>,
}

impl ExactDistribution {
    pub fn prob_of(&self, tokens: &[u16]) -> f64 {
        self.probs[response_index(tokens, self.vocab_size)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

fn enumerate_model(
    params: &PolicyParams,
    prompt: &Prompt,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<Vec<f64>> {
    let d = prompt.response_length;
    caps.check_responses(vocab.size(), d)?;
    caps.check_order_len(d)?;
    let n = (vocab.size() as usize).pow(d as u32);
    let probs = par::map_range(n, |idx| {
        let tokens = index_to_response(idx, vocab.size(), d);
        let response = Sequence { tokens };
        exact_seq_prob(params, prompt, &response, vocab, caps)
    });
    probs.into_iter().collect()
}

/// Exact sequence distribution of a policy, enumerated response by response.
/// Errors if the table does not sum to 1 within 1e-9 (a broken policy).
pub fn model_distribution(
    params: &PolicyParams,
    prompt: &Prompt,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<ExactDistribution> {
    let probs = enumerate_model(params, prompt, vocab, caps)?;
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "model distribution sums to {total}, expected 1"
        )));
    }
    Ok(ExactDistribution {
        prompt_id: prompt.id,
        vocab_size: vocab.size(),
        response_len: prompt.response_length,
        probs,
    })
}

/// Reward-tilted target `p*(o|q) = p_ref(o|q) exp(r(q,o)/alpha) / Z(q)` by
/// full enumeration. Returns the normalized table and the exact partition
/// function `Z(q)`.
pub fn exact_target<R>(
    ref_params: &PolicyParams,
    prompt: &Prompt,
    reward: R,
    alpha: f64,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<(ExactDistribution, f64)>
where
    R: Fn(&Sequence) -> f64 + Sync,
{
    if alpha <= 0.0 {
        return Err(Error::Config(
            "exact_target requires alpha > 0; the zero-temperature target is \
             a per-refresh geometric interpolation, not a fixed tilt"
                .into(),
        ));
    }
    exact_tilted(ref_params, prompt, |o| reward(o) / alpha, vocab, caps)
}

/// Generalized tilt: `p(o) ∝ p_base(o) exp(exponent(o))`. Returns the table
/// and the normalizer `sum_o p_base(o) exp(exponent(o))`.
pub fn exact_tilted<E>(
    base_params: &PolicyParams,
    prompt: &Prompt,
    exponent: E,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<(ExactDistribution, f64)>
where
    E: Fn(&Sequence) -> f64 + Sync,
{
    let base = enumerate_model(base_params, prompt, vocab, caps)?;
    let d = prompt.response_length;
    let mut probs: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(idx, &p)| {
            let tokens = index_to_response(idx, vocab.size(), d);
            p * exponent(&Sequence { tokens }).exp()
        })
        .collect();
    let z: f64 = probs.iter().sum();
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::InvalidInput(format!(
            "tilted normalizer is {z}; tilt exponents overflow or the base \
             distribution is degenerate"
        )));
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    Ok((
        ExactDistribution {
            prompt_id: prompt.id,
            vocab_size: vocab.size(),
            response_len: d,
            probs,
        },
        z,
    ))
}

/// Forward KL `KL(p || q) = sum p log(p/q)`, with `0 log 0 = 0` and
/// `p > 0, q = 0` yielding `+inf`.
pub fn exact_kl(p: &ExactDistribution, q: &ExactDistribution) -> Result<f64> {
    if p.probs.len() != q.probs.len() {
        return Err(Error::InvalidInput(
            "KL over mismatched index spaces".into(),
        ));
    }
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl)
}

/// Probability mass the distribution assigns to each listed response.
pub fn mode_mass(dist: &ExactDistribution, modes: &[Sequence]) -> Vec<f64> {
    modes.iter().map(|m| dist.prob_of(&m.tokens)).collect()
}

/// `|unique samples| / |samples|`.
pub fn distinct_fraction(samples: &[Sequence]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let unique: HashSet<&[u16]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    unique.len() as f64 / samples.len() as f64
}

/// Fit a tabular policy to the exact conditionals of a distribution: for
/// every masked state the row at a masked position becomes
/// `P(O_d = u | revealed part of the state)`. The resulting policy's
/// sequence distribution equals `dist` under every generation order.
pub fn fit_tabular(
    dist: &ExactDistribution,
    vocab: &Vocabulary,
    num_prompts: usize,
) -> Result<TabularPolicy> {
    let d = dist.response_len;
    let v = vocab.size() as usize;
    let n_responses = v.pow(d as u32);
    let radix = v + 1;
    let n_states = radix.pow(d as u32);
    let mut policy = TabularPolicy::init(num_prompts, d, vocab)?;

    let mut state_tokens = vec![0u16; d];
    for state in 0..n_states {
        let mut s = state;
        for t in state_tokens.iter_mut() {
            *t = (s % radix) as u16;
            s /= radix;
        }
        let masked: Vec<usize> = (0..d)
            .filter(|&i| state_tokens[i] == vocab.mask_id())
            .collect();
        if masked.is_empty() {
            continue;
        }
        // marginalize over compatible responses
        let mut joint = 0.0;
        let mut cond = vec![0.0; masked.len() * v];
        for idx in 0..n_responses {
            let tokens = index_to_response(idx, vocab.size(), d);
            if (0..d).any(|i| state_tokens[i] != vocab.mask_id() && tokens[i] != state_tokens[i]) {
                continue;
            }
            let p = dist.probs[idx];
            joint += p;
            for (mi, &pos) in masked.iter().enumerate() {
                cond[mi * v + tokens[pos] as usize] += p;
            }
        }
        for (mi, &pos) in masked.iter().enumerate() {
            let logits: Vec<f64> = (0..v)
                .map(|u| {
                    if joint > 0.0 {
                        crate::mdm::ln_guard(cond[mi * v + u] / joint)
                    } else {
                        0.0 // unreachable state: uniform
                    }
                })
                .collect();
            policy.set_row(dist.prompt_id, &state_tokens, pos, &logits)?;
        }
    }
    Ok(policy)
}

/// Plain-text `key=value` oracle report.
pub fn format_report(kl: f64, z: f64, mode_masses: &[(String, f64)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kl={kl}");
    let _ = writeln!(out, "z={z}");
    for (name, mass) in mode_masses {
        let _ = writeln!(out, "mode_mass_{name}={mass}");
    }
    out
}
