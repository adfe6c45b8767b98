//! Importance weights over rollout groups.
//!
//! Each rollout carries an order-specific log weight
//! `l = r/alpha + log p_ref(o|q;sigma) - log p_v(o|q;sigma)`. Within a
//! prompt group of N rollouts the weights are self-normalized to mean one,
//! `w = N * softmax(l)`, which implicitly estimates the partition function;
//! the estimate itself is reported as `z = (1/N) sum exp(l)`. A baseline is
//! then subtracted so that relatively poor rollouts receive negative
//! coefficients in the loss.

use crate::error::{Error, Result};
use crate::mdm::{order_logprob, Order, Prompt, Sequence, Vocabulary};
use crate::policy::PolicySnapshot;

/// Log-weights below this are treated as the -inf sentinel region.
const SENTINEL_THRESHOLD: f64 = -1e8;

/// Shifted log-weights are clipped here before exponentiation; after max
/// subtraction this only fires on sentinel-contaminated entries.
const LOG_WEIGHT_CLIP: f64 = 50.0;

/// Tilt temperature, plus the proximal step size used when `alpha == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub alpha: f64,
    pub eta: f64,
}

impl Temperature {
    pub fn new(alpha: f64, eta: f64) -> Result<Self> {
        let t = Self { alpha, eta };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.alpha == 0.0 && self.eta <= 0.0 {
            return Err(Error::Config(
                "alpha = 0 engages proximal mode, which requires eta > 0".into(),
            ));
        }
        Ok(())
    }

    /// Zero temperature runs in proximal mode.
    pub fn is_proximal(&self) -> bool {
        self.alpha == 0.0
    }
}

/// `l = r/alpha + (log p_ref - log p_v)` along the recorded order.
///
/// Errors on `alpha <= 0`; use [`proximal_log_weight`] for the zero-
/// temperature mode.
pub fn log_weight(reward: f64, alpha: f64, log_ratio_ref_v: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::Config(
            "alpha = 0 has no reward tilt of this form; use proximal_log_weight".into(),
        ));
    }
    Ok(reward / alpha + log_ratio_ref_v)
}

/// Snapshot-level form of [`log_weight`]: computes the order-specific log
/// probabilities under both snapshots. Returns `(l, logp_ref, logp_v)`.
#[allow(clippy::too_many_arguments)]
pub fn log_weight_for(
    ref_snap: &PolicySnapshot,
    v_snap: &PolicySnapshot,
    prompt: &Prompt,
    response: &Sequence,
    order: &Order,
    reward: f64,
    alpha: f64,
    vocab: &Vocabulary,
) -> Result<(f64, f64, f64)> {
    let logp_ref = order_logprob(ref_snap.params(), prompt, response, order, vocab)?;
    let logp_v = order_logprob(v_snap.params(), prompt, response, order, vocab)?;
    let l = log_weight(reward, alpha, logp_ref - logp_v)?;
    Ok((l, logp_ref, logp_v))
}

/// Zero-temperature proximal log weight:
/// `l = eta*r + (log p_old - log p_v)` along the recorded order.
///
/// With `v_equals_old` the ratio term is identically zero and `l = eta*r`
/// exactly.
pub fn proximal_log_weight(
    reward: f64,
    eta: f64,
    v_equals_old: bool,
    log_ratio_old_v: f64,
) -> Result<f64> {
    if eta <= 0.0 {
        return Err(Error::Config(format!("eta must be > 0, got {eta}")));
    }
    let ratio = if v_equals_old { 0.0 } else { log_ratio_old_v };
    Ok(eta * reward + ratio)
}

/// `N * softmax(scores)` with max-subtraction and sentinel clipping.
/// The result sums to N exactly up to roundoff.
pub fn group_softmax_times_n(scores: &[f64]) -> Result<Vec<f64>> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "weight groups need at least 2 rollouts, got {n}"
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max <= SENTINEL_THRESHOLD {
        return Err(Error::DegenerateGroup(
            "every log weight sits at the -inf sentinel".into(),
        ));
    }
    let exps: Vec<f64> = scores
        .iter()
        .map(|&s| (s - max).clamp(-LOG_WEIGHT_CLIP, LOG_WEIGHT_CLIP).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| n as f64 * e / sum).collect())
}

/// Training-free partition estimate `z = (1/N) sum exp(l)`, evaluated in
/// log space.
pub fn z_estimate(log_weights: &[f64]) -> Result<f64> {
    let n = log_weights.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty group".into()));
    }
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || max <= SENTINEL_THRESHOLD {
        return Err(Error::DegenerateGroup(
            "every log weight sits at the -inf sentinel".into(),
        ));
    }
    let sum: f64 = log_weights.iter().map(|&l| (l - max).exp()).sum();
    Ok((max + sum.ln() - (n as f64).ln()).exp())
}

/// Self-normalized weights plus the partition estimate for one group.
pub fn normalize_weights(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let w = group_softmax_times_n(log_weights)?;
    let z = z_estimate(log_weights)?;
    Ok((w, z))
}

/// Which baseline is subtracted from the normalized weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// No subtraction; ablation runs only.
    None,
    /// Constant 1, the near-optimal limit of the normalized weights.
    Group,
    /// Softmax over log weights with the reward negated.
    Individual,
    /// Softmax over `log p_theta_bar(o;sigma) - log p_v(o;sigma)`.
    Model,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Group => "group",
            BaselineKind::Individual => "individual",
            BaselineKind::Model => "model",
        }
    }
}

/// Group baseline: 1 for every rollout.
pub fn baseline_group(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

/// Individual baseline: `N * softmax(-r/alpha + log_ratio)` over the group.
pub fn baseline_individual(
    rewards: &[f64],
    log_ratios_ref_v: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    if alpha <= 0.0 {
        return Err(Error::Config("individual baseline requires alpha > 0".into()));
    }
    let scores: Vec<f64> = rewards
        .iter()
        .zip(log_ratios_ref_v)
        .map(|(&r, &lr)| -r / alpha + lr)
        .collect();
    group_softmax_times_n(&scores)
}

/// Model baseline from per-record scores
/// `l_theta = log p_theta_bar(o|q;sigma) - log p_v(o|q;sigma)` (or their
/// negative-ELBO surrogates): `N * softmax(l_theta)`.
pub fn baseline_model(model_log_scores: &[f64]) -> Result<Vec<f64>> {
    group_softmax_times_n(model_log_scores)
}

/// Effective sample size `(sum w)^2 / sum w^2` of one group.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// One rollout's weight fields inside a group.
#[derive(Debug, Clone, Copy)]
pub struct WeightEntry {
    /// `l`, the importance log weight.
    pub log_weight: f64,
    /// Normalized weight `w`, mean one over the group.
    pub weight: f64,
    /// Subtracted baseline `w_base`.
    pub baseline: f64,
    /// `w - w_base`, the coefficient entering the loss.
    pub real_weight: f64,
}

/// A prompt group's finalized weights.
#[derive(Debug, Clone)]
pub struct WeightGroup {
    pub prompt_id: usize,
    pub entries: Vec<WeightEntry>,
    pub z_estimate: f64,
}

/// Everything needed to finalize one group's weights.
#[derive(Debug, Clone)]
pub struct GroupInputs {
    pub prompt_id: usize,
    pub rewards: Vec<f64>,
    /// `log p_ref(o;sigma) - log p_v(o;sigma)` per rollout (zero in
    /// proximal mode with `v = theta_old`).
    pub log_ratios_ref_v: Vec<f64>,
    /// `l_theta` scores per rollout; required for the model baseline.
    pub model_log_scores: Option<Vec<f64>>,
}

/// Compute log weights, normalized weights, the requested baseline and the
/// real weights for one group.
pub fn build_group(
    inputs: &GroupInputs,
    temp: &Temperature,
    baseline: BaselineKind,
) -> Result<WeightGroup> {
    temp.validate()?;
    let n = inputs.rewards.len();
    if inputs.log_ratios_ref_v.len() != n {
        return Err(Error::InvalidInput("group input length mismatch".into()));
    }
    let log_weights: Vec<f64> = if temp.is_proximal() {
        inputs
            .rewards
            .iter()
            .zip(&inputs.log_ratios_ref_v)
            .map(|(&r, &lr)| proximal_log_weight(r, temp.eta, lr == 0.0, lr))
            .collect::<Result<_>>()?
    } else {
        inputs
            .rewards
            .iter()
            .zip(&inputs.log_ratios_ref_v)
            .map(|(&r, &lr)| log_weight(r, temp.alpha, lr))
            .collect::<Result<_>>()?
    };
    let (weights, z) = normalize_weights(&log_weights)?;

    let baselines = match baseline {
        BaselineKind::None => vec![0.0; n],
        BaselineKind::Group => baseline_group(n),
        BaselineKind::Individual => {
            if temp.is_proximal() {
                // negative-reward tilt of the proximal weights
                let scores: Vec<f64> = inputs
                    .rewards
                    .iter()
                    .zip(&inputs.log_ratios_ref_v)
                    .map(|(&r, &lr)| -temp.eta * r + lr)
                    .collect();
                group_softmax_times_n(&scores)?
            } else {
                baseline_individual(&inputs.rewards, &inputs.log_ratios_ref_v, temp.alpha)?
            }
        }
        BaselineKind::Model => {
            let scores = inputs.model_log_scores.as_ref().ok_or_else(|| {
                Error::InvalidInput("model baseline requires model log scores".into())
            })?;
            baseline_model(scores)?
        }
    };

    let entries = log_weights
        .iter()
        .zip(&weights)
        .zip(&baselines)
        .map(|((&l, &w), &b)| WeightEntry {
            log_weight: l,
            weight: w,
            baseline: b,
            real_weight: w - b,
        })
        .collect();

    Ok(WeightGroup {
        prompt_id: inputs.prompt_id,
        entries,
        z_estimate: z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::LOG_ZERO;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn log_weight_closed_forms() {
        // v = ref, alpha = 1, r = ln 2 -> l = ln 2
        assert!(close(log_weight(2f64.ln(), 1.0, 0.0).unwrap(), 2f64.ln(), 1e-15));
        // r = 0 -> pure ratio
        assert!(close(log_weight(0.0, 0.7, -1.25).unwrap(), -1.25, 1e-15));
        // scaling (r, alpha) -> (c r, c alpha) is invariant when v = ref
        let a = log_weight(0.3, 0.5, 0.0).unwrap();
        let b = log_weight(3.0 * 0.3, 3.0 * 0.5, 0.0).unwrap();
        assert!(close(a, b, 1e-12));
        assert!(log_weight(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn proximal_weights_reduce_to_reward_softmax() {
        // v = theta_old, eta = 1, rewards {0, ln 3} -> w = {1/2, 3/2}
        let l0 = proximal_log_weight(0.0, 1.0, true, 0.0).unwrap();
        let l1 = proximal_log_weight(3f64.ln(), 1.0, true, 0.0).unwrap();
        let (w, _) = normalize_weights(&[l0, l1]).unwrap();
        assert!(close(w[0], 0.5, 1e-12));
        assert!(close(w[1], 1.5, 1e-12));

        // eta -> 0+ gives uniform weights
        let l0 = proximal_log_weight(0.0, 1e-12, true, 0.0).unwrap();
        let l1 = proximal_log_weight(5.0, 1e-12, true, 0.0).unwrap();
        let (w, _) = normalize_weights(&[l0, l1]).unwrap();
        assert!(close(w[0], 1.0, 1e-9));
        assert!(close(w[1], 1.0, 1e-9));

        // v != theta_old with zero rewards: pure ratio term
        assert!(close(
            proximal_log_weight(0.0, 2.0, false, -0.4).unwrap(),
            -0.4,
            1e-15
        ));
    }

    #[test]
    fn normalize_weights_closed_form() {
        // l = {0, ln 2} -> w = {2/3, 4/3}, z = 1.5
        let (w, z) = normalize_weights(&[0.0, 2f64.ln()]).unwrap();
        assert!(close(w[0], 2.0 / 3.0, 1e-12));
        assert!(close(w[1], 4.0 / 3.0, 1e-12));
        assert!(close(z, 1.5, 1e-12));

        // equal log weights -> all weights 1
        let (w, _) = normalize_weights(&[0.7, 0.7, 0.7]).unwrap();
        assert!(w.iter().all(|&x| close(x, 1.0, 1e-12)));
    }

    #[test]
    fn degenerate_group_is_an_error() {
        assert!(matches!(
            normalize_weights(&[LOG_ZERO, LOG_ZERO]),
            Err(Error::DegenerateGroup(_))
        ));
        // one sentinel entry is fine: it just gets ~zero weight
        let (w, _) = normalize_weights(&[0.0, LOG_ZERO, 0.0]).unwrap();
        assert!(w[1] < 1e-20);
        assert!(close(w[0], 1.5, 1e-12));
    }

    #[test]
    fn group_baseline_closed_form() {
        let (w, _) = normalize_weights(&[0.0, 2f64.ln()]).unwrap();
        let b = baseline_group(2);
        let real: Vec<f64> = w.iter().zip(&b).map(|(w, b)| w - b).collect();
        assert!(close(real[0], -1.0 / 3.0, 1e-12));
        assert!(close(real[1], 1.0 / 3.0, 1e-12));
        assert!(close(real.iter().sum::<f64>(), 0.0, 1e-12));
    }

    #[test]
    fn individual_baseline_closed_form() {
        // v = ref, alpha = 1, r = {0, ln 2} -> w_base = {4/3, 2/3},
        // w_real = {-2/3, 2/3}
        let rewards = [0.0, 2f64.ln()];
        let ratios = [0.0, 0.0];
        let (w, _) = normalize_weights(&[
            log_weight(rewards[0], 1.0, 0.0).unwrap(),
            log_weight(rewards[1], 1.0, 0.0).unwrap(),
        ])
        .unwrap();
        let base = baseline_individual(&rewards, &ratios, 1.0).unwrap();
        assert!(close(base[0], 4.0 / 3.0, 1e-12));
        assert!(close(base[1], 2.0 / 3.0, 1e-12));
        assert!(close(w[0] - base[0], -2.0 / 3.0, 1e-12));
        assert!(close(w[1] - base[1], 2.0 / 3.0, 1e-12));

        // equal rewards: w_base = w = 1
        let base = baseline_individual(&[0.3, 0.3], &[0.0, 0.0], 1.0).unwrap();
        assert!(base.iter().all(|&b| close(b, 1.0, 1e-12)));
    }

    #[test]
    fn individual_baseline_real_weight_monotone_in_reward() {
        // brute force over random reward vectors at v = ref
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng_state ^= rng_state << 13;
            rng_state ^= rng_state >> 7;
            rng_state ^= rng_state << 17;
            (rng_state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let n = 2 + (next() * 7.0) as usize;
            let mut rewards: Vec<f64> = (0..n).map(|_| next() * 4.0 - 2.0).collect();
            rewards.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rewards.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
            if rewards.len() < 2 {
                continue;
            }
            let ratios = vec![0.0; rewards.len()];
            let ls: Vec<f64> = rewards
                .iter()
                .map(|&r| log_weight(r, 1.0, 0.0).unwrap())
                .collect();
            let (w, _) = normalize_weights(&ls).unwrap();
            let base = baseline_individual(&rewards, &ratios, 1.0).unwrap();
            let real: Vec<f64> = w.iter().zip(&base).map(|(w, b)| w - b).collect();
            for i in 1..real.len() {
                assert!(
                    real[i] > real[i - 1],
                    "w_real not increasing: {real:?} for rewards {rewards:?}"
                );
            }
        }
    }

    #[test]
    fn model_baseline_reduces_to_group_when_theta_bar_equals_v() {
        let base = baseline_model(&[0.0, 0.0, 0.0]).unwrap();
        assert!(base.iter().all(|&b| close(b, 1.0, 1e-12)));
    }

    #[test]
    fn ess_bounds() {
        assert!(close(effective_sample_size(&[1.0, 1.0, 1.0, 1.0]), 4.0, 1e-12));
        let near_degenerate = [3.999, 0.0005, 0.0003, 0.0002];
        let e = effective_sample_size(&near_degenerate);
        assert!(e >= 1.0 && e < 1.01, "ess = {e}");
    }

    #[test]
    fn build_group_wires_everything() {
        let inputs = GroupInputs {
            prompt_id: 3,
            rewards: vec![0.0, 2f64.ln()],
            log_ratios_ref_v: vec![0.0, 0.0],
            model_log_scores: None,
        };
        let temp = Temperature::new(1.0, 1.0).unwrap();
        let g = build_group(&inputs, &temp, BaselineKind::Group).unwrap();
        assert_eq!(g.prompt_id, 3);
        assert!(close(g.entries[0].real_weight, -1.0 / 3.0, 1e-12));
        assert!(close(g.entries[1].real_weight, 1.0 / 3.0, 1e-12));
        assert!(close(g.z_estimate, 1.5, 1e-12));
        let sum_w: f64 = g.entries.iter().map(|e| e.weight).sum();
        assert!(close(sum_w, 2.0, 1e-9));
    }
}
