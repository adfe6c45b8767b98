//! Weighted denoising cross-entropy (WDCE) and weighted direct
//! discriminative optimization (WDDO), with exact parameter gradients.
//!
//! WDCE averages, over fresh mask draws, the weighted denoising term
//! `w_real * (D/m) * sum_{d masked} -log pi_theta(x~|q)_{d,o_d}`; negative
//! real weights turn into ascent directions on poor rollouts. WDDO is the
//! logistic discrimination loss
//! `-[w * log sig(t) + log sig(-t)]` with `t = log p_theta(o|q) - log
//! p_v(o|q)`, using un-baselined weights.

use crate::error::{Error, Result};
use crate::mdm::{
    self, apply_mask, draw_mask_counts, for_each_permutation, ln_guard, EnumCaps, Order, Prompt,
    Sequence, Vocabulary, LOG_ZERO,
};
use crate::par;
use crate::policy::{Policy, PolicySnapshot, Upstream};
use crate::rng::{child_seeds, master, DmpoRng};

/// Which training loss a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Wdce,
    Wddo,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Wdce => "wdce",
            LossKind::Wddo => "wddo",
        }
    }
}

/// How WDDO evaluates sequence log probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogpMode {
    /// Full order enumeration; tabular-scale only.
    Exact,
    /// Negative-ELBO surrogates with mask draws shared between theta and v.
    Elbo,
}

/// One rollout entering a loss: `coeff` is the real (baseline-subtracted)
/// weight for WDCE and the un-baselined normalized weight for WDDO.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    pub prompt: &'a Prompt,
    pub response: &'a Sequence,
    pub coeff: f64,
}

fn stable_log_sigmoid(t: f64) -> f64 {
    // log sig(t) = -softplus(-t)
    if t > 30.0 {
        -(-t).exp()
    } else if t < -30.0 {
        t
    } else {
        -(1.0 + (-t).exp()).ln()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// WDCE term and gradient for a single rollout, averaged over `k_masks`
/// fresh mask draws.
pub fn wdce_record_term(
    policy: &Policy,
    item: &LossItem,
    k_masks: usize,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<(f64, Vec<f64>)> {
    let d = item.response.len();
    let w = item.coeff;
    let mut tape = policy.begin_tape();
    let mut draws = Vec::with_capacity(k_masks);
    for m in draw_mask_counts(d, k_masks, rng) {
        let positions = mdm::sample_subset(d, m, rng);
        let masked = apply_mask(item.response, &positions, vocab)?;
        let entry = policy.forward_traced(item.prompt, &masked, &mut tape)?;
        draws.push((entry, positions, m));
    }
    let mut value = 0.0;
    let mut upstream = Upstream::new(tape.len());
    let inv_k = 1.0 / k_masks as f64;
    for (entry, positions, m) in &draws {
        let scale = d as f64 / *m as f64;
        for &pos in positions {
            let tok = item.response.tokens[pos];
            value += w * scale * -ln_guard(tape.prob(*entry, pos, tok)) * inv_k;
            upstream.add(*entry, pos, tok, -w * scale * inv_k);
        }
    }
    let mut grad = vec![0.0; policy.param_count()];
    if w != 0.0 {
        policy.backprop(&tape, &upstream, &mut grad)?;
    }
    Ok((value, grad))
}

/// Batch WDCE: mean over records of the per-record mask-averaged term.
/// Returns the scalar loss and its gradient.
pub fn wdce_loss(
    policy: &Policy,
    items: &[LossItem],
    k_masks: usize,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Ok((0.0, vec![0.0; policy.param_count()]));
    }
    let seeds = child_seeds(rng, items.len());
    let terms = par::map_range(items.len(), |i| {
        let mut task_rng = master(seeds[i]);
        wdce_record_term(policy, &items[i], k_masks, vocab, &mut task_rng)
    });
    reduce_terms(terms, items.len(), policy.param_count())
}

/// Log probability of a response with gradient sensitivities, by full order
/// enumeration: `log p(o|q) = log[(1/D!) sum_sigma exp(log p(o|q;sigma))]`.
/// Each order's factors receive upstream coefficient
/// `p(o;sigma) / (D! p(o))`.
fn traced_seq_logprob(
    policy: &Policy,
    prompt: &Prompt,
    response: &Sequence,
    vocab: &Vocabulary,
    caps: &EnumCaps,
    tape: &mut crate::policy::Tape,
) -> Result<(f64, Vec<(usize, usize, u16, f64)>)> {
    let d = response.len();
    caps.check_order_len(d)?;
    let mut perms: Vec<Vec<usize>> = Vec::new();
    for_each_permutation(d, |p| perms.push(p.to_vec()));

    // forward every order, remembering each factor's tape entry
    let mut order_logps = Vec::with_capacity(perms.len());
    let mut factors: Vec<Vec<(usize, usize, u16)>> = Vec::with_capacity(perms.len());
    for perm in &perms {
        let order = Order::new(perm.clone())?;
        let mut masked = mdm::MaskedSequence::fully_masked(d, vocab);
        let mut lp = 0.0;
        let mut fs = Vec::with_capacity(d);
        for &pos in order.perm() {
            let entry = policy.forward_traced(prompt, &masked, tape)?;
            let tok = response.tokens[pos];
            lp += ln_guard(tape.prob(entry, pos, tok));
            fs.push((entry, pos, tok));
            masked.reveal(pos, tok);
        }
        order_logps.push(lp);
        factors.push(fs);
    }

    let n_orders = perms.len() as f64;
    let max = order_logps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= LOG_ZERO / 2.0 {
        // zero-probability response: sentinel value, no gradient signal
        return Ok((LOG_ZERO, Vec::new()));
    }
    let sum_exp: f64 = order_logps.iter().map(|&lp| (lp - max).exp()).sum();
    let logp = max + sum_exp.ln() - n_orders.ln();

    let mut sens = Vec::new();
    for (lp, fs) in order_logps.iter().zip(&factors) {
        let posterior = (lp - max).exp() / sum_exp;
        if posterior == 0.0 {
            continue;
        }
        for &(entry, pos, tok) in fs {
            sens.push((entry, pos, tok, posterior));
        }
    }
    Ok((logp, sens))
}

/// WDDO term and gradient for a single rollout.
///
/// `coeff` is the un-baselined normalized weight. In `Elbo` mode the same
/// mask draws feed both the live-policy and the `v` estimates.
pub fn wddo_record_term(
    policy: &Policy,
    v: &PolicySnapshot,
    item: &LossItem,
    k_masks: usize,
    vocab: &Vocabulary,
    caps: &EnumCaps,
    mode: LogpMode,
    rng: &mut DmpoRng,
) -> Result<(f64, Vec<f64>)> {
    let w = item.coeff;
    let mut tape = policy.begin_tape();
    // (t, sensitivities of t to traced log probs)
    let (t, sens): (f64, Vec<(usize, usize, u16, f64)>) = match mode {
        LogpMode::Exact => {
            let (logp_theta, sens) =
                traced_seq_logprob(policy, item.prompt, item.response, vocab, caps, &mut tape)?;
            let p_v = mdm::exact_seq_prob(v.params(), item.prompt, item.response, vocab, caps)?;
            (logp_theta - ln_guard(p_v), sens)
        }
        LogpMode::Elbo => {
            let d = item.response.len();
            let inv_k = 1.0 / k_masks as f64;
            let mut t = 0.0;
            let mut sens = Vec::new();
            for m in draw_mask_counts(d, k_masks, rng) {
                let positions = mdm::sample_subset(d, m, rng);
                let masked = apply_mask(item.response, &positions, vocab)?;
                let entry = policy.forward_traced(item.prompt, &masked, &mut tape)?;
                let out_v = v.params().output(item.prompt, &masked)?;
                let scale = d as f64 / m as f64;
                for &pos in &positions {
                    let tok = item.response.tokens[pos];
                    t += inv_k
                        * scale
                        * (ln_guard(tape.prob(entry, pos, tok)) - ln_guard(out_v.prob(pos, tok)));
                    sens.push((entry, pos, tok, inv_k * scale));
                }
            }
            (t, sens)
        }
    };

    let value = -(w * stable_log_sigmoid(t) + stable_log_sigmoid(-t));
    // d value / dt = -w * sig(-t) + sig(t)
    let dt = -w * sigmoid(-t) + sigmoid(t);
    let mut upstream = Upstream::new(tape.len());
    for (entry, pos, tok, c) in sens {
        upstream.add(entry, pos, tok, dt * c);
    }
    let mut grad = vec![0.0; policy.param_count()];
    policy.backprop(&tape, &upstream, &mut grad)?;
    Ok((value, grad))
}

/// Batch WDDO: mean over records.
#[allow(clippy::too_many_arguments)]
pub fn wddo_loss(
    policy: &Policy,
    v: &PolicySnapshot,
    items: &[LossItem],
    k_masks: usize,
    vocab: &Vocabulary,
    caps: &EnumCaps,
    mode: LogpMode,
    rng: &mut DmpoRng,
) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Ok((0.0, vec![0.0; policy.param_count()]));
    }
    let seeds = child_seeds(rng, items.len());
    let terms = par::map_range(items.len(), |i| {
        let mut task_rng = master(seeds[i]);
        wddo_record_term(policy, v, &items[i], k_masks, vocab, caps, mode, &mut task_rng)
    });
    reduce_terms(terms, items.len(), policy.param_count())
}

/// Fold per-record terms in index order so results do not depend on the
/// number of worker threads.
fn reduce_terms(
    terms: Vec<Result<(f64, Vec<f64>)>>,
    n: usize,
    param_count: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; param_count];
    for term in terms {
        let (value, g) = term?;
        loss += value;
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    let inv = 1.0 / n as f64;
    loss *= inv;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    Ok((loss, grad))
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wdce" => Ok(LossKind::Wdce),
            "wddo" => Ok(LossKind::Wddo),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::Vocabulary;
    use crate::policy::tabular::TabularPolicy;
    use crate::policy::SnapshotTag;
    use crate::rng::master;

    fn uniform_world() -> (Policy, Prompt, Sequence, Vocabulary) {
        let vocab = Vocabulary::new(2).unwrap();
        let policy = TabularPolicy::init(1, 2, &vocab).unwrap().into_policy();
        let prompt = Prompt::new(0, vec![], 2);
        let response = Sequence::new(vec![0, 1], &vocab).unwrap();
        (policy, prompt, response, vocab)
    }

    #[test]
    fn wdce_uniform_policy_is_two_log_two() {
        // With k_masks = D = 2 the stratified draws hit m=1 and m=2, and for
        // a uniform V=2 policy every draw contributes exactly 2 log 2.
        let (policy, prompt, response, vocab) = uniform_world();
        let item = LossItem {
            prompt: &prompt,
            response: &response,
            coeff: 1.0,
        };
        let (loss, _) =
            wdce_record_term(&policy, &item, 2, &vocab, &mut master(3)).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn wdce_zero_weight_means_zero_loss_and_grad() {
        let (policy, prompt, response, vocab) = uniform_world();
        let item = LossItem {
            prompt: &prompt,
            response: &response,
            coeff: 0.0,
        };
        let (loss, grad) =
            wdce_record_term(&policy, &item, 3, &vocab, &mut master(0)).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn wddo_at_equal_policies_is_two_log_two() {
        let (policy, prompt, response, vocab) = uniform_world();
        let v = policy.snapshot(SnapshotTag::V);
        let caps = EnumCaps::default();
        let item = LossItem {
            prompt: &prompt,
            response: &response,
            coeff: 1.0,
        };
        for mode in [LogpMode::Exact, LogpMode::Elbo] {
            let (loss, _) = wddo_record_term(
                &policy,
                &v,
                &item,
                4,
                &vocab,
                &caps,
                mode,
                &mut master(7),
            )
            .unwrap();
            assert!(
                (loss - 2.0 * 2f64.ln()).abs() < 1e-12,
                "{mode:?}: loss = {loss}"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_backends_and_losses() {
        use crate::policy::tinynet::TinyNetPolicy;
        use crate::policy::{grad_check, Policy};

        let vocab = Vocabulary::new(3).unwrap();
        let prompt = Prompt::new(0, vec![1, 2], 3);
        let response = Sequence::new(vec![0, 2, 1], &vocab).unwrap();
        let caps = EnumCaps::default();

        let make_tabular = || {
            let mut p = TabularPolicy::init(1, 3, &vocab).unwrap().into_policy();
            let mut rng = master(5);
            for w in p.flat_mut() {
                *w = rand::Rng::gen_range(&mut rng, -0.5..0.5);
            }
            p
        };
        let make_tiny = || {
            TinyNetPolicy::init(&vocab, 3, 2, 4, 6, &mut master(8))
                .unwrap()
                .into_policy()
        };

        let run_check = |policy: &mut Policy, which: &str, use_wddo: bool, mode: LogpMode| {
            let v = policy.snapshot(SnapshotTag::V);
            let prompt = if matches!(policy.shape(), crate::policy::ShapeMeta::Tabular(_)) {
                Prompt::new(0, vec![], 3)
            } else {
                prompt.clone()
            };
            let response = response.clone();
            let vocab_c = vocab;
            let caps_c = caps;
            let report = grad_check(
                policy,
                move |p| {
                    let items = [
                        LossItem {
                            prompt: &prompt,
                            response: &response,
                            coeff: 1.3,
                        },
                        LossItem {
                            prompt: &prompt,
                            response: &response,
                            coeff: -0.4,
                        },
                    ];
                    if use_wddo {
                        wddo_loss(p, &v, &items, 2, &vocab_c, &caps_c, mode, &mut master(21))
                    } else {
                        wdce_loss(p, &items, 2, &vocab_c, &mut master(21))
                    }
                },
                1e-5,
                1e-4,
                &mut master(0),
            )
            .unwrap();
            assert!(
                report.pass(),
                "{which}: max rel err {} at {}",
                report.max_rel_err,
                report.worst_index
            );
        };

        run_check(&mut make_tabular(), "tabular/wdce", false, LogpMode::Exact);
        run_check(&mut make_tabular(), "tabular/wddo-exact", true, LogpMode::Exact);
        run_check(&mut make_tiny(), "tinynet/wdce", false, LogpMode::Elbo);
        run_check(&mut make_tiny(), "tinynet/wddo-elbo", true, LogpMode::Elbo);
    }

    #[test]
    fn batch_losses_are_thread_count_independent() {
        let (policy, prompt, response, vocab) = uniform_world();
        let items = vec![
            LossItem {
                prompt: &prompt,
                response: &response,
                coeff: 0.5,
            };
            8
        ];
        let (a, ga) = wdce_loss(&policy, &items, 2, &vocab, &mut master(1)).unwrap();
        let (b, gb) = wdce_loss(&policy, &items, 2, &vocab, &mut master(1)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
