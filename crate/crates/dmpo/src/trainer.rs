//! The training loop: refresh a rollout buffer every `F` steps with the
//! current policy, then take off-policy gradient steps on the weighted
//! denoising loss in between.
//!
//! Determinism contract: given equal (config, seed), two runs produce
//! byte-identical metrics CSVs regardless of thread count. All stochastic
//! fan-out derives per-task seeds up front and every reduction folds in a
//! fixed order.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{Error, Result};
use crate::loss::{wdce_loss, wddo_loss, LogpMode, LossItem, LossKind};
use crate::mdm::{
    elbo_pair, order_logprob, sample_rollout, EnumCaps, Order, OrderScheme, Prompt, Sequence,
};
use crate::oracle::{exact_kl, model_distribution, ExactDistribution};
use crate::par;
use crate::policy::{Policy, PolicySnapshot, ShapeMeta, SnapshotTag};
use crate::rng::{child_seeds, master, DmpoRng};
use crate::weights::{
    build_group, effective_sample_size, group_softmax_times_n, BaselineKind, GroupInputs,
    Temperature,
};

/// One generated rollout with its weights.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub prompt_id: usize,
    pub response: Sequence,
    pub order: Order,
    pub reward: f64,
    pub logp_ref_sigma: f64,
    pub logp_v_sigma: f64,
    pub log_weight: f64,
    pub weight: f64,
    pub baseline: f64,
    pub real_weight: f64,
    pub birth_step: u64,
}

/// All rollouts for one prompt.
#[derive(Debug, Clone)]
pub struct BufferGroup {
    pub prompt_id: usize,
    pub records: Vec<RolloutRecord>,
    pub z_estimate: f64,
}

/// Replay buffer refreshed every `F` steps and reused off-policy in between.
#[derive(Debug)]
pub struct RolloutBuffer {
    pub groups: Vec<BufferGroup>,
    pub refresh_step: u64,
    /// The sampler snapshot `p_v` the buffer was generated with.
    pub v: PolicySnapshot,
    /// Rollouts whose reward evaluation misbehaved (recorded as 0).
    pub reward_incidents: usize,
}

impl RolloutBuffer {
    pub fn num_records(&self) -> usize {
        self.groups.iter().map(|g| g.records.len()).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.num_records();
        if n == 0 {
            return 0.0;
        }
        self.groups
            .iter()
            .flat_map(|g| g.records.iter().map(|r| r.reward))
            .sum::<f64>()
            / n as f64
    }

    pub fn mean_z(&self) -> f64 {
        self.groups.iter().map(|g| g.z_estimate).sum::<f64>() / self.groups.len() as f64
    }

    pub fn mean_ess(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| {
                let w: Vec<f64> = g.records.iter().map(|r| r.weight).collect();
                effective_sample_size(&w)
            })
            .sum::<f64>()
            / self.groups.len() as f64
    }
}

/// AdamW hyperparameters; `clip_norm` bounds the global gradient norm.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
}

fn default_lr() -> f64 {
    0.01
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_clip_norm() -> f64 {
    1.0
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            weight_decay: 0.0,
            clip_norm: default_clip_norm(),
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Prompts per buffer refresh (B).
    pub batch_prompts: usize,
    /// Rollouts per prompt (N).
    pub rollouts_per_prompt: usize,
    /// Buffer refresh period in steps (F).
    pub refresh_every: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub baseline: BaselineKind,
    pub loss: LossKind,
    #[serde(default = "default_k_masks")]
    pub k_masks: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub total_steps: u64,
    /// Master seed; the CLI injects the run-level seed here.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub order_scheme: OrderScheme,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_eta() -> f64 {
    1.0
}
fn default_k_masks() -> usize {
    4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_prompts == 0 {
            return Err(Error::Config("batch_prompts must be >= 1".into()));
        }
        if self.rollouts_per_prompt < 2 {
            return Err(Error::Config(
                "rollouts_per_prompt must be >= 2 (weights normalize within groups)".into(),
            ));
        }
        if self.refresh_every == 0 {
            return Err(Error::Config("refresh_every must be >= 1".into()));
        }
        if self.k_masks == 0 {
            return Err(Error::Config("k_masks must be >= 1".into()));
        }
        self.temperature().validate()?;
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }

    pub fn temperature(&self) -> Temperature {
        Temperature {
            alpha: self.alpha,
            eta: self.eta,
        }
    }
}

/// AdamW moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Scale the gradient so its global norm is at most `clip_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(grad: &mut [f64], clip_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if clip_norm > 0.0 && norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Decoupled AdamW update with bias correction:
/// `theta <- theta (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + 1e-8)`.
pub fn adamw_update(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    hyper: &OptimizerConfig,
) {
    debug_assert_eq!(params.len(), grad.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * (1.0 - hyper.lr * hyper.weight_decay)
            - hyper.lr * m_hat / (v_hat.sqrt() + 1e-8);
    }
}

/// Cycles the dataset without replacement, reshuffling at each wrap.
#[derive(Debug)]
struct PromptSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl PromptSampler {
    fn new(num_prompts: usize) -> Self {
        Self {
            order: (0..num_prompts).collect(),
            cursor: num_prompts, // force a shuffle on first use
        }
    }

    fn next_batch(&mut self, b: usize, rng: &mut DmpoRng) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        for _ in 0..b {
            if self.cursor >= self.order.len() {
                let n = self.order.len();
                for i in (1..n).rev() {
                    let j = rand::Rng::gen_range(rng, 0..=i);
                    self.order.swap(i, j);
                }
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Sample B prompt groups of N rollouts with the current policy, evaluate
/// rewards, and finalize importance weights and baselines.
#[allow(clippy::too_many_arguments)]
pub fn prepare_buffer(
    policy: &Policy,
    ref_snap: &PolicySnapshot,
    env: &Env,
    config: &TrainConfig,
    sampler: &mut PromptSamplerHandle,
    step: u64,
    rng: &mut DmpoRng,
) -> Result<RolloutBuffer> {
    let v = policy.snapshot(SnapshotTag::V);
    let vocab = env.vocab();
    let temp = config.temperature();
    let b = config.batch_prompts;
    let n = config.rollouts_per_prompt;

    let prompt_ids = sampler.0.next_batch(b, rng);
    let seeds = child_seeds(rng, b * n);

    struct RawRollout {
        response: Sequence,
        order: Order,
        reward: f64,
        reward_ok: bool,
        logp_ref: f64,
        logp_v: f64,
    }

    let prompts: Vec<Prompt> = prompt_ids
        .iter()
        .map(|&id| env.prompt(id))
        .collect::<Result<_>>()?;

    let raw: Vec<Result<RawRollout>> = par::map_range(b * n, |task| {
        let (gi, _ri) = (task / n, task % n);
        let prompt = &prompts[gi];
        let mut task_rng = master(seeds[task]);
        let (response, order) =
            sample_rollout(v.params(), prompt, config.order_scheme, vocab, &mut task_rng)?;
        let r = env.reward(prompt.id, &response);
        let reward_ok = r.is_finite();
        let reward = if reward_ok { r } else { 0.0 };
        let logp_v = order_logprob(v.params(), prompt, &response, &order, vocab)?;
        let logp_ref = order_logprob(ref_snap.params(), prompt, &response, &order, vocab)?;
        Ok(RawRollout {
            response,
            order,
            reward,
            reward_ok,
            logp_ref,
            logp_v,
        })
    });

    let mut reward_incidents = 0usize;
    let mut groups = Vec::with_capacity(b);
    let mut raw_iter = raw.into_iter();
    for (gi, &prompt_id) in prompt_ids.iter().enumerate() {
        let rollouts: Vec<RawRollout> = (0..n)
            .map(|_| raw_iter.next().expect("task count matches"))
            .collect::<Result<_>>()?;
        reward_incidents += rollouts.iter().filter(|r| !r.reward_ok).count();

        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        let log_ratios: Vec<f64> = if temp.is_proximal() {
            // v is theta_old: the ratio term is identically zero
            vec![0.0; n]
        } else {
            rollouts.iter().map(|r| r.logp_ref - r.logp_v).collect()
        };
        // At refresh time the detached model equals v, so the model-baseline
        // scores are exactly zero; they are re-evaluated against the live
        // policy at each training step.
        let model_scores = matches!(config.baseline, BaselineKind::Model)
            .then(|| vec![0.0; n]);

        let group = build_group(
            &GroupInputs {
                prompt_id,
                rewards,
                log_ratios_ref_v: log_ratios,
                model_log_scores: model_scores,
            },
            &temp,
            config.baseline,
        )?;

        let records: Vec<RolloutRecord> = rollouts
            .into_iter()
            .zip(&group.entries)
            .map(|(r, e)| RolloutRecord {
                prompt_id,
                response: r.response,
                order: r.order,
                reward: r.reward,
                logp_ref_sigma: r.logp_ref,
                logp_v_sigma: r.logp_v,
                log_weight: e.log_weight,
                weight: e.weight,
                baseline: e.baseline,
                real_weight: e.real_weight,
                birth_step: step,
            })
            .collect();
        let _ = gi;
        groups.push(BufferGroup {
            prompt_id,
            records,
            z_estimate: group.z_estimate,
        });
    }

    Ok(RolloutBuffer {
        groups,
        refresh_step: step,
        v,
        reward_incidents,
    })
}

/// Opaque prompt-cycling state owned by the run loop.
#[derive(Debug)]
pub struct PromptSamplerHandle(PromptSampler);

impl PromptSamplerHandle {
    pub fn new(num_prompts: usize) -> Self {
        Self(PromptSampler::new(num_prompts))
    }
}

/// Per-step training statistics.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    /// Update skipped because the loss or gradient went non-finite.
    pub aborted: bool,
}

fn auto_logp_mode(shape: &ShapeMeta, d: usize, caps: &EnumCaps) -> LogpMode {
    match shape {
        ShapeMeta::Tabular(_) if d <= caps.order_len => LogpMode::Exact,
        _ => LogpMode::Elbo,
    }
}

/// Per-step model-baseline scores against the live policy:
/// `l_theta = log p_theta(o;sigma) - log p_v(o;sigma)` (exact mode) or the
/// difference of negative-ELBO estimates with shared masks (elbo mode).
fn model_baseline_coeffs(
    policy: &Policy,
    buffer: &RolloutBuffer,
    prompts: &[Prompt],
    config: &TrainConfig,
    env: &Env,
    caps: &EnumCaps,
    rng: &mut DmpoRng,
) -> Result<Vec<Vec<f64>>> {
    let vocab = env.vocab();
    let mode = auto_logp_mode(policy.shape(), env.response_len(), caps);
    let mut coeffs = Vec::with_capacity(buffer.groups.len());
    for (group, prompt) in buffer.groups.iter().zip(prompts) {
        let seeds = child_seeds(rng, group.records.len());
        let scores: Vec<Result<f64>> = par::map_range(group.records.len(), |i| {
            let rec = &group.records[i];
            match mode {
                LogpMode::Exact => {
                    let lp = order_logprob(
                        policy.params(),
                        prompt,
                        &rec.response,
                        &rec.order,
                        vocab,
                    )?;
                    Ok(lp - rec.logp_v_sigma)
                }
                LogpMode::Elbo => {
                    let mut task_rng = master(seeds[i]);
                    let (elbo_theta, elbo_v) = elbo_pair(
                        policy.params(),
                        buffer.v.params(),
                        prompt,
                        &rec.response,
                        config.k_masks,
                        vocab,
                        &mut task_rng,
                    )?;
                    // negative ELBO approximates log p
                    Ok(elbo_v - elbo_theta)
                }
            }
        });
        let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;
        coeffs.push(group_softmax_times_n(&scores)?);
    }
    Ok(coeffs)
}

/// One optimizer update from fresh mask draws over the buffer.
pub fn train_step(
    policy: &mut Policy,
    buffer: &RolloutBuffer,
    env: &Env,
    config: &TrainConfig,
    caps: &EnumCaps,
    opt_state: &mut AdamState,
    rng: &mut DmpoRng,
) -> Result<StepStats> {
    let vocab = env.vocab();
    let prompts: Vec<Prompt> = buffer
        .groups
        .iter()
        .map(|g| env.prompt(g.prompt_id))
        .collect::<Result<_>>()?;

    // The model baseline tracks the live policy between refreshes.
    let model_base: Option<Vec<Vec<f64>>> =
        if matches!(config.baseline, BaselineKind::Model) && config.loss == LossKind::Wdce {
            Some(model_baseline_coeffs(
                policy, buffer, &prompts, config, env, caps, rng,
            )?)
        } else {
            None
        };

    let mut items: Vec<LossItem> = Vec::with_capacity(buffer.num_records());
    for (gi, group) in buffer.groups.iter().enumerate() {
        for (ri, rec) in group.records.iter().enumerate() {
            let coeff = match config.loss {
                LossKind::Wdce => match &model_base {
                    Some(base) => rec.weight - base[gi][ri],
                    None => rec.real_weight,
                },
                // un-baselined weights: the discriminative form carries its
                // own negative gradients
                LossKind::Wddo => rec.weight,
            };
            items.push(LossItem {
                prompt: &prompts[gi],
                response: &rec.response,
                coeff,
            });
        }
    }

    let (loss, mut grad) = match config.loss {
        LossKind::Wdce => wdce_loss(policy, &items, config.k_masks, vocab, rng)?,
        LossKind::Wddo => {
            let mode = auto_logp_mode(policy.shape(), env.response_len(), caps);
            wddo_loss(
                policy, &buffer.v, &items, config.k_masks, vocab, caps, mode, rng,
            )?
        }
    };

    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        // abort: keep the previous parameters, record the incident
        return Ok(StepStats {
            loss,
            grad_norm: f64::NAN,
            aborted: true,
        });
    }

    let grad_norm = clip_grad_norm(&mut grad, config.optimizer.clip_norm);
    adamw_update(policy.flat_mut(), &grad, opt_state, &config.optimizer);
    Ok(StepStats {
        loss,
        grad_norm,
        aborted: false,
    })
}

/// One metrics row per training step. `wall_ms` is written as 0 in the CSV
/// so that equal (config, seed) runs are byte-identical; real timings go to
/// the progress callback.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub loss: f64,
    pub z_mean: f64,
    pub ess: f64,
    pub grad_norm: f64,
    pub kl_to_target: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "step,mean_reward,loss,z_mean,ess,grad_norm,kl_to_target,wall_ms";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let kl = match self.kl_to_target {
            Some(v) => format!("{v}"),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mean_reward,
            self.loss,
            self.z_mean,
            self.ess,
            self.grad_norm,
            kl,
            self.wall_ms
        )
    }
}

/// Precomputed oracle target for per-step KL reporting.
pub struct OracleTarget {
    pub target: ExactDistribution,
    pub prompt: Prompt,
    pub caps: EnumCaps,
}

/// Everything a finished run hands back.
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub aborted_steps: usize,
    pub reward_incidents: usize,
}

/// Run Algorithm-style training: refresh the buffer every `F` steps, update
/// in between, stream metrics rows to `metrics_out`.
#[allow(clippy::too_many_arguments)]
pub fn run(
    policy: &mut Policy,
    ref_snap: &PolicySnapshot,
    env: &Env,
    config: &TrainConfig,
    caps: &EnumCaps,
    oracle: Option<&OracleTarget>,
    metrics_out: &mut dyn Write,
    mut on_step: Option<&mut dyn FnMut(&MetricsRow, std::time::Duration)>,
    mut on_checkpoint: Option<(
        &mut dyn FnMut(u64, &Policy, &AdamState, &DmpoRng) -> Result<()>,
        u64,
    )>,
) -> Result<RunSummary> {
    config.validate()?;
    let mut rng = master(config.seed);
    let mut sampler = PromptSamplerHandle::new(env.num_prompts());
    let mut opt_state = AdamState::new(policy.param_count());
    let mut buffer: Option<RolloutBuffer> = None;
    let mut rows = Vec::with_capacity(config.total_steps as usize);
    let mut aborted_steps = 0usize;
    let mut reward_incidents = 0usize;

    writeln!(metrics_out, "{METRICS_HEADER}")?;
    for step in 0..config.total_steps {
        let t0 = Instant::now();
        if step % config.refresh_every == 0 {
            let fresh = prepare_buffer(policy, ref_snap, env, config, &mut sampler, step, &mut rng)?;
            reward_incidents += fresh.reward_incidents;
            buffer = Some(fresh);
        }
        let buf = buffer.as_ref().expect("buffer refreshed at step 0");
        let stats = train_step(policy, buf, env, config, caps, &mut opt_state, &mut rng)?;
        if stats.aborted {
            aborted_steps += 1;
        }

        let kl = match oracle {
            Some(o) => {
                let model = model_distribution(policy.params(), &o.prompt, env.vocab(), &o.caps)?;
                Some(exact_kl(&o.target, &model)?)
            }
            None => None,
        };
        let row = MetricsRow {
            step,
            mean_reward: buf.mean_reward(),
            loss: stats.loss,
            z_mean: buf.mean_z(),
            ess: buf.mean_ess(),
            grad_norm: stats.grad_norm,
            kl_to_target: kl,
            wall_ms: 0,
        };
        writeln!(metrics_out, "{}", row.to_csv_line())?;
        if let Some(cb) = on_step.as_deref_mut() {
            cb(&row, t0.elapsed());
        }
        if let Some((cb, every)) = on_checkpoint.as_mut() {
            if *every > 0 && (step + 1) % *every == 0 {
                cb(step + 1, policy, &opt_state, &rng)?;
            }
        }
        rows.push(row);
    }
    metrics_out.flush()?;
    Ok(RunSummary {
        rows,
        aborted_steps,
        reward_incidents,
    })
}

/// Rollout-based evaluation: `rollouts_per_prompt` samples per dataset
/// instance under the given scheme.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_rollouts: usize,
    pub mean_reward: f64,
    pub solve_rate: f64,
    pub distinct_fraction: f64,
    /// Per-prompt `(prompt_id, mean_reward, solve_rate)`.
    pub per_prompt: Vec<(usize, f64, f64)>,
}

pub fn evaluate(
    params: &crate::policy::PolicyParams,
    env: &Env,
    rollouts_per_prompt: usize,
    order_scheme: OrderScheme,
    seed: u64,
) -> Result<EvalReport> {
    if rollouts_per_prompt == 0 {
        return Err(Error::InvalidInput("n_rollouts must be >= 1".into()));
    }
    let vocab = env.vocab();
    let np = env.num_prompts();
    let prompts: Vec<Prompt> = (0..np).map(|id| env.prompt(id)).collect::<Result<_>>()?;
    let mut rng = master(seed);
    let seeds = child_seeds(&mut rng, np * rollouts_per_prompt);

    let results: Vec<Result<(Sequence, f64)>> = par::map_range(np * rollouts_per_prompt, |task| {
        let prompt = &prompts[task / rollouts_per_prompt];
        let mut task_rng = master(seeds[task]);
        let (response, _) = sample_rollout(params, prompt, order_scheme, vocab, &mut task_rng)?;
        let reward = env.reward(prompt.id, &response);
        Ok((response, reward))
    });

    let mut all_responses = Vec::with_capacity(results.len());
    let mut per_prompt = Vec::with_capacity(np);
    let mut total_reward = 0.0;
    let mut total_solved = 0usize;
    let mut iter = results.into_iter();
    for prompt_id in 0..np {
        let mut sum_r = 0.0;
        let mut solved = 0usize;
        for _ in 0..rollouts_per_prompt {
            let (response, reward) = iter.next().expect("task count matches")?;
            sum_r += reward;
            if env.is_solved(reward) {
                solved += 1;
            }
            all_responses.push(response);
        }
        total_reward += sum_r;
        total_solved += solved;
        per_prompt.push((
            prompt_id,
            sum_r / rollouts_per_prompt as f64,
            solved as f64 / rollouts_per_prompt as f64,
        ));
    }
    let n = np * rollouts_per_prompt;
    Ok(EvalReport {
        n_rollouts: n,
        mean_reward: total_reward / n as f64,
        solve_rate: total_solved as f64 / n as f64,
        distinct_fraction: crate::oracle::distinct_fraction(&all_responses),
        per_prompt,
    })
}
