//! Masked discrete diffusion core: sequences, masking, generation orders,
//! order-specific and exact sequence probabilities, ELBO estimation, and
//! rollout sampling.
//!
//! A policy consumes a partially masked sequence and emits one categorical
//! per position. The probability of a clean response is the average over all
//! position orders of the autoregressive product along that order; the ELBO
//! upper-bounds its negative log and is estimated from random maskings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::PolicyParams;
use crate::rng::DmpoRng;

/// Log-probability sentinel standing in for -inf. Survives arithmetic
/// (sums, exp -> 0) instead of poisoning runs with real infinities.
pub const LOG_ZERO: f64 = -1e9;

/// `ln(p)` with zero and negative probabilities mapped to [`LOG_ZERO`].
pub fn ln_guard(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        LOG_ZERO
    }
}

/// Token alphabet plus the reserved mask sentinel.
///
/// Clean tokens live in `0..size`; the mask sentinel is the index `size`
/// itself and never appears in a clean response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u16,
}

impl Vocabulary {
    pub fn new(size: u16) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput(format!(
                "vocabulary size must be >= 2, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> u16 {
        self.size
    }

    pub fn mask_id(&self) -> u16 {
        self.size
    }
}

/// A fully unmasked token sequence of fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sequence {
    pub tokens: Vec<u16>,
}

impl Sequence {
    pub fn new(tokens: Vec<u16>, vocab: &Vocabulary) -> Result<Self> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range for vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sequence in which some positions hold the mask sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    tokens: Vec<u16>,
    masked_positions: Vec<usize>,
    mask_id: u16,
}

impl MaskedSequence {
    /// Wrap raw tokens; `masked_positions` is recomputed from the contents.
    pub fn from_tokens(tokens: Vec<u16>, vocab: &Vocabulary) -> Result<Self> {
        let mask_id = vocab.mask_id();
        if let Some(&t) = tokens.iter().find(|&&t| t > mask_id) {
            return Err(Error::InvalidInput(format!(
                "token {t} out of range (mask id is {mask_id})"
            )));
        }
        let masked_positions = tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask_id)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            tokens,
            masked_positions,
            mask_id,
        })
    }

    /// All positions masked.
    pub fn fully_masked(len: usize, vocab: &Vocabulary) -> Self {
        Self {
            tokens: vec![vocab.mask_id(); len],
            masked_positions: (0..len).collect(),
            mask_id: vocab.mask_id(),
        }
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sorted indices currently holding the mask sentinel.
    pub fn masked_positions(&self) -> &[usize] {
        &self.masked_positions
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.tokens[pos] == self.mask_id
    }

    /// Write a clean token into a masked position.
    pub fn reveal(&mut self, pos: usize, token: u16) {
        debug_assert!(self.is_masked(pos));
        debug_assert!(token < self.mask_id);
        self.tokens[pos] = token;
        if let Ok(i) = self.masked_positions.binary_search(&pos) {
            self.masked_positions.remove(i);
        }
    }
}

/// A permutation of response positions: the order in which positions are
/// revealed during generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Order {
    perm: Vec<usize>,
}

impl Order {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::InvalidInput(format!(
                    "not a permutation of 0..{n}: {perm:?}"
                )));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// A conditioning prompt: integer key into the dataset plus its clean tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: usize,
    pub tokens: Vec<u16>,
    pub response_length: usize,
}

impl Prompt {
    pub fn new(id: usize, tokens: Vec<u16>, response_length: usize) -> Self {
        Self {
            id,
            tokens,
            response_length,
        }
    }
}

/// How generation orders are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderScheme {
    /// Uniform over all permutations.
    Uniform,
    /// Uniform permutation within each consecutive block of the given size,
    /// blocks processed left to right. `Block(d)` degenerates to `Uniform`'s
    /// support only when the block spans the whole response.
    Block(usize),
}

impl Default for OrderScheme {
    fn default() -> Self {
        OrderScheme::Uniform
    }
}

/// Enumeration limits for the exact paths. Overridable from config.
#[derive(Debug, Clone, Copy)]
pub struct EnumCaps {
    /// Maximum response length for order enumeration (`len!` orders).
    pub order_len: usize,
    /// Maximum number of responses (`V^D`) for dense tables.
    pub responses: usize,
}

impl Default for EnumCaps {
    fn default() -> Self {
        Self {
            order_len: 7,
            responses: 4096,
        }
    }
}

impl EnumCaps {
    pub fn check_order_len(&self, d: usize) -> Result<()> {
        if d > self.order_len {
            return Err(Error::Capacity(format!(
                "response length {d} exceeds the order-enumeration cap {}; \
                 use the ELBO estimator instead",
                self.order_len
            )));
        }
        Ok(())
    }

    pub fn check_responses(&self, v: u16, d: usize) -> Result<()> {
        let mut n: usize = 1;
        for _ in 0..d {
            n = n.saturating_mul(v as usize);
            if n > self.responses {
                return Err(Error::Capacity(format!(
                    "V^D = {v}^{d} exceeds the response-enumeration cap {}",
                    self.responses
                )));
            }
        }
        Ok(())
    }
}

/// Mask the given positions of a clean response.
pub fn apply_mask(
    response: &Sequence,
    positions: &[usize],
    vocab: &Vocabulary,
) -> Result<MaskedSequence> {
    let d = response.len();
    let mut tokens = response.tokens.clone();
    for &p in positions {
        if p >= d {
            return Err(Error::InvalidInput(format!(
                "mask position {p} out of range for length {d}"
            )));
        }
        tokens[p] = vocab.mask_id();
    }
    MaskedSequence::from_tokens(tokens, vocab)
}

/// Draw `m ~ Unif{1..=D}` then a uniform size-`m` subset of positions to
/// mask. Returns the masked sequence and `m`.
pub fn sample_mask(
    response: &Sequence,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<(MaskedSequence, usize)> {
    let d = response.len();
    if d == 0 {
        return Err(Error::InvalidInput("cannot mask an empty response".into()));
    }
    let m = rng.gen_range(1..=d);
    let positions = sample_subset(d, m, rng);
    let masked = apply_mask(response, &positions, vocab)?;
    Ok((masked, m))
}

/// Uniform size-`m` subset of `0..d` via partial Fisher-Yates.
pub fn sample_subset(d: usize, m: usize, rng: &mut DmpoRng) -> Vec<usize> {
    debug_assert!(m <= d);
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..m {
        let j = rng.gen_range(i..d);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Uniform random permutation of `0..d`.
pub(crate) fn sample_permutation(d: usize, rng: &mut DmpoRng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// `log p(o | q; sigma)`: sum over reveal steps of the log policy probability
/// of the true token, with earlier positions of the order already revealed.
///
/// Zero-probability factors contribute [`LOG_ZERO`] instead of erroring.
pub fn order_logprob(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    order: &Order,
    vocab: &Vocabulary,
) -> Result<f64> {
    let d = response.len();
    debug_assert_eq!(order.len(), d);
    let mut masked = MaskedSequence::fully_masked(d, vocab);
    let mut total = 0.0;
    for &pos in order.perm() {
        let out = params.output(prompt, &masked)?;
        let token = response.tokens[pos];
        total += ln_guard(out.prob(pos, token));
        masked.reveal(pos, token);
    }
    Ok(total)
}

/// Visit every permutation of `0..d` in a fixed deterministic order.
pub(crate) fn for_each_permutation<F: FnMut(&[usize])>(d: usize, mut f: F) {
    // Heap's algorithm, iterative form.
    let mut a: Vec<usize> = (0..d).collect();
    let mut c = vec![0usize; d];
    f(&a);
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact sequence probability `p(o|q)` by full enumeration of all `D!`
/// orders. Errors when `D` exceeds the order cap.
pub fn exact_seq_prob(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<f64> {
    let d = response.len();
    caps.check_order_len(d)?;
    if d == 0 {
        return Ok(1.0);
    }
    let mut sum = 0.0;
    let mut err = None;
    for_each_permutation(d, |perm| {
        if err.is_some() {
            return;
        }
        let order = Order {
            perm: perm.to_vec(),
        };
        match order_logprob(params, prompt, response, &order, vocab) {
            Ok(lp) => sum += lp.exp(),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(sum / factorial(d))
}

/// Single-draw ELBO term: `(D/m) * sum_{d in masked} -log pi(x~)_{d, o_d}`.
fn elbo_term(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    masked: &MaskedSequence,
    m: usize,
) -> Result<f64> {
    let d = response.len();
    let out = params.output(prompt, masked)?;
    let mut s = 0.0;
    for &pos in masked.masked_positions() {
        s -= ln_guard(out.prob(pos, response.tokens[pos]));
    }
    Ok(s * d as f64 / m as f64)
}

/// Draw `k` mask counts. For `k <= d` the counts stratify over distinct
/// values (a uniform size-`k` subset of `{1..=d}`), otherwise they are
/// i.i.d. uniform. Each draw is marginally `m ~ Unif{1..=d}` either way, so
/// averages stay unbiased.
pub(crate) fn draw_mask_counts(d: usize, k: usize, rng: &mut DmpoRng) -> Vec<usize> {
    if k <= d {
        sample_subset(d, k, rng).iter().map(|&i| i + 1).collect()
    } else {
        (0..k).map(|_| rng.gen_range(1..=d)).collect()
    }
}

/// Monte-Carlo ELBO estimate from `k_masks` mask draws.
pub fn elbo(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    k_masks: usize,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<f64> {
    if k_masks == 0 {
        return Err(Error::InvalidInput("k_masks must be >= 1".into()));
    }
    let d = response.len();
    let mut total = 0.0;
    for m in draw_mask_counts(d, k_masks, rng) {
        let positions = sample_subset(d, m, rng);
        let masked = apply_mask(response, &positions, vocab)?;
        total += elbo_term(params, prompt, response, &masked, m)?;
    }
    Ok(total / k_masks as f64)
}

/// ELBO estimates for two parameter sets sharing the same mask draws
/// (common random numbers shrink the variance of their difference).
/// Returns `(elbo_a, elbo_b)`.
pub fn elbo_pair(
    params_a: &PolicyParams,
    params_b: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    k_masks: usize,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<(f64, f64)> {
    if k_masks == 0 {
        return Err(Error::InvalidInput("k_masks must be >= 1".into()));
    }
    let d = response.len();
    let mut total_a = 0.0;
    let mut total_b = 0.0;
    for m in draw_mask_counts(d, k_masks, rng) {
        let positions = sample_subset(d, m, rng);
        let masked = apply_mask(response, &positions, vocab)?;
        total_a += elbo_term(params_a, prompt, response, &masked, m)?;
        total_b += elbo_term(params_b, prompt, response, &masked, m)?;
    }
    Ok((total_a / k_masks as f64, total_b / k_masks as f64))
}

/// Both exact evaluations of the ELBO; they agree to ~1e-10 by the
/// any-order autoregressive identity.
#[derive(Debug, Clone, Copy)]
pub struct ExactElbo {
    /// `E_sigma[-log p(o|q;sigma)]` over all `D!` orders.
    pub order_form: f64,
    /// Expectation over all `2^D - 1` nonempty mask subsets with the
    /// `(1/D) * (D/m) / C(D,m)` weights.
    pub mask_form: f64,
}

impl ExactElbo {
    pub fn value(&self) -> f64 {
        self.order_form
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Exact ELBO by full enumeration, evaluated both ways.
pub fn exact_elbo(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Sequence,
    vocab: &Vocabulary,
    caps: &EnumCaps,
) -> Result<ExactElbo> {
    let d = response.len();
    caps.check_order_len(d)?;
    if d == 0 {
        return Ok(ExactElbo {
            order_form: 0.0,
            mask_form: 0.0,
        });
    }

    let mut neg_sum = 0.0;
    let mut err = None;
    for_each_permutation(d, |perm| {
        if err.is_some() {
            return;
        }
        let order = Order {
            perm: perm.to_vec(),
        };
        match order_logprob(params, prompt, response, &order, vocab) {
            Ok(lp) => neg_sum -= lp,
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let order_form = neg_sum / factorial(d);

    let mut mask_form = 0.0;
    for bits in 1u64..(1u64 << d) {
        let m = bits.count_ones() as usize;
        let positions: Vec<usize> = (0..d).filter(|&i| bits >> i & 1 == 1).collect();
        let masked = apply_mask(response, &positions, vocab)?;
        let term = elbo_term(params, prompt, response, &masked, m)?;
        mask_form += term / (d as f64 * binomial(d, m));
    }

    Ok(ExactElbo {
        order_form,
        mask_form,
    })
}

/// Draw an order under the scheme, then generate a response by revealing one
/// position at a time from the policy's conditionals.
///
/// The returned order is exactly the one used, so `order_logprob` under the
/// same parameters recovers the true generation log-likelihood.
pub fn sample_rollout(
    params: &PolicyParams,
    prompt: &Prompt,
    scheme: OrderScheme,
    vocab: &Vocabulary,
    rng: &mut DmpoRng,
) -> Result<(Sequence, Order)> {
    let d = prompt.response_length;
    let perm = match scheme {
        OrderScheme::Uniform => sample_permutation(d, rng),
        OrderScheme::Block(b) => {
            if b == 0 || d % b != 0 {
                return Err(Error::Config(format!(
                    "block size {b} does not divide response length {d}"
                )));
            }
            let mut perm = Vec::with_capacity(d);
            for block in 0..d / b {
                let within = sample_permutation(b, rng);
                perm.extend(within.into_iter().map(|i| block * b + i));
            }
            perm
        }
    };

    let mut masked = MaskedSequence::fully_masked(d, vocab);
    let mut tokens = vec![0u16; d];
    for &pos in &perm {
        let out = params.output(prompt, &masked)?;
        let u = out.sample_row(pos, rng);
        tokens[pos] = u;
        masked.reveal(pos, u);
    }
    Ok((Sequence { tokens }, Order { perm }))
}

/// Little-endian base-`V` index of a clean response.
pub fn response_index(tokens: &[u16], v: u16) -> usize {
    let mut idx = 0usize;
    let mut scale = 1usize;
    for &t in tokens {
        idx += t as usize * scale;
        scale *= v as usize;
    }
    idx
}

/// Inverse of [`response_index`].
pub fn index_to_response(mut idx: usize, v: u16, d: usize) -> Vec<u16> {
    let mut tokens = vec![0u16; d];
    for t in tokens.iter_mut() {
        *t = (idx % v as usize) as u16;
        idx /= v as usize;
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::tabular::TabularPolicy;
    use crate::rng::master;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(2).unwrap()
    }

    #[test]
    fn apply_mask_examples() {
        let v = vocab2();
        let s = Sequence::new(vec![0, 1, 0, 1], &v).unwrap();
        let m = apply_mask(&s, &[1, 3], &v).unwrap();
        assert_eq!(m.tokens(), &[0, 2, 0, 2]);
        assert_eq!(m.masked_positions(), &[1, 3]);

        let s2 = Sequence::new(vec![0, 1], &v).unwrap();
        assert_eq!(apply_mask(&s2, &[], &v).unwrap().tokens(), &[0, 1]);
        assert_eq!(apply_mask(&s2, &[0, 1], &v).unwrap().tokens(), &[2, 2]);
        assert!(apply_mask(&s2, &[2], &v).is_err());
    }

    #[test]
    fn sample_mask_length_one_is_deterministic() {
        let v = vocab2();
        let s = Sequence::new(vec![1], &v).unwrap();
        let mut rng = master(0);
        for _ in 0..10 {
            let (m, k) = sample_mask(&s, &v, &mut rng).unwrap();
            assert_eq!(k, 1);
            assert_eq!(m.tokens(), &[2]);
        }
    }

    #[test]
    fn sample_mask_m_frequency_matches_uniform() {
        // D=2: P(m=1) should be 1/2 within 0.01 over 1e5 draws.
        let v = vocab2();
        let s = Sequence::new(vec![0, 1], &v).unwrap();
        let mut rng = master(11);
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            let (_, m) = sample_mask(&s, &v, &mut rng).unwrap();
            if m == 1 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "P(m=1) = {freq}");
    }

    #[test]
    fn sample_mask_subsets_uniform_given_m() {
        // D=4, condition on m=2: each of the 6 subsets within 3 sigma.
        let v = vocab2();
        let s = Sequence::new(vec![0, 1, 0, 1], &v).unwrap();
        let mut rng = master(5);
        let mut counts = std::collections::HashMap::new();
        let mut total = 0usize;
        for _ in 0..120_000 {
            let (m, k) = sample_mask(&s, &v, &mut rng).unwrap();
            if k == 2 {
                *counts.entry(m.masked_positions().to_vec()).or_insert(0usize) += 1;
                total += 1;
            }
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            let freq = c as f64 / total as f64;
            assert!((freq - 1.0 / 6.0).abs() < 0.02, "subset freq {freq}");
        }
    }

    #[test]
    fn order_logprob_uniform_policy() {
        let v = vocab2();
        let pol = TabularPolicy::init(1, 2, &v).unwrap();
        let prompt = Prompt::new(0, vec![], 2);
        let s = Sequence::new(vec![0, 1], &v).unwrap();
        let lp = order_logprob(
            &pol.into_params(),
            &prompt,
            &s,
            &Order::identity(2),
            &v,
        )
        .unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn permutation_count() {
        let mut n = 0;
        for_each_permutation(4, |_| n += 1);
        assert_eq!(n, 24);
    }

    #[test]
    fn block_scheme_validates_divisibility() {
        let v = vocab2();
        let pol = TabularPolicy::init(1, 4, &v).unwrap().into_params();
        let prompt = Prompt::new(0, vec![], 4);
        let mut rng = master(1);
        assert!(matches!(
            sample_rollout(&pol, &prompt, OrderScheme::Block(3), &v, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(sample_rollout(&pol, &prompt, OrderScheme::Block(2), &v, &mut rng).is_ok());
    }

    #[test]
    fn block_order_stays_within_blocks() {
        let v = vocab2();
        let pol = TabularPolicy::init(1, 4, &v).unwrap().into_params();
        let prompt = Prompt::new(0, vec![], 4);
        let mut rng = master(9);
        for _ in 0..50 {
            let (_, order) = sample_rollout(&pol, &prompt, OrderScheme::Block(2), &v, &mut rng).unwrap();
            let p = order.perm();
            assert!(p[..2].iter().all(|&i| i < 2), "first block leaked: {p:?}");
            assert!(p[2..].iter().all(|&i| i >= 2), "second block leaked: {p:?}");
        }
    }

    #[test]
    fn response_index_round_trip() {
        let tokens = vec![2u16, 0, 1];
        let idx = response_index(&tokens, 3);
        assert_eq!(idx, 2 + 0 * 3 + 1 * 9);
        assert_eq!(index_to_response(idx, 3, 3), tokens);
    }
}
