//! Countdown-mini: reach a target number from three given numbers.
//!
//! Responses are 9-token expressions over single-digit numbers with
//! left-to-right evaluation and no operator precedence:
//! `digit (op digit)* '=' numeral [pad...]`, where the right-hand numeral is
//! one or two digit tokens read as a decimal value (a leading zero is a
//! valid parse). Reward 1 when the equation is true, equals the target, and
//! uses exactly the three provided numbers once each; 0.1 when it uses the
//! right numbers but misses the target; 0 otherwise, including parse
//! failures.
//!
//! Token ids: digits `0..=9` map to themselves, then `+ - * = pad sep go`.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdm::{Prompt, Sequence, Vocabulary};
use crate::rng::DmpoRng;

pub const TOK_PLUS: u16 = 10;
pub const TOK_MINUS: u16 = 11;
pub const TOK_TIMES: u16 = 12;
pub const TOK_EQUALS: u16 = 13;
pub const TOK_PAD: u16 = 14;
pub const TOK_SEP: u16 = 15;
pub const TOK_GO: u16 = 16;

/// Vocabulary size: digits, three operators, `=`, pad, and the two prompt
/// markers.
pub const COUNTDOWN_VOCAB: u16 = 17;
/// Fixed response length.
pub const COUNTDOWN_D: usize = 9;
/// Prompt layout: `[n1, n2, n3, sep, t_tens, t_ones, sep, go]`.
pub const COUNTDOWN_PROMPT_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountdownInstance {
    pub numbers: [u8; 3],
    pub target: u16,
}

impl CountdownInstance {
    pub fn new(numbers: [u8; 3], target: u16) -> Result<Self> {
        if numbers.iter().any(|&n| !(1..=9).contains(&n)) {
            return Err(Error::InvalidInput(format!(
                "countdown numbers must lie in 1..=9, got {numbers:?}"
            )));
        }
        if !(1..=99).contains(&target) {
            return Err(Error::InvalidInput(format!(
                "countdown target must lie in 1..=99, got {target}"
            )));
        }
        Ok(Self { numbers, target })
    }

    pub fn prompt_tokens(&self) -> Vec<u16> {
        vec![
            self.numbers[0] as u16,
            self.numbers[1] as u16,
            self.numbers[2] as u16,
            TOK_SEP,
            (self.target / 10) as u16,
            (self.target % 10) as u16,
            TOK_SEP,
            TOK_GO,
        ]
    }
}

fn is_digit(t: u16) -> bool {
    t <= 9
}

fn op_apply(acc: i64, op: u16, rhs: i64) -> i64 {
    match op {
        TOK_PLUS => acc + rhs,
        TOK_MINUS => acc - rhs,
        TOK_TIMES => acc * rhs,
        _ => unreachable!(),
    }
}

struct ParsedEquation {
    operands: Vec<u8>,
    lhs_value: i64,
    rhs_value: i64,
}

/// Parse `digit (op digit)* '=' digit{1,2}` with trailing pads ignored.
fn parse_equation(tokens: &[u16]) -> Option<ParsedEquation> {
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1] == TOK_PAD {
        end -= 1;
    }
    let tokens = &tokens[..end];

    let eq_pos = tokens.iter().position(|&t| t == TOK_EQUALS)?;
    let (lhs, rhs) = (&tokens[..eq_pos], &tokens[eq_pos + 1..]);

    // lhs: digit (op digit)*
    if lhs.is_empty() || lhs.len() % 2 == 0 {
        return None;
    }
    let mut operands = Vec::with_capacity(lhs.len() / 2 + 1);
    let mut value: i64 = 0;
    for (i, &t) in lhs.iter().enumerate() {
        if i % 2 == 0 {
            if !is_digit(t) {
                return None;
            }
            if i == 0 {
                value = t as i64;
            } else {
                value = op_apply(value, lhs[i - 1], t as i64);
            }
            operands.push(t as u8);
        } else if !matches!(t, TOK_PLUS | TOK_MINUS | TOK_TIMES) {
            return None;
        }
    }

    // rhs: one or two digit tokens as a decimal numeral
    if rhs.is_empty() || rhs.len() > 2 || rhs.iter().any(|&t| !is_digit(t)) {
        return None;
    }
    let rhs_value = rhs.iter().fold(0i64, |acc, &t| acc * 10 + t as i64);

    Some(ParsedEquation {
        operands,
        lhs_value: value,
        rhs_value,
    })
}

fn multiset_matches(operands: &[u8], numbers: &[u8; 3]) -> bool {
    if operands.len() != 3 {
        return false;
    }
    let mut a = operands.to_vec();
    let mut b = numbers.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    a == b
}

/// Tri-valued countdown reward: 1 / 0.1 / 0.
pub fn countdown_reward(instance: &CountdownInstance, response: &Sequence) -> f64 {
    let parsed = match parse_equation(&response.tokens) {
        Some(p) => p,
        None => return 0.0,
    };
    if !multiset_matches(&parsed.operands, &instance.numbers) {
        return 0.0;
    }
    let target = instance.target as i64;
    if parsed.lhs_value == target && parsed.rhs_value == target {
        1.0
    } else {
        0.1
    }
}

/// Distinct orderings of the three numbers (duplicates collapse).
fn number_orderings(numbers: &[u8; 3]) -> BTreeSet<[u8; 3]> {
    let [a, b, c] = *numbers;
    BTreeSet::from([
        [a, b, c],
        [a, c, b],
        [b, a, c],
        [b, c, a],
        [c, a, b],
        [c, b, a],
    ])
}

const OPS: [u16; 3] = [TOK_PLUS, TOK_MINUS, TOK_TIMES];

/// Whether any expression over the three numbers reaches the target.
pub fn countdown_solvable(instance: &CountdownInstance) -> bool {
    let target = instance.target as i64;
    for perm in number_orderings(&instance.numbers) {
        for op1 in OPS {
            for op2 in OPS {
                let v = op_apply(op_apply(perm[0] as i64, op1, perm[1] as i64), op2, perm[2] as i64);
                if v == target {
                    return true;
                }
            }
        }
    }
    false
}

/// Every full-reward response: exhaustive enumeration of well-formed
/// expressions using the three numbers once each, keeping those whose value
/// is the target, with every right-hand encoding of the target (canonical
/// and, for single-digit targets, the leading-zero form). Sorted and
/// deduplicated.
pub fn countdown_solver(instance: &CountdownInstance) -> Vec<Sequence> {
    let target = instance.target as i64;
    let mut out = BTreeSet::new();
    let rhs_forms: Vec<Vec<u16>> = if instance.target < 10 {
        vec![
            vec![instance.target],
            vec![0, instance.target],
        ]
    } else {
        vec![vec![instance.target / 10, instance.target % 10]]
    };
    for perm in number_orderings(&instance.numbers) {
        for op1 in OPS {
            for op2 in OPS {
                let v = op_apply(op_apply(perm[0] as i64, op1, perm[1] as i64), op2, perm[2] as i64);
                if v != target {
                    continue;
                }
                for rhs in &rhs_forms {
                    let mut tokens = vec![
                        perm[0] as u16,
                        op1,
                        perm[1] as u16,
                        op2,
                        perm[2] as u16,
                        TOK_EQUALS,
                    ];
                    tokens.extend_from_slice(rhs);
                    tokens.resize(COUNTDOWN_D, TOK_PAD);
                    out.insert(tokens);
                }
            }
        }
    }
    out.into_iter().map(|tokens| Sequence { tokens }).collect()
}

/// Rejection-sample solvable instances.
pub fn gen_countdown(n: usize, rng: &mut DmpoRng) -> Result<Vec<CountdownInstance>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let numbers = [
            rng.gen_range(1..=9u8),
            rng.gen_range(1..=9u8),
            rng.gen_range(1..=9u8),
        ];
        let target = rng.gen_range(1..=99u16);
        let inst = CountdownInstance::new(numbers, target)?;
        if countdown_solvable(&inst) {
            out.push(inst);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CountdownEnv {
    vocab: Vocabulary,
    instances: Vec<CountdownInstance>,
}

impl CountdownEnv {
    pub fn new(instances: Vec<CountdownInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidInput("empty countdown dataset".into()));
        }
        Ok(Self {
            vocab: Vocabulary::new(COUNTDOWN_VOCAB)?,
            instances,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn instances(&self) -> &[CountdownInstance] {
        &self.instances
    }

    pub fn prompt(&self, id: usize) -> Prompt {
        Prompt::new(id, self.instances[id].prompt_tokens(), COUNTDOWN_D)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master;

    fn seq(tokens: Vec<u16>) -> Sequence {
        Sequence { tokens }
    }

    fn inst(numbers: [u8; 3], target: u16) -> CountdownInstance {
        CountdownInstance::new(numbers, target).unwrap()
    }

    #[test]
    fn reward_tri_values() {
        let i = inst([2, 3, 5], 11);
        // 2*3+5=11 evaluates left-to-right to 11
        let full = seq(vec![2, TOK_TIMES, 3, TOK_PLUS, 5, TOK_EQUALS, 1, 1, TOK_PAD]);
        assert_eq!(countdown_reward(&i, &full), 1.0);
        // 2+3+5=11 evaluates to 10, right numbers
        let near = seq(vec![2, TOK_PLUS, 3, TOK_PLUS, 5, TOK_EQUALS, 1, 1, TOK_PAD]);
        assert_eq!(countdown_reward(&i, &near), 0.1);
        // 2*5=11 uses the wrong multiset
        let wrong = seq(vec![
            2, TOK_TIMES, 5, TOK_EQUALS, 1, 1, TOK_PAD, TOK_PAD, TOK_PAD,
        ]);
        assert_eq!(countdown_reward(&i, &wrong), 0.0);
        // token soup
        let soup = seq(vec![TOK_EQUALS, TOK_SEP, 4, TOK_GO, TOK_PAD, 9, 9, 9, 9]);
        assert_eq!(countdown_reward(&i, &soup), 0.0);
    }

    #[test]
    fn true_equation_with_wrong_target_scores_point_one() {
        // 2+3+5=10 is a true equation but misses target 11
        let i = inst([2, 3, 5], 11);
        let r = seq(vec![2, TOK_PLUS, 3, TOK_PLUS, 5, TOK_EQUALS, 1, 0, TOK_PAD]);
        assert_eq!(countdown_reward(&i, &r), 0.1);
    }

    #[test]
    fn interior_pad_is_malformed() {
        let i = inst([2, 3, 5], 11);
        let r = seq(vec![2, TOK_PAD, 3, TOK_PLUS, 5, TOK_EQUALS, 1, 1, TOK_PAD]);
        assert_eq!(countdown_reward(&i, &r), 0.0);
    }

    #[test]
    fn solver_contains_the_known_solution() {
        let i = inst([2, 3, 5], 11);
        let solutions = countdown_solver(&i);
        let known = seq(vec![2, TOK_TIMES, 3, TOK_PLUS, 5, TOK_EQUALS, 1, 1, TOK_PAD]);
        assert!(solutions.contains(&known));
        for s in &solutions {
            assert_eq!(countdown_reward(&i, s), 1.0);
        }
    }

    #[test]
    fn unreachable_target_has_empty_solver_set() {
        // max left-to-right value over {1,1,1} is 3
        let i = inst([1, 1, 1], 4);
        assert!(countdown_solver(&i).is_empty());
        assert!(!countdown_solvable(&i));
    }

    #[test]
    fn generated_instances_are_solvable_and_seeded() {
        let a = gen_countdown(20, &mut master(77)).unwrap();
        let b = gen_countdown(20, &mut master(77)).unwrap();
        assert_eq!(a, b);
        for inst in &a {
            assert!(countdown_solvable(inst));
            assert!(!countdown_solver(inst).is_empty());
        }
    }

    #[test]
    fn prompt_layout() {
        let i = inst([7, 1, 4], 28);
        assert_eq!(
            i.prompt_tokens(),
            vec![7, 1, 4, TOK_SEP, 2, 8, TOK_SEP, TOK_GO]
        );
    }

    #[test]
    fn leading_zero_rhs_counts_for_single_digit_targets() {
        let i = inst([1, 2, 3], 6);
        let canonical = seq(vec![
            1, TOK_PLUS, 2, TOK_PLUS, 3, TOK_EQUALS, 6, TOK_PAD, TOK_PAD,
        ]);
        let padded_zero = seq(vec![1, TOK_PLUS, 2, TOK_PLUS, 3, TOK_EQUALS, 0, 6, TOK_PAD]);
        assert_eq!(countdown_reward(&i, &canonical), 1.0);
        assert_eq!(countdown_reward(&i, &padded_zero), 1.0);
        let solutions = countdown_solver(&i);
        assert!(solutions.contains(&canonical));
        assert!(solutions.contains(&padded_zero));
    }
}
