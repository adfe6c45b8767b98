//! 4x4 sudoku completion.
//!
//! The prompt shows the solved grid with blanks at the hidden cells (token 0
//! is the blank symbol, tokens 1..=4 the digits); the response regenerates
//! all 16 cells and the reward is the fraction of originally blank cells
//! filled with the solution's digit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdm::{Prompt, Sequence, Vocabulary};
use crate::rng::DmpoRng;

/// Token 0 is the blank marker; 1..=4 are digits.
pub const SUDOKU_VOCAB: u16 = 5;
pub const SUDOKU_D: usize = 16;

/// A solved 4x4 grid that satisfies row/column/box uniqueness; `1 2 | 3 4`
/// band structure.
const TEMPLATE: [u8; 16] = [1, 2, 3, 4, 3, 4, 1, 2, 2, 1, 4, 3, 4, 3, 2, 1];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SudokuInstance {
    /// Row-major solved grid, digits 1..=4.
    pub solution: [u8; 16],
    /// Sorted cell indices hidden in the prompt; between 4 and 12 of them.
    pub blanks: Vec<u8>,
}

impl SudokuInstance {
    pub fn new(solution: [u8; 16], blanks: Vec<u8>) -> Result<Self> {
        if !grid_is_valid(&solution) {
            return Err(Error::InvalidInput(
                "solution violates row/column/box uniqueness".into(),
            ));
        }
        if !(4..=12).contains(&blanks.len()) {
            return Err(Error::InvalidInput(format!(
                "blank count {} outside 4..=12",
                blanks.len()
            )));
        }
        let mut sorted = blanks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != blanks.len() || sorted.iter().any(|&b| b >= 16) {
            return Err(Error::InvalidInput("bad blank index list".into()));
        }
        Ok(Self {
            solution,
            blanks: sorted,
        })
    }

    pub fn prompt_tokens(&self) -> Vec<u16> {
        let mut tokens: Vec<u16> = self.solution.iter().map(|&c| c as u16).collect();
        for &b in &self.blanks {
            tokens[b as usize] = 0;
        }
        tokens
    }
}

/// Row/column/2x2-box uniqueness over digits 1..=4.
pub fn grid_is_valid(grid: &[u8; 16]) -> bool {
    let groups: [[usize; 4]; 12] = [
        [0, 1, 2, 3],
        [4, 5, 6, 7],
        [8, 9, 10, 11],
        [12, 13, 14, 15],
        [0, 4, 8, 12],
        [1, 5, 9, 13],
        [2, 6, 10, 14],
        [3, 7, 11, 15],
        [0, 1, 4, 5],
        [2, 3, 6, 7],
        [8, 9, 12, 13],
        [10, 11, 14, 15],
    ];
    groups.iter().all(|g| {
        let mut seen = [false; 5];
        g.iter().all(|&i| {
            let d = grid[i] as usize;
            if d < 1 || d > 4 || seen[d] {
                false
            } else {
                seen[d] = true;
                true
            }
        })
    })
}

/// Fraction of originally blank cells the response fills correctly.
pub fn sudoku_reward(instance: &SudokuInstance, response: &Sequence) -> f64 {
    let correct = instance
        .blanks
        .iter()
        .filter(|&&b| response.tokens[b as usize] == instance.solution[b as usize] as u16)
        .count();
    correct as f64 / instance.blanks.len() as f64
}

/// Random solved grid: the canonical template pushed through symbol, band,
/// stack, row and column permutations.
fn random_solution(rng: &mut DmpoRng) -> [u8; 16] {
    let mut symbols = [1u8, 2, 3, 4];
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        symbols.swap(i, j);
    }
    let band_swap = rng.gen_bool(0.5);
    let stack_swap = rng.gen_bool(0.5);
    let row_in_band = [rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let col_in_stack = [rng.gen_bool(0.5), rng.gen_bool(0.5)];

    let mut rows = [0usize, 1, 2, 3];
    if row_in_band[0] {
        rows.swap(0, 1);
    }
    if row_in_band[1] {
        rows.swap(2, 3);
    }
    if band_swap {
        rows.swap(0, 2);
        rows.swap(1, 3);
    }
    let mut cols = [0usize, 1, 2, 3];
    if col_in_stack[0] {
        cols.swap(0, 1);
    }
    if col_in_stack[1] {
        cols.swap(2, 3);
    }
    if stack_swap {
        cols.swap(0, 2);
        cols.swap(1, 3);
    }

    let mut grid = [0u8; 16];
    for r in 0..4 {
        for c in 0..4 {
            grid[r * 4 + c] = symbols[(TEMPLATE[rows[r] * 4 + cols[c]] - 1) as usize];
        }
    }
    grid
}

/// Generate instances: random valid solution plus 4..=12 random blanks.
pub fn gen_sudoku(n: usize, rng: &mut DmpoRng) -> Result<Vec<SudokuInstance>> {
    if n == 0 {
        return Err(Error::InvalidInput("dataset size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let solution = random_solution(rng);
        let k = rng.gen_range(4..=12usize);
        let blanks: Vec<u8> = crate::mdm::sample_subset(16, k, rng)
            .into_iter()
            .map(|b| b as u8)
            .collect();
        out.push(SudokuInstance::new(solution, blanks)?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SudokuEnv {
    vocab: Vocabulary,
    instances: Vec<SudokuInstance>,
}

impl SudokuEnv {
    pub fn new(instances: Vec<SudokuInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidInput("empty sudoku dataset".into()));
        }
        Ok(Self {
            vocab: Vocabulary::new(SUDOKU_VOCAB)?,
            instances,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn instances(&self) -> &[SudokuInstance] {
        &self.instances
    }

    pub fn prompt(&self, id: usize) -> Prompt {
        Prompt::new(id, self.instances[id].prompt_tokens(), SUDOKU_D)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master;

    #[test]
    fn template_is_valid() {
        assert!(grid_is_valid(&TEMPLATE));
    }

    #[test]
    fn reward_fractions() {
        let blanks = vec![0, 1, 2, 3, 4, 5, 6, 7];
        let inst = SudokuInstance::new(TEMPLATE, blanks).unwrap();
        let perfect = Sequence {
            tokens: TEMPLATE.iter().map(|&c| c as u16).collect(),
        };
        assert_eq!(sudoku_reward(&inst, &perfect), 1.0);

        // flip two of the eight blanks wrong: 6/8 = 0.75
        let mut tokens: Vec<u16> = TEMPLATE.iter().map(|&c| c as u16).collect();
        tokens[0] = if tokens[0] == 1 { 2 } else { 1 };
        tokens[5] = if tokens[5] == 1 { 2 } else { 1 };
        assert_eq!(sudoku_reward(&inst, &Sequence { tokens }), 0.75);

        // disagree on every blank
        let tokens: Vec<u16> = TEMPLATE
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i < 8 {
                    (c as u16 % 4) + 1 // any different digit
                } else {
                    c as u16
                }
            })
            .collect();
        assert_eq!(sudoku_reward(&inst, &Sequence { tokens }), 0.0);
    }

    #[test]
    fn single_flip_changes_reward_by_one_over_blanks() {
        let inst = SudokuInstance::new(TEMPLATE, vec![2, 5, 9, 11, 14]).unwrap();
        let mut tokens: Vec<u16> = TEMPLATE.iter().map(|&c| c as u16).collect();
        let r_full = sudoku_reward(&inst, &Sequence { tokens: tokens.clone() });
        tokens[9] = (tokens[9] % 4) + 1;
        let r_less = sudoku_reward(&inst, &Sequence { tokens });
        assert!((r_full - r_less - 1.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn generated_solutions_are_valid_and_seeded() {
        let a = gen_sudoku(64, &mut master(5)).unwrap();
        let b = gen_sudoku(64, &mut master(5)).unwrap();
        assert_eq!(a, b);
        for inst in &a {
            assert!(grid_is_valid(&inst.solution));
            assert!((4..=12).contains(&inst.blanks.len()));
        }
    }

    #[test]
    fn prompt_blanks_show_the_blank_symbol() {
        let inst = SudokuInstance::new(TEMPLATE, vec![0, 15, 7, 8]).unwrap();
        let p = inst.prompt_tokens();
        assert_eq!(p[0], 0);
        assert_eq!(p[7], 0);
        assert_eq!(p[8], 0);
        assert_eq!(p[15], 0);
        assert_eq!(p[1], TEMPLATE[1] as u16);
    }
}
