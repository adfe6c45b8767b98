//! Reward environments and prompt datasets.
//!
//! Every environment fixes a vocabulary, a response length, a prompt
//! encoding, and a total deterministic reward `r(q, o)` defined for *every*
//! response in `V^D` (malformed responses score 0, never crash).

mod countdown;
mod sudoku;
mod synth;

pub use countdown::{
    countdown_reward, countdown_solver, gen_countdown, CountdownEnv, CountdownInstance,
    COUNTDOWN_D, COUNTDOWN_PROMPT_LEN, COUNTDOWN_VOCAB,
};
pub use sudoku::{gen_sudoku, sudoku_reward, SudokuEnv, SudokuInstance, SUDOKU_D, SUDOKU_VOCAB};
pub use synth::SynthEnv;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdm::{Prompt, Sequence, Vocabulary};

/// A reward environment with its prompt dataset.
#[derive(Debug, Clone)]
pub enum Env {
    Synth(SynthEnv),
    Countdown(CountdownEnv),
    Sudoku(SudokuEnv),
}

impl Env {
    pub fn name(&self) -> &'static str {
        match self {
            Env::Synth(_) => "synth",
            Env::Countdown(_) => "countdown",
            Env::Sudoku(_) => "sudoku",
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Env::Synth(e) => e.vocab(),
            Env::Countdown(e) => e.vocab(),
            Env::Sudoku(e) => e.vocab(),
        }
    }

    pub fn response_len(&self) -> usize {
        match self {
            Env::Synth(e) => e.response_len(),
            Env::Countdown(_) => COUNTDOWN_D,
            Env::Sudoku(_) => SUDOKU_D,
        }
    }

    pub fn num_prompts(&self) -> usize {
        match self {
            Env::Synth(_) => 1,
            Env::Countdown(e) => e.instances().len(),
            Env::Sudoku(e) => e.instances().len(),
        }
    }

    /// Prompt token length (identical across the dataset).
    pub fn prompt_len(&self) -> usize {
        match self {
            Env::Synth(_) => 0,
            Env::Countdown(_) => COUNTDOWN_PROMPT_LEN,
            Env::Sudoku(_) => SUDOKU_D,
        }
    }

    pub fn prompt(&self, id: usize) -> Result<Prompt> {
        if id >= self.num_prompts() {
            return Err(Error::InvalidInput(format!(
                "prompt id {id} out of range ({} prompts)",
                self.num_prompts()
            )));
        }
        Ok(match self {
            Env::Synth(e) => e.prompt(),
            Env::Countdown(e) => e.prompt(id),
            Env::Sudoku(e) => e.prompt(id),
        })
    }

    /// Total reward; malformed responses score 0.
    pub fn reward(&self, prompt_id: usize, response: &Sequence) -> f64 {
        match self {
            Env::Synth(e) => e.reward(response),
            Env::Countdown(e) => countdown_reward(&e.instances()[prompt_id], response),
            Env::Sudoku(e) => sudoku_reward(&e.instances()[prompt_id], response),
        }
    }

    /// Whether a reward counts as a full task solve for eval reports.
    pub fn is_solved(&self, reward: f64) -> bool {
        match self {
            Env::Synth(_) => reward > 0.0,
            Env::Countdown(_) | Env::Sudoku(_) => reward >= 1.0 - 1e-12,
        }
    }
}

/// Write countdown instances, one `n1,n2,n3,target` line each.
pub fn write_countdown_dataset(path: &Path, instances: &[CountdownInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&format!(
            "{},{},{},{}\n",
            inst.numbers[0], inst.numbers[1], inst.numbers[2], inst.target
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_countdown_dataset(path: &Path) -> Result<Vec<CountdownInstance>> {
    let text = fs::read_to_string(path)?;
    let mut instances = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = parse_int_line(line, lineno)?;
        if fields.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "countdown line {} has {} fields, expected 4",
                lineno + 1,
                fields.len()
            )));
        }
        instances.push(CountdownInstance::new(
            [fields[0] as u8, fields[1] as u8, fields[2] as u8],
            fields[3] as u16,
        )?);
    }
    Ok(instances)
}

/// Write sudoku instances: 16 solution cells then the blank indices.
pub fn write_sudoku_dataset(path: &Path, instances: &[SudokuInstance]) -> Result<()> {
    let mut out = String::new();
    for inst in instances {
        let mut fields: Vec<String> = inst.solution.iter().map(|c| c.to_string()).collect();
        fields.extend(inst.blanks.iter().map(|b| b.to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_sudoku_dataset(path: &Path) -> Result<Vec<SudokuInstance>> {
    let text = fs::read_to_string(path)?;
    let mut instances = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = parse_int_line(line, lineno)?;
        if fields.len() < 17 {
            return Err(Error::InvalidInput(format!(
                "sudoku line {} has {} fields, expected 16 cells plus blanks",
                lineno + 1,
                fields.len()
            )));
        }
        let mut solution = [0u8; 16];
        for (i, cell) in solution.iter_mut().enumerate() {
            *cell = fields[i] as u8;
        }
        let blanks: Vec<u8> = fields[16..].iter().map(|&b| b as u8).collect();
        instances.push(SudokuInstance::new(solution, blanks)?);
    }
    Ok(instances)
}

fn parse_int_line(line: &str, lineno: usize) -> Result<Vec<i64>> {
    line.split(',')
        .map(|f| {
            f.trim().parse::<i64>().map_err(|_| {
                Error::InvalidInput(format!("line {}: bad integer field '{f}'", lineno + 1))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master;

    #[test]
    fn dataset_round_trips() {
        let dir = std::env::temp_dir().join(format!("dmpo-env-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let cds = gen_countdown(5, &mut master(1)).unwrap();
        let cpath = dir.join("cd.txt");
        write_countdown_dataset(&cpath, &cds).unwrap();
        let back = read_countdown_dataset(&cpath).unwrap();
        assert_eq!(cds.len(), back.len());
        for (a, b) in cds.iter().zip(&back) {
            assert_eq!(a.numbers, b.numbers);
            assert_eq!(a.target, b.target);
        }

        let sds = gen_sudoku(5, &mut master(2)).unwrap();
        let spath = dir.join("sd.txt");
        write_sudoku_dataset(&spath, &sds).unwrap();
        let back = read_sudoku_dataset(&spath).unwrap();
        for (a, b) in sds.iter().zip(&back) {
            assert_eq!(a.solution, b.solution);
            assert_eq!(a.blanks, b.blanks);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
