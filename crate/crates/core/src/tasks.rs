//! Synthetic sequence-labeling tasks.
//!
//! * `copy`: the target is the input.
//! * `reverse`: the target is the input reversed.
//! * `local_pattern`: target `i` is the sum of the tokens in `i-r..=i+r`
//!   (clipped to the sequence) modulo the vocabulary size.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    LocalPattern,
    Reverse,
}

fn default_radius() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default = "default_radius")]
    pub window_radius: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    /// `local_pattern` with radius 1 over vocab 16 and lengths 8..=20.
    pub fn micro() -> Self {
        Self {
            kind: TaskKind::LocalPattern,
            vocab_size: 16,
            min_len: 8,
            max_len: 20,
            window_radius: 1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(config(format!(
                "task.vocab_size must be at least 4, got {}",
                self.vocab_size
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(config(format!(
                "task.min_len ({}) must be in 1..=task.max_len ({})",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Checks that a model with this vocabulary and length limit can run the task.
    pub fn validate_for(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        self.validate()?;
        if self.vocab_size != vocab_size {
            return Err(config(format!(
                "task.vocab_size ({}) differs from model.vocab_size ({vocab_size})",
                self.vocab_size
            )));
        }
        if self.max_len > max_len {
            return Err(config(format!(
                "task.max_len ({}) exceeds model.max_len ({max_len})",
                self.max_len
            )));
        }
        Ok(())
    }

    pub fn targets(&self, tokens: &[usize]) -> Vec<usize> {
        match self.kind {
            TaskKind::Copy => tokens.to_vec(),
            TaskKind::Reverse => tokens.iter().rev().copied().collect(),
            TaskKind::LocalPattern => local_pattern_targets(tokens, self.window_radius, self.vocab_size),
        }
    }
}

pub fn local_pattern_targets(tokens: &[usize], radius: usize, vocab_size: usize) -> Vec<usize> {
    let n = tokens.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            tokens[lo..=hi].iter().sum::<usize>() % vocab_size
        })
        .collect()
}

/// Padded batch; entries past each length are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn sequence(&self, b: usize) -> &[usize] {
        &self.tokens[b][..self.lengths[b]]
    }

    pub fn target(&self, b: usize) -> &[usize] {
        &self.targets[b][..self.lengths[b]]
    }

    pub fn sequences(&self) -> Vec<&[usize]> {
        (0..self.len()).map(|b| self.sequence(b)).collect()
    }

    /// Targets of all sequences, concatenated in packing order.
    pub fn packed_targets(&self) -> Vec<usize> {
        (0..self.len()).flat_map(|b| self.target(b).iter().copied()).collect()
    }
}

pub fn generate_batch(task: &TaskSpec, batch_size: usize, rng: &mut impl Rng) -> Result<Batch> {
    task.validate()?;
    if batch_size == 0 {
        return Err(config("batch size must be at least 1"));
    }
    let lengths: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(task.min_len..=task.max_len))
        .collect();
    let width = *lengths.iter().max().unwrap();
    let mut tokens = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for &len in &lengths {
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..task.vocab_size)).collect();
        let mut tgt = task.targets(&seq);
        let mut seq = seq;
        seq.resize(width, 0);
        tgt.resize(width, 0);
        tokens.push(seq);
        targets.push(tgt);
    }
    Ok(Batch {
        tokens,
        targets,
        lengths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, RngStream};

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 10,
            min_len: 3,
            max_len: 6,
            window_radius: 1,
            seed: 0,
        }
    }

    #[test]
    fn target_examples() {
        assert_eq!(spec(TaskKind::Copy).targets(&[3, 1, 4]), vec![3, 1, 4]);
        assert_eq!(spec(TaskKind::Reverse).targets(&[3, 1, 4]), vec![4, 1, 3]);
        assert_eq!(spec(TaskKind::LocalPattern).targets(&[2, 3, 5]), vec![5, 0, 8]);
    }

    #[test]
    fn local_pattern_matches_brute_force() {
        let tokens = [7, 0, 9, 9, 3, 1, 4];
        for r in 0..4 {
            let got = local_pattern_targets(&tokens, r, 10);
            for (i, g) in got.iter().enumerate() {
                let mut s = 0;
                for (j, t) in tokens.iter().enumerate() {
                    if (i as i64 - j as i64).abs() <= r as i64 {
                        s += t;
                    }
                }
                assert_eq!(*g, s % 10);
            }
        }
    }

    #[test]
    fn batches_are_seed_deterministic_and_padded() {
        let task = spec(TaskKind::LocalPattern);
        let a = generate_batch(&task, 5, &mut stream_rng(3, RngStream::TrainData)).unwrap();
        let b = generate_batch(&task, 5, &mut stream_rng(3, RngStream::TrainData)).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert!((3..=6).contains(&a.lengths[i]));
            assert_eq!(a.target(i), task.targets(a.sequence(i)));
            assert!(a.tokens[i][a.lengths[i]..].iter().all(|&t| t == 0));
        }
    }

    #[test]
    fn invalid_specs() {
        let mut t = spec(TaskKind::Copy);
        t.vocab_size = 3;
        assert!(t.validate().is_err());
        let mut t = spec(TaskKind::Copy);
        t.min_len = 7;
        assert!(t.validate().is_err());
        let t = spec(TaskKind::Copy);
        assert!(generate_batch(&t, 0, &mut stream_rng(0, RngStream::TrainData)).is_err());
        assert!(t.validate_for(12, 32).is_err());
        assert!(t.validate_for(10, 5).is_err());
    }
}
