//! Training and evaluation loops.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::model::{Encoder, ForwardOptions};
use crate::optim::{AdamState, WarmupSchedule};
use crate::rng::{stream_rng, RngState, RngStream};
use crate::tasks::{generate_batch, Batch, TaskSpec};
use crate::tensor::{Tape, Var};

/// Largest n reported by [`evaluate`].
pub const MAX_NGRAM: usize = 8;

fn default_batch_size() -> usize {
    32
}

fn default_warmup() -> usize {
    400
}

fn default_lr_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Multiplier on the warmup schedule.
    #[serde(default = "default_lr_scale")]
    pub lr_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            warmup: default_warmup(),
            lr_scale: default_lr_scale(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("training.batch_size must be at least 1"));
        }
        if self.warmup == 0 {
            return Err(config("training.warmup must be at least 1"));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale > 0.0) {
            return Err(config("training.lr_scale must be positive"));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits: [I x V]` against the first `length` targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], length: usize) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    let masked: Vec<Option<usize>> = (0..rows)
        .map(|i| if i < length { targets.get(i).copied() } else { None })
        .collect();
    Ok(tape.cross_entropy(logits, &masked)?)
}

/// Forward pass and mean token cross-entropy over a batch.
pub fn batch_loss(encoder: &Encoder, tape: &mut Tape, batch: &Batch, trainable: bool) -> Result<(Var, BTreeMap<String, Var>)> {
    let bound = encoder.bind(tape, trainable);
    let options = ForwardOptions {
        collect_traces: false,
        ..Default::default()
    };
    let out = encoder.forward(tape, &bound, &batch.sequences(), &options)?;
    let targets: Vec<Option<usize>> = batch.packed_targets().into_iter().map(Some).collect();
    let loss = tape.cross_entropy(out.logits, &targets)?;
    let vars = bound.iter().map(|(k, v)| (k.clone(), *v)).collect();
    Ok((loss, vars))
}

/// Stateful training loop over freshly generated batches.
pub struct Trainer {
    encoder: Encoder,
    task: TaskSpec,
    training: TrainingConfig,
    schedule: WarmupSchedule,
    adam: AdamState,
    data_seed: u64,
    rng: ChaCha20Rng,
    losses: Vec<f64>,
}

impl Trainer {
    /// Batches are drawn from the `TrainData` stream of the encoder's seed.
    pub fn new(encoder: Encoder, task: TaskSpec, training: TrainingConfig) -> Result<Self> {
        training.validate()?;
        task.validate_for(encoder.config().vocab_size, encoder.config().max_len)?;
        let data_seed = encoder.config().seed;
        let mut schedule = WarmupSchedule::new(encoder.config().d_model, training.warmup);
        schedule.scale = training.lr_scale;
        Ok(Self {
            encoder,
            task,
            training,
            schedule,
            adam: AdamState::new(),
            data_seed,
            rng: stream_rng(data_seed, RngStream::TrainData),
            losses: Vec::new(),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn into_encoder(self) -> Encoder {
        self.encoder
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn steps_done(&self) -> usize {
        self.losses.len()
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(self.data_seed, &self.rng)
    }

    /// One optimizer step; returns the batch loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.losses.len() + 1;
        let batch = generate_batch(&self.task, self.training.batch_size, &mut self.rng)?;
        let mut tape = Tape::new();
        let (loss, vars) = batch_loss(&self.encoder, &mut tape, &batch, true)?;
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        let mut norm_sq = 0.0;
        for (name, var) in vars {
            if let Some(g) = tape.grad(var) {
                norm_sq += g.iter().map(|x| x * x).sum::<f64>();
                grads.insert(name, g.to_vec());
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "gradient norm is not finite".into(),
            });
        }
        let lr = self.schedule.at(step);
        self.adam.step(self.encoder.params_mut(), &grads, lr).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { step, reason },
            other => other,
        })?;
        self.losses.push(value);
        Ok(value)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub losses: Vec<f64>,
    pub rng_state: RngState,
}

pub fn train(encoder: Encoder, task: &TaskSpec, training: &TrainingConfig, steps: usize) -> Result<TrainOutcome> {
    if steps == 0 {
        return Err(config("steps must be at least 1"));
    }
    let mut trainer = Trainer::new(encoder, task.clone(), training.clone())?;
    trainer.run(steps)?;
    let rng_state = trainer.rng_state();
    let losses = trainer.losses.clone();
    Ok(TrainOutcome {
        encoder: trainer.into_encoder(),
        losses,
        rng_state,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    /// `(n, rate)` for n = 1..=MAX_NGRAM.
    pub ngram: Vec<(usize, f64)>,
    pub positions: usize,
    pub sequences: usize,
}

/// Fraction of length-`n` spans that are entirely correct, for n = 1..=max_n.
///
/// Each sequence contributes its own span fraction, weighted by its length;
/// a sequence shorter than `n` counts as a single span covering all of it.
/// With this weighting the n = 1 rate is the token accuracy and the rates are
/// non-increasing in `n` even when sequence lengths differ.
pub fn ngram_rates(correct: &[Vec<bool>], max_n: usize) -> Vec<f64> {
    let total: usize = correct.iter().map(Vec::len).sum();
    (1..=max_n)
        .map(|n| {
            if total == 0 {
                return 0.0;
            }
            let mut acc = 0.0;
            for seq in correct.iter().filter(|s| !s.is_empty()) {
                let len = seq.len();
                let frac = if len < n {
                    if seq.iter().all(|&c| c) { 1.0 } else { 0.0 }
                } else {
                    let spans = len - n + 1;
                    let good = (0..spans).filter(|&s| seq[s..s + n].iter().all(|&c| c)).count();
                    good as f64 / spans as f64
                };
                acc += frac * len as f64;
            }
            acc / total as f64
        })
        .collect()
}

/// Per-token correctness of argmax predictions (ties go to the lowest class).
pub fn predictions_correct(encoder: &Encoder, batch: &Batch) -> Result<Vec<Vec<bool>>> {
    let mut tape = Tape::new();
    let bound = encoder.bind(&mut tape, false);
    let options = ForwardOptions {
        collect_traces: false,
        ..Default::default()
    };
    let out = encoder.forward(&mut tape, &bound, &batch.sequences(), &options)?;
    let logits = tape.value(out.logits);
    Ok(out
        .spans
        .iter()
        .enumerate()
        .map(|(b, span)| {
            (0..span.len)
                .map(|i| argmax(logits.row(span.start + i)) == batch.target(b)[i])
                .collect()
        })
        .collect())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn report_from_correct(correct: &[Vec<bool>]) -> EvalReport {
    let positions: usize = correct.iter().map(Vec::len).sum();
    let right = correct.iter().flatten().filter(|&&c| c).count();
    let rates = ngram_rates(correct, MAX_NGRAM);
    EvalReport {
        token_accuracy: if positions == 0 { 0.0 } else { right as f64 / positions as f64 },
        ngram: rates.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect(),
        positions,
        sequences: correct.len(),
    }
}

/// Accuracy over `num_batches` batches drawn from the `EvalData` stream of the task seed.
pub fn evaluate(encoder: &Encoder, task: &TaskSpec, num_batches: usize, batch_size: usize) -> Result<EvalReport> {
    task.validate_for(encoder.config().vocab_size, encoder.config().max_len)?;
    let mut rng = stream_rng(task.seed, RngStream::EvalData);
    let mut correct = Vec::new();
    for _ in 0..num_batches {
        let batch = generate_batch(task, batch_size, &mut rng)?;
        correct.extend(predictions_correct(encoder, &batch)?);
    }
    Ok(report_from_correct(&correct))
}
