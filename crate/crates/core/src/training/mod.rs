//! Loss-mask variants, masked cross-entropy, and the training loop.
//!
//! Three formulations share one next-token objective and differ only in
//! which positions the loss covers: `Lm` scores the whole sequence, `Clm`
//! only the answer tokens, `Clmq` the question and answer tokens.

mod lamb;

pub use lamb::{lamb_step, LambConfig, OptimizerState};

use crate::corpus::{Dialog, SlotRegistry, TrainingExample};
use crate::error::{Error, Result};
use crate::evaluation::joint_goal_accuracy;
use crate::inference::predict_corpus;
use crate::model::{backward, Batch, ModelParams, Scalar};
use crate::tokenizer::Tokenizer;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Which positions of `[C_t; s; v]` the loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMaskMode {
    /// Full-sequence language modeling.
    Lm,
    /// Conditional: slot-value tokens only.
    Clm,
    /// Conditional: slot-query and value tokens.
    Clmq,
}

impl std::fmt::Display for LossMaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMaskMode::Lm => "lm",
            LossMaskMode::Clm => "clm",
            LossMaskMode::Clmq => "clmq",
        })
    }
}

/// Target-indexed loss mask: `mask[j]` says token `j` is scored (predicted
/// from position `j - 1`).
pub fn make_loss_mask(example: &TrainingExample, mode: LossMaskMode) -> Vec<bool> {
    let n = example.token_ids.len();
    let from = match mode {
        LossMaskMode::Lm => 1,
        LossMaskMode::Clm => example.question_end,
        LossMaskMode::Clmq => example.context_end,
    };
    (0..n).map(|j| j >= from && j >= 1).collect()
}

/// Mean negative log-likelihood over masked rows: `logits[i]` is scored
/// against `targets[i]` wherever `mask[i]` holds.
pub fn masked_cross_entropy<T: Scalar>(
    logits: ArrayView2<'_, T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<T> {
    if targets.len() != logits.nrows() || mask.len() != logits.nrows() {
        return Err(Error::InvalidInput(
            "logits, targets, and mask lengths differ".into(),
        ));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for i in 0..logits.nrows() {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i);
        if targets[i] >= row.len() {
            return Err(Error::InvalidToken {
                id: targets[i] as u32,
                vocab_size: row.len(),
            });
        }
        let maxv = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &x in row {
            denom = denom + (x - maxv).exp();
        }
        total = total + (maxv + denom.ln() - row[targets[i]]);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(total / T::from_f64(count as f64))
}

/// Loss of one example given its per-position logits `(L, vocab)`: token `j`
/// under the target-indexed mask is scored with the logits at `j - 1`.
pub fn example_loss<T: Scalar>(
    logits: ArrayView2<'_, T>,
    token_ids: &[u32],
    target_mask: &[bool],
) -> Result<T> {
    let n = token_ids.len();
    let mut targets = vec![0usize; n.saturating_sub(1)];
    let mut mask = vec![false; n.saturating_sub(1)];
    for j in 1..n {
        targets[j - 1] = token_ids[j] as usize;
        mask[j - 1] = target_mask[j];
    }
    masked_cross_entropy(logits.slice(ndarray::s![..n - 1, ..]), &targets, &mask)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stop after this many evaluated epochs without improvement.
    pub patience: usize,
    pub lamb: LambConfig,
    /// Global-norm gradient clip.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Skip batches with non-finite gradients instead of aborting.
    pub skip_nonfinite: bool,
    /// Deterministic gradient reduction across batch shards.
    pub bit_exact: bool,
    /// Number of shards a batch is split into for parallel backward passes.
    pub shards: usize,
    /// Evaluate validation JGA every this many epochs.
    pub eval_every: usize,
    /// Stop as soon as validation JGA reaches this value.
    pub target_jga: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 16,
            max_epochs: 10,
            patience: 2,
            lamb: LambConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            skip_nonfinite: false,
            bit_exact: true,
            shards: 2,
            eval_every: 1,
            target_jga: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_jga: Option<f64>,
    pub lr: f64,
    pub mode: String,
}

pub struct TrainOutcome<T> {
    /// Parameters of the best validation epoch (final epoch when no
    /// validation set is given).
    pub params: ModelParams<T>,
    pub best_epoch: usize,
    pub best_val_jga: Option<f64>,
    pub log: Vec<LogRecord>,
    pub skipped_batches: usize,
}

struct ShardData {
    batch: Batch,
    mask: Array2<bool>,
    targets: Array2<usize>,
    masked: usize,
}

fn assemble_shard(
    examples: &[&TrainingExample],
    mode: LossMaskMode,
    pad_id: u32,
) -> Result<ShardData> {
    let sequences: Vec<Vec<u32>> = examples.iter().map(|e| e.token_ids.clone()).collect();
    let batch = Batch::from_sequences(&sequences, pad_id)?;
    let seq = batch.seq_len();
    let mut mask = Array2::from_elem((examples.len(), seq), false);
    let mut targets = Array2::zeros((examples.len(), seq));
    let mut masked = 0usize;
    for (b, example) in examples.iter().enumerate() {
        let tmask = make_loss_mask(example, mode);
        for j in 1..example.token_ids.len() {
            if tmask[j] {
                mask[[b, j - 1]] = true;
                targets[[b, j - 1]] = example.token_ids[j] as usize;
                masked += 1;
            }
        }
    }
    Ok(ShardData {
        batch,
        mask,
        targets,
        masked,
    })
}

/// Masked-CE loss and gradients for a batch of examples, sharded for
/// parallelism. The reduction is a weighted mean over masked positions, so
/// the result matches an unsharded pass up to float association; with
/// `bit_exact` the shard order is fixed and runs are reproducible.
pub fn batch_gradients<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[&TrainingExample],
    mode: LossMaskMode,
    pad_id: u32,
    shards: usize,
    bit_exact: bool,
) -> Result<(ModelParams<T>, T)> {
    let shards = shards.clamp(1, examples.len());
    let chunk = examples.len().div_ceil(shards);
    let parts: Vec<&[&TrainingExample]> = examples.chunks(chunk).collect();

    let outputs: Vec<Result<(ModelParams<T>, T, usize)>> = parts
        .par_iter()
        .map(|part| {
            let shard = assemble_shard(part, mode, pad_id)?;
            let (grads, loss) = backward(params, &shard.batch, &shard.mask, &shard.targets)?;
            Ok((grads, loss, shard.masked))
        })
        .collect();

    let mut collected = Vec::with_capacity(outputs.len());
    for out in outputs {
        collected.push(out?);
    }
    let total: usize = collected.iter().map(|(_, _, c)| c).sum();
    if total == 0 {
        return Err(Error::EmptyMask);
    }

    let mut grads = ModelParams::zeros(&params.config);
    let mut loss = T::zero();
    if bit_exact || collected.len() == 1 {
        for (mut g, l, c) in collected {
            let w = T::from_f64(c as f64 / total as f64);
            g.scale(w);
            grads.add_assign(&g);
            loss = loss + l * w;
        }
    } else {
        let (g, l) = collected
            .into_par_iter()
            .map(|(mut g, l, c)| {
                let w = T::from_f64(c as f64 / total as f64);
                g.scale(w);
                (g, l * w)
            })
            .reduce_with(|(mut ga, la), (gb, lb)| {
                ga.add_assign(&gb);
                (ga, la + lb)
            })
            .expect("at least one shard");
        grads = g;
        loss = l;
    }
    Ok((grads, loss))
}

fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, clip: f64) {
    let mut norm_sq = T::zero();
    for (_, t) in grads.tensors() {
        for &x in t.iter() {
            norm_sq = norm_sq + x * x;
        }
    }
    let norm = norm_sq.sqrt().to_f64().unwrap();
    if norm > clip {
        grads.scale(T::from_f64(clip / norm));
    }
}

/// Validation joint goal accuracy over each dialog's in-domain slots.
pub fn validation_jga<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    registry: &SlotRegistry,
    dialogs: &[Dialog],
    carryover: bool,
) -> Result<f64> {
    let (predicted, _) = predict_corpus(params, tokenizer, registry, dialogs, carryover)?;
    let mut filter = BTreeSet::new();
    for dialog in dialogs {
        for def in registry.slots_for_domains(&dialog.domains) {
            filter.insert(def.key());
        }
    }
    let outcome = joint_goal_accuracy(dialogs, &predicted, &filter)?;
    Ok(outcome.jga)
}

/// Train to convergence: shuffle per epoch, evaluate validation JGA, retain
/// the best checkpoint, stop at patience exhaustion or the epoch cap.
#[allow(clippy::too_many_arguments)]
pub fn train<T: Scalar>(
    params: ModelParams<T>,
    examples: &[TrainingExample],
    validation: &[Dialog],
    config: &TrainConfig,
    mode: LossMaskMode,
    tokenizer: &Tokenizer,
    registry: &SlotRegistry,
    carryover: bool,
) -> Result<TrainOutcome<T>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    if config.batch_size == 0 || config.max_epochs == 0 || config.learning_rate <= 0.0 {
        return Err(Error::InvalidInput(
            "batch_size, max_epochs, and learning_rate must be positive".into(),
        ));
    }

    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pad_id = tokenizer.pad_id();

    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_jga: Option<f64> = None;
    let mut evals_since_improve = 0usize;
    let mut global_step = 0u64;
    let mut skipped = 0usize;

    'epochs: for epoch in 1..=config.max_epochs {
        // shuffle, then group by length to limit padding, then shuffle the
        // batch order
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| examples[i].token_ids.len());
        let mut batches: Vec<Vec<usize>> = order
            .chunks(config.batch_size)
            .map(|c| c.to_vec())
            .collect();
        batches.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_weight = 0.0f64;
        for (bi, batch_idx) in batches.iter().enumerate() {
            let refs: Vec<&TrainingExample> = batch_idx.iter().map(|&i| &examples[i]).collect();
            let (mut grads, loss) = batch_gradients(
                &params,
                &refs,
                mode,
                pad_id,
                config.shards,
                config.bit_exact,
            )?;
            if !grads.all_finite() || !loss.is_finite() {
                if config.skip_nonfinite {
                    skipped += 1;
                    continue;
                }
                return Err(Error::NonFiniteGradient { batch: bi });
            }
            if let Some(clip) = config.clip_norm {
                clip_gradients(&mut grads, clip);
            }
            lamb_step(
                &mut params,
                &grads,
                &mut state,
                config.learning_rate,
                &config.lamb,
            )?;
            global_step += 1;
            let w = refs.len() as f64;
            epoch_loss += loss.to_f64().unwrap() * w;
            epoch_weight += w;
        }
        let mean_loss = epoch_loss / epoch_weight.max(1.0);

        let evaluate = !validation.is_empty()
            && (epoch % config.eval_every == 0 || epoch == config.max_epochs);
        let val_jga = if evaluate {
            Some(validation_jga(
                &params, tokenizer, registry, validation, carryover,
            )?)
        } else {
            None
        };

        log.push(LogRecord {
            epoch,
            step: global_step,
            loss: mean_loss,
            val_jga,
            lr: config.learning_rate,
            mode: mode.to_string(),
        });

        if let Some(jga) = val_jga {
            if best_jga.map_or(true, |b| jga > b) {
                best_jga = Some(jga);
                best_epoch = epoch;
                best_params = params.clone();
                evals_since_improve = 0;
            } else {
                evals_since_improve += 1;
                if evals_since_improve >= config.patience {
                    break 'epochs;
                }
            }
            if let Some(target) = config.target_jga {
                if jga >= target {
                    break 'epochs;
                }
            }
        }
    }

    if validation.is_empty() {
        best_params = params;
        best_epoch = log.last().map(|r| r.epoch).unwrap_or(0);
    }
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        best_val_jga: best_jga,
        log,
        skipped_batches: skipped,
    })
}
