//! Shared helpers for integration tests: synthetic fixtures, an
//! independent forward-path loss, and the central-difference gradient
//! oracle.

#![allow(dead_code)]

use dstqa_core::corpus::{default_schema, generate_synthetic_corpus, Dialog, SlotRegistry};
use dstqa_core::model::{backward, forward, Batch, ModelConfig, ModelParams};
use dstqa_core::tokenizer::Tokenizer;
use dstqa_core::training::masked_cross_entropy;
use ndarray::Array2;
use std::collections::BTreeMap;

/// A small synthetic corpus plus its registry and a tokenizer trained on it.
pub fn synthetic_fixture(seed: u64, n_dialogs: usize) -> (Vec<Dialog>, SlotRegistry, Tokenizer) {
    let schema = default_schema();
    let dialogs = generate_synthetic_corpus(seed, &schema, n_dialogs).unwrap();
    let registry = schema.registry().unwrap();
    let tokenizer = train_tokenizer(&dialogs, &registry, 2000);
    (dialogs, registry, tokenizer)
}

pub fn train_tokenizer(
    dialogs: &[Dialog],
    registry: &SlotRegistry,
    vocab_size: usize,
) -> Tokenizer {
    let texts: Vec<String> = dialogs
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.text.clone()))
        .chain(registry.slots().flat_map(|s| {
            [s.question.clone(), s.tuple_synonym.clone()]
        }))
        .chain(std::iter::once("none".to_string()))
        .collect();
    Tokenizer::train(texts.iter(), vocab_size).unwrap()
}

/// Loss computed through the public forward pass and the reference masked
/// cross-entropy — an independent path from `backward`'s internal loss.
pub fn loss_via_forward(
    params: &ModelParams<f64>,
    batch: &Batch,
    mask: &Array2<bool>,
    targets: &Array2<usize>,
) -> f64 {
    let out = forward(params, batch).unwrap();
    let (bsz, seq, vocab) = out.logits.dim();
    let flat = out
        .logits
        .into_shape_with_order((bsz * seq, vocab))
        .unwrap();
    let flat_mask: Vec<bool> = mask.iter().copied().collect();
    let flat_targets: Vec<usize> = targets.iter().copied().collect();
    masked_cross_entropy(flat.view(), &flat_targets, &flat_mask).unwrap()
}

/// Max relative error of analytic gradients against central differences,
/// per named tensor, sampling `samples` entries spread across each tensor.
pub fn grad_check(
    params: &ModelParams<f64>,
    batch: &Batch,
    mask: &Array2<bool>,
    targets: &Array2<usize>,
    samples: usize,
    step: f64,
) -> BTreeMap<String, f64> {
    let (grads, loss) = backward(params, batch, mask, targets).unwrap();

    // the two loss paths must agree before the gradient comparison means
    // anything
    let reference = loss_via_forward(params, batch, mask, targets);
    assert!(
        (loss - reference).abs() <= 1e-9 * reference.abs().max(1.0),
        "backward loss {loss} disagrees with forward-path loss {reference}"
    );

    let mut report = BTreeMap::new();
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let (name, view) = {
            let tensors = params.tensors();
            let (n, v) = &tensors[ti];
            (n.clone(), v.len())
        };
        let count = samples.min(view);
        let stride = (view / count.max(1)).max(1);
        let mut max_rel: f64 = 0.0;
        for s in 0..count {
            let flat = (s * stride + s % stride.max(1)) % view;
            let mut plus = params.clone();
            perturb(&mut plus, ti, flat, step);
            let lp = loss_via_forward(&plus, batch, mask, targets);
            let mut minus = params.clone();
            perturb(&mut minus, ti, flat, -step);
            let lm = loss_via_forward(&minus, batch, mask, targets);
            let numeric = (lp - lm) / (2.0 * step);
            let analytic = {
                let tensors = grads.tensors();
                *tensors[ti].1.iter().nth(flat).unwrap()
            };
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
        report.insert(name, max_rel);
    }
    report
}

fn perturb(params: &mut ModelParams<f64>, tensor_index: usize, flat: usize, delta: f64) {
    let mut tensors = params.tensors_mut();
    let (_, view) = &mut tensors[tensor_index];
    *view.iter_mut().nth(flat).unwrap() += delta;
}

/// Random batch with segment structure mimicking serialized examples:
/// returns (batch, per-mode masks, targets).
pub fn random_structured_batch(
    config: &ModelConfig,
    seed: u64,
    batch_size: usize,
    max_len: usize,
) -> (Batch, BTreeMap<&'static str, Array2<bool>>, Array2<usize>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::new();
    let mut segments = Vec::new();
    for _ in 0..batch_size {
        let len = rng.random_range((max_len / 2).max(6)..=max_len);
        let context_end = rng.random_range(2..len - 3);
        let question_end = rng.random_range(context_end + 1..len - 1);
        let seq: Vec<u32> = (0..len)
            .map(|_| rng.random_range(0..config.vocab_size as u32))
            .collect();
        sequences.push(seq);
        segments.push((context_end, question_end, len));
    }
    let batch = Batch::from_sequences(&sequences, 0).unwrap();
    let seq_len = batch.seq_len();

    let mut targets = Array2::zeros((batch_size, seq_len));
    for b in 0..batch_size {
        for p in 0..segments[b].2 - 1 {
            targets[[b, p]] = sequences[b][p + 1] as usize;
        }
    }
    let mut masks = BTreeMap::new();
    for (mode, from_fn) in [
        ("lm", 0usize),
        ("clmq", 1usize),
        ("clm", 2usize),
    ] {
        let mut mask = Array2::from_elem((batch_size, seq_len), false);
        for b in 0..batch_size {
            let (context_end, question_end, len) = segments[b];
            let from = match from_fn {
                0 => 1,
                1 => context_end,
                _ => question_end,
            };
            // token j scored => model position j-1 carries the loss
            for j in from.max(1)..len {
                mask[[b, j - 1]] = true;
            }
        }
        masks.insert(mode, mask);
    }
    (batch, masks, targets)
}
