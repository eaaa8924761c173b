//! Greedy slot-value generation and carry-over resolution.
//!
//! Each (user turn, slot) pair is an independent query: the dialog context
//! and the slot's question are serialized into a prompt, the model decodes
//! greedily until the end-of-answer token or the generation cap, and the
//! decoded string is normalized. A generated carry-over token resolves to
//! the slot's previous resolved value.

use crate::corpus::{
    normalize_value, serialize_prompt, BeliefState, Dialog, SlotDef, SlotKey, SlotRegistry, Turn,
    NONE_VALUE,
};
use crate::error::{Error, Result};
use crate::model::{DecodeState, ModelParams, Scalar};
use crate::tokenizer::{SpecialToken, Tokenizer, CARRYOVER_SURFACE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Hard cap on generated answer tokens.
pub const GENERATION_CAP: usize = 24;

/// One slot query's outcome, raw and resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialog_id: String,
    /// 0-based user-turn ordinal.
    pub turn_index: usize,
    pub slot: SlotKey,
    pub raw_generated: String,
    /// Never the carry-over surface string; "none" allowed.
    pub resolved_value: String,
    pub carried_over: bool,
}

/// Greedy argmax with ties broken by the lowest token id.
fn argmax<T: Scalar>(logits: &ndarray::Array1<T>) -> u32 {
    let mut best = 0usize;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Generate a value for one question over a dialog context. Returns the
/// normalized decoded string; the carry-over surface form passes through
/// untouched for the caller to resolve.
pub fn predict_slot<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    context: &[Turn],
    question: &str,
) -> Result<String> {
    let max_len = params.config.max_seq_len;
    if max_len <= GENERATION_CAP {
        return Err(Error::PromptTooLong {
            slot: question.to_string(),
        });
    }
    let prompt = serialize_prompt(tokenizer, context, question, max_len - GENERATION_CAP)?;

    let mut state = DecodeState::new(params);
    let mut logits = state.feed_prompt(params, &prompt.ids)?;

    let eoa = tokenizer.special_id(SpecialToken::Eoa);
    let mut generated: Vec<u32> = Vec::new();
    loop {
        let next = argmax(&logits);
        if next == eoa || generated.len() >= GENERATION_CAP {
            break;
        }
        generated.push(next);
        if generated.len() >= GENERATION_CAP {
            break;
        }
        logits = state.step(params, next)?;
    }

    let text = tokenizer.decode(&generated)?;
    Ok(normalize_value(&text))
}

/// Predictions for every (user turn, slot) pair of a dialog, with carry-over
/// resolution. Returns one belief state per user turn, the raw records, and
/// the count of carry-over tokens generated while resolution was disabled.
pub fn predict_belief_state<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    dialog: &Dialog,
    slots: &[&SlotDef],
    carryover_enabled: bool,
) -> Result<(Vec<BeliefState>, Vec<PredictionRecord>, usize)> {
    if slots.is_empty() {
        return Err(Error::InvalidInput("no slots to query".into()));
    }
    let turns = dialog.user_turn_count();

    // Queries are independent across slots; carry-over resolution is
    // sequential in turn order within each slot.
    let per_slot: Vec<Result<(Vec<PredictionRecord>, usize)>> = slots
        .par_iter()
        .map(|def| {
            let key = def.key();
            let mut records = Vec::with_capacity(turns);
            let mut anomalies = 0usize;
            let mut previous = NONE_VALUE.to_string();
            for t in 0..turns {
                let context = dialog.context_turns(t);
                let raw = predict_slot(params, tokenizer, context, &def.question).map_err(
                    |e| match e {
                        Error::PromptTooLong { .. } => Error::PromptTooLong {
                            slot: format!("{key} (dialog {}, turn {t})", dialog.id),
                        },
                        other => other,
                    },
                )?;
                let carried = raw == CARRYOVER_SURFACE;
                let resolved = if carried {
                    if carryover_enabled {
                        previous.clone()
                    } else {
                        anomalies += 1;
                        NONE_VALUE.to_string()
                    }
                } else {
                    raw.clone()
                };
                previous = resolved.clone();
                records.push(PredictionRecord {
                    dialog_id: dialog.id.clone(),
                    turn_index: t,
                    slot: key.clone(),
                    raw_generated: raw,
                    resolved_value: resolved,
                    carried_over: carried,
                });
            }
            Ok((records, anomalies))
        })
        .collect();

    let mut records = Vec::new();
    let mut anomalies = 0usize;
    for out in per_slot {
        let (slot_records, slot_anomalies) = out?;
        records.extend(slot_records);
        anomalies += slot_anomalies;
    }

    let mut states = vec![BeliefState::new(); turns];
    for record in &records {
        if record.resolved_value != NONE_VALUE {
            states[record.turn_index].set(record.slot.clone(), record.resolved_value.clone());
        }
    }
    Ok((states, records, anomalies))
}

/// Track every dialog of a corpus with its in-domain slots.
pub fn predict_corpus<T: Scalar>(
    params: &ModelParams<T>,
    tokenizer: &Tokenizer,
    registry: &SlotRegistry,
    dialogs: &[Dialog],
    carryover_enabled: bool,
) -> Result<(BTreeMap<String, Vec<BeliefState>>, Vec<PredictionRecord>)> {
    let mut states = BTreeMap::new();
    let mut records = Vec::new();
    for dialog in dialogs {
        let slots = registry.slots_for_domains(&dialog.domains);
        let (dialog_states, dialog_records, _) =
            predict_belief_state(params, tokenizer, dialog, &slots, carryover_enabled)?;
        states.insert(dialog.id.clone(), dialog_states);
        records.extend(dialog_records);
    }
    Ok((states, records))
}

/// Write prediction records as JSON lines — the contract between inference
/// and evaluation.
pub fn save_predictions(path: &std::path::Path, records: &[PredictionRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_predictions(path: &std::path::Path) -> Result<Vec<PredictionRecord>> {
    let data =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(line).map_err(|e| Error::CorpusFormat {
                locus: format!("{}:{}", path.display(), lineno + 1),
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// Assemble per-turn belief states from prediction records.
pub fn states_from_records(
    records: &[PredictionRecord],
) -> BTreeMap<String, Vec<BeliefState>> {
    let mut turn_counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let n = turn_counts.entry(r.dialog_id.clone()).or_insert(0);
        *n = (*n).max(r.turn_index + 1);
    }
    let mut states: BTreeMap<String, Vec<BeliefState>> = turn_counts
        .into_iter()
        .map(|(id, n)| (id, vec![BeliefState::new(); n]))
        .collect();
    for r in records {
        if r.resolved_value != NONE_VALUE {
            states.get_mut(&r.dialog_id).expect("inserted above")[r.turn_index]
                .set(r.slot.clone(), r.resolved_value.clone());
        }
    }
    states
}
