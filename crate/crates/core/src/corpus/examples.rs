//! Serialization of dialogs into training examples.
//!
//! An example is the token sequence
//! `[sys] y_1 [usr] u_1 ... [usr] u_t question: <q> answer: <v> [eoa]`
//! with recorded segment boundaries: `context_end` closes the dialog context,
//! `question_end` closes the query. Context is truncated from the left by
//! whole turns when the sequence would exceed the model's maximum length.

use super::{Dialog, SlotKey, SlotRegistry, Turn, NONE_VALUE};
use crate::error::{Error, Result};
use crate::tokenizer::{SpecialToken, Tokenizer, CARRYOVER_SURFACE};
use serde::{Deserialize, Serialize};

/// Whether targets are rewritten to the carry-over token when the gold value
/// is unchanged from the previous user turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleMode {
    Plain,
    Carryover,
}

/// Which slot representation the query segment carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryStyle {
    Question,
    Tuple,
}

/// Down-sampling of examples whose target is "none". The default keeps all
/// of them, matching the joint-goal-accuracy definition; a lower probability
/// trades class balance for coverage. Decisions are a pure function of
/// (seed, dialog, turn, slot), so example sets stay reproducible.
#[derive(Debug, Clone, Copy)]
pub struct NegativePolicy {
    pub keep_none_prob: f64,
    pub seed: u64,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        NegativePolicy {
            keep_none_prob: 1.0,
            seed: 0,
        }
    }
}

impl NegativePolicy {
    fn keeps(&self, dialog_id: &str, turn: usize, slot: &SlotKey) -> bool {
        if self.keep_none_prob >= 1.0 {
            return true;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed.rotate_left(17);
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(dialog_id.as_bytes());
        eat(&turn.to_le_bytes());
        eat(slot.domain.as_bytes());
        eat(slot.name.as_bytes());
        (h as f64 / u64::MAX as f64) < self.keep_none_prob
    }
}

/// One serialized training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialog_id: String,
    /// 0-based user-turn ordinal.
    pub turn_index: usize,
    pub slot: SlotKey,
    pub token_ids: Vec<u32>,
    /// Exclusive end of the dialog-context segment.
    pub context_end: usize,
    /// Exclusive end of the query segment.
    pub question_end: usize,
    pub target_value: String,
}

fn turn_block(tokenizer: &Tokenizer, turn: &Turn) -> Vec<u32> {
    let mut ids = vec![tokenizer.special_id(match turn.speaker {
        super::Speaker::User => SpecialToken::Usr,
        super::Speaker::System => SpecialToken::Sys,
    })];
    ids.extend(tokenizer.encode(&format!(" {}", turn.text)));
    ids
}

fn question_block(tokenizer: &Tokenizer, question: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.special_id(SpecialToken::Question)];
    ids.extend(tokenizer.encode(&format!(" {question}")));
    ids
}

fn answer_block(tokenizer: &Tokenizer, value: &str) -> Vec<u32> {
    let mut ids = vec![tokenizer.special_id(SpecialToken::Answer)];
    ids.extend(tokenizer.encode(&format!(" {value}")));
    ids.push(tokenizer.special_id(SpecialToken::Eoa));
    ids
}

/// Context turns serialized and left-truncated so that `tail_len` more tokens
/// still fit in `max_len`. Returns `None` when not even the latest turn fits.
fn truncated_context(
    tokenizer: &Tokenizer,
    turns: &[Turn],
    tail_len: usize,
    max_len: usize,
) -> Option<Vec<Vec<u32>>> {
    let mut blocks: Vec<Vec<u32>> = turns.iter().map(|t| turn_block(tokenizer, t)).collect();
    let mut total: usize = blocks.iter().map(Vec::len).sum::<usize>() + tail_len;
    let mut start = 0;
    while total > max_len && start + 1 < blocks.len() {
        total -= blocks[start].len();
        start += 1;
    }
    if total > max_len {
        return None;
    }
    Some(blocks.split_off(start))
}

/// A serialized inference prompt: `[context] question: <q> answer:`.
#[derive(Debug, Clone)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
    pub context_end: usize,
}

/// Build the generation prompt for a question over a dialog context,
/// left-truncating the context by whole turns to fit `max_len`.
pub fn serialize_prompt(
    tokenizer: &Tokenizer,
    turns: &[Turn],
    question: &str,
    max_len: usize,
) -> Result<PromptTokens> {
    let mut tail = question_block(tokenizer, question);
    tail.push(tokenizer.special_id(SpecialToken::Answer));
    let blocks = truncated_context(tokenizer, turns, tail.len(), max_len).ok_or_else(|| {
        Error::PromptTooLong {
            slot: question.to_string(),
        }
    })?;
    let context_end: usize = blocks.iter().map(Vec::len).sum();
    let mut ids: Vec<u32> = blocks.into_iter().flatten().collect();
    ids.extend(tail);
    Ok(PromptTokens { ids, context_end })
}

/// Serialize every (user turn, in-domain slot) pair of each dialog.
///
/// Targets are the gold value, "none" for absent slots (subject to the
/// negative policy), or the carry-over token when `mode` is `Carryover` and
/// the gold value — including "none" — is unchanged from the previous user
/// turn.
pub fn build_examples(
    dialogs: &[Dialog],
    registry: &SlotRegistry,
    tokenizer: &Tokenizer,
    mode: ExampleMode,
    query_style: QueryStyle,
    negative_policy: NegativePolicy,
    max_len: usize,
) -> Result<Vec<TrainingExample>> {
    let mut examples = Vec::new();
    for dialog in dialogs {
        let slots = registry.slots_for_domains(&dialog.domains);
        if slots.len() < dialog.domains.len() {
            // a domain with no registered slots means the registry and
            // corpus disagree
            let missing: Vec<String> = dialog
                .domains
                .iter()
                .filter(|d| !registry.contains_domain(d))
                .map(|d| format!("{d}-*"))
                .collect();
            if !missing.is_empty() {
                return Err(Error::RegistryMismatch { keys: missing });
            }
        }
        for t in 0..dialog.user_turn_count() {
            let context = dialog.context_turns(t);
            for def in &slots {
                let key = def.key();
                let gold = dialog.gold_states[t].value(&key).to_string();
                let target = if mode == ExampleMode::Carryover
                    && t > 0
                    && dialog.gold_states[t - 1].value(&key) == gold
                {
                    CARRYOVER_SURFACE.to_string()
                } else {
                    gold
                };
                if target == NONE_VALUE && !negative_policy.keeps(&dialog.id, t, &key) {
                    continue;
                }
                let question = match query_style {
                    QueryStyle::Question => &def.question,
                    QueryStyle::Tuple => &def.tuple_synonym,
                };
                let q_ids = question_block(tokenizer, question);
                let a_ids = answer_block(tokenizer, &target);
                let tail_len = q_ids.len() + a_ids.len();
                if tail_len >= max_len {
                    return Err(Error::ExampleTooLong {
                        slot: key.to_string(),
                    });
                }
                let blocks = truncated_context(tokenizer, context, tail_len, max_len)
                    .ok_or_else(|| Error::ExampleTooLong {
                        slot: key.to_string(),
                    })?;
                let context_end: usize = blocks.iter().map(Vec::len).sum();
                let mut token_ids: Vec<u32> = blocks.into_iter().flatten().collect();
                token_ids.extend(&q_ids);
                let question_end = context_end + q_ids.len();
                token_ids.extend(&a_ids);
                debug_assert!(0 < context_end && context_end < question_end);
                debug_assert!(question_end < token_ids.len());
                examples.push(TrainingExample {
                    dialog_id: dialog.id.clone(),
                    turn_index: t,
                    slot: key,
                    token_ids,
                    context_end,
                    question_end,
                    target_value: target,
                });
            }
        }
    }
    Ok(examples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BeliefState, SlotCategory, SlotDef, Speaker};
    use std::collections::BTreeSet;

    fn tokenizer() -> Tokenizer {
        Tokenizer::train(
            [
                "i want a cheap restaurant",
                "what is the price range? price range name of the restaurant",
                "hello how can i help you today",
                "none",
            ],
            256 + 7 + 120,
        )
        .unwrap()
    }

    fn registry() -> SlotRegistry {
        SlotRegistry::new(vec![
            SlotDef {
                domain: "restaurant".into(),
                name: "pricerange".into(),
                question: "what is the price range?".into(),
                tuple_synonym: "price range".into(),
                category: SlotCategory::Categorical,
            },
            SlotDef {
                domain: "restaurant".into(),
                name: "name".into(),
                question: "what is the name of the restaurant?".into(),
                tuple_synonym: "restaurant name".into(),
                category: SlotCategory::Open,
            },
        ])
        .unwrap()
    }

    fn one_turn_dialog() -> Dialog {
        let mut state = BeliefState::new();
        state.set(SlotKey::new("restaurant", "pricerange"), "cheap");
        Dialog {
            id: "d1".into(),
            turns: vec![Turn {
                speaker: Speaker::User,
                text: "i want a cheap restaurant".into(),
                turn_index: 0,
            }],
            gold_states: vec![state],
            domains: BTreeSet::from(["restaurant".to_string()]),
            sources: None,
        }
    }

    fn two_turn_dialog() -> Dialog {
        let mut state = BeliefState::new();
        state.set(SlotKey::new("restaurant", "pricerange"), "cheap");
        Dialog {
            id: "d2".into(),
            turns: vec![
                Turn {
                    speaker: Speaker::User,
                    text: "i want a cheap restaurant".into(),
                    turn_index: 0,
                },
                Turn {
                    speaker: Speaker::System,
                    text: "what is the price range?".into(),
                    turn_index: 1,
                },
                Turn {
                    speaker: Speaker::User,
                    text: "hello how can i help you today".into(),
                    turn_index: 2,
                },
            ],
            gold_states: vec![state.clone(), state],
            domains: BTreeSet::from(["restaurant".to_string()]),
            sources: None,
        }
    }

    #[test]
    fn direct_serialization_and_segments() {
        let tok = tokenizer();
        let examples = build_examples(
            &[one_turn_dialog()],
            &registry(),
            &tok,
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let price = examples
            .iter()
            .find(|e| e.slot.name == "pricerange")
            .unwrap();
        assert_eq!(price.target_value, "cheap");
        let answer = tok.decode(&price.token_ids[price.question_end..]).unwrap();
        assert_eq!(answer, "answer: cheap[eoa]");
        let question = tok
            .decode(&price.token_ids[price.context_end..price.question_end])
            .unwrap();
        assert_eq!(question, "question: what is the price range?");
        let context = tok.decode(&price.token_ids[..price.context_end]).unwrap();
        assert_eq!(context, "[usr] i want a cheap restaurant");
    }

    #[test]
    fn absent_slot_targets_none() {
        let examples = build_examples(
            &[one_turn_dialog()],
            &registry(),
            &tokenizer(),
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let name = examples.iter().find(|e| e.slot.name == "name").unwrap();
        assert_eq!(name.target_value, "none");
    }

    #[test]
    fn carryover_rewrites_unchanged_values_only() {
        let tok = tokenizer();
        let examples = build_examples(
            &[two_turn_dialog()],
            &registry(),
            &tok,
            ExampleMode::Carryover,
            QueryStyle::Question,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let by_turn: Vec<&TrainingExample> = examples
            .iter()
            .filter(|e| e.slot.name == "pricerange")
            .collect();
        assert_eq!(by_turn[0].target_value, "cheap");
        assert_eq!(by_turn[1].target_value, CARRYOVER_SURFACE);
        // unchanged "none" also carries over
        let name_turn2 = examples
            .iter()
            .find(|e| e.slot.name == "name" && e.turn_index == 1)
            .unwrap();
        assert_eq!(name_turn2.target_value, CARRYOVER_SURFACE);
        let answer = tok
            .decode(&by_turn[1].token_ids[by_turn[1].question_end..])
            .unwrap();
        assert_eq!(answer, "answer: [carryover][eoa]");
    }

    #[test]
    fn tuple_style_uses_synonym() {
        let tok = tokenizer();
        let examples = build_examples(
            &[one_turn_dialog()],
            &registry(),
            &tok,
            ExampleMode::Plain,
            QueryStyle::Tuple,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let price = examples
            .iter()
            .find(|e| e.slot.name == "pricerange")
            .unwrap();
        let question = tok
            .decode(&price.token_ids[price.context_end..price.question_end])
            .unwrap();
        assert_eq!(question, "question: price range");
    }

    #[test]
    fn truncation_drops_whole_oldest_turns() {
        let tok = tokenizer();
        let dialog = two_turn_dialog();
        let full = build_examples(
            &[dialog.clone()],
            &registry(),
            &tok,
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let longest = full
            .iter()
            .filter(|e| e.turn_index == 1 && e.slot.name == "pricerange")
            .next()
            .unwrap();
        let tight = longest.token_ids.len() - 2;
        let truncated = build_examples(
            &[dialog],
            &registry(),
            &tok,
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            tight,
        )
        .unwrap();
        let same = truncated
            .iter()
            .find(|e| e.turn_index == 1 && e.slot.name == "pricerange")
            .unwrap();
        assert!(same.token_ids.len() <= tight);
        let context = tok.decode(&same.token_ids[..same.context_end]).unwrap();
        // oldest turn dropped whole; context starts at the next turn boundary
        assert!(context.starts_with("[sys]"), "{context}");
    }

    #[test]
    fn oversized_question_plus_answer_errors_with_slot() {
        let err = build_examples(
            &[one_turn_dialog()],
            &registry(),
            &tokenizer(),
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ExampleTooLong { .. }));
    }

    #[test]
    fn negative_policy_zero_drops_all_none_examples() {
        let examples = build_examples(
            &[one_turn_dialog()],
            &registry(),
            &tokenizer(),
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy {
                keep_none_prob: 0.0,
                seed: 1,
            },
            256,
        )
        .unwrap();
        assert!(examples.iter().all(|e| e.target_value != "none"));
        assert_eq!(examples.len(), 1);
    }

    #[test]
    fn prompt_matches_example_prefix() {
        let tok = tokenizer();
        let dialog = one_turn_dialog();
        let reg = registry();
        let examples = build_examples(
            &[dialog.clone()],
            &reg,
            &tok,
            ExampleMode::Plain,
            QueryStyle::Question,
            NegativePolicy::default(),
            256,
        )
        .unwrap();
        let price = examples
            .iter()
            .find(|e| e.slot.name == "pricerange")
            .unwrap();
        let prompt = serialize_prompt(
            &tok,
            dialog.context_turns(0),
            "what is the price range?",
            256,
        )
        .unwrap();
        // prompt = example up to and including the answer-prefix token
        assert_eq!(prompt.ids[..], price.token_ids[..price.question_end + 1]);
        assert_eq!(prompt.context_end, price.context_end);
    }
}
