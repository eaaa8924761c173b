//! Joint goal accuracy and error analysis.
//!
//! All metrics run on exact integer counts over normalized strings; fractions
//! are computed only at report time. A turn is jointly correct when every
//! slot in the evaluated filter matches, with absent entries reading as
//! "none" on both sides.

use crate::corpus::{
    BeliefState, Dialog, SlotCategory, SlotKey, SlotRegistry, NONE_VALUE,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// How an incorrect slot prediction went wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorModality {
    /// Predicted a value for a slot whose gold is "none".
    Spurious,
    /// Predicted "none" for a slot with a gold value.
    Ignored,
    /// Predicted a wrong non-none value.
    WrongValue,
}

impl std::fmt::Display for ErrorModality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorModality::Spurious => "spurious",
            ErrorModality::Ignored => "ignored",
            ErrorModality::WrongValue => "wrong value",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerTurnJga {
    /// 1-based user-turn ordinal.
    pub turn: usize,
    pub correct: u64,
    pub total: u64,
    pub jga: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JgaOutcome {
    pub correct: u64,
    pub total: u64,
    pub jga: f64,
    pub per_turn: Vec<PerTurnJga>,
}

/// Modality x category cross-tab plus slot-transfer counting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub counts: BTreeMap<ErrorModality, BTreeMap<SlotCategory, u64>>,
    pub modality_totals: BTreeMap<ErrorModality, u64>,
    /// Wrong-value errors whose prediction equals another slot's gold value
    /// at the same turn.
    pub slot_transfer_count: u64,
    pub total_errors: u64,
}

/// Everything a run report carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub jga: f64,
    pub correct_turns: u64,
    pub total_turns: u64,
    pub per_turn_jga: Vec<PerTurnJga>,
    pub per_domain_jga: BTreeMap<String, f64>,
    pub errors: ErrorBreakdown,
}

fn turn_states<'a>(
    predicted: &'a BTreeMap<String, Vec<BeliefState>>,
    dialog: &Dialog,
) -> Result<&'a [BeliefState]> {
    let states = predicted
        .get(&dialog.id)
        .ok_or_else(|| Error::Alignment {
            dialog_id: dialog.id.clone(),
            message: "no predictions for dialog".into(),
        })?;
    if states.len() != dialog.user_turn_count() {
        return Err(Error::Alignment {
            dialog_id: dialog.id.clone(),
            message: format!(
                "{} predicted turns for {} user turns",
                states.len(),
                dialog.user_turn_count()
            ),
        });
    }
    Ok(states)
}

fn turn_correct(gold: &BeliefState, predicted: &BeliefState, filter: &BTreeSet<SlotKey>) -> bool {
    filter
        .iter()
        .all(|key| gold.value(key) == predicted.value(key))
}

/// Fraction of user turns with every filtered slot predicted exactly,
/// including slots whose correct value is "none", plus the per-turn curve.
pub fn joint_goal_accuracy(
    gold: &[Dialog],
    predicted: &BTreeMap<String, Vec<BeliefState>>,
    filter: &BTreeSet<SlotKey>,
) -> Result<JgaOutcome> {
    if filter.is_empty() {
        return Err(Error::UndefinedMetric("empty slot filter".into()));
    }
    if gold.is_empty() {
        return Err(Error::UndefinedMetric("no dialogs to evaluate".into()));
    }
    let mut correct = 0u64;
    let mut total = 0u64;
    let mut per_turn: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for dialog in gold {
        let states = turn_states(predicted, dialog)?;
        for (t, (gold_state, pred_state)) in
            dialog.gold_states.iter().zip(states.iter()).enumerate()
        {
            let ok = turn_correct(gold_state, pred_state, filter);
            let bucket = per_turn.entry(t + 1).or_insert((0, 0));
            bucket.1 += 1;
            total += 1;
            if ok {
                bucket.0 += 1;
                correct += 1;
            }
        }
    }
    Ok(JgaOutcome {
        correct,
        total,
        jga: correct as f64 / total as f64,
        per_turn: per_turn
            .into_iter()
            .map(|(turn, (c, n))| PerTurnJga {
                turn,
                correct: c,
                total: n,
                jga: c as f64 / n as f64,
            })
            .collect(),
    })
}

/// JGA restricted to the held-out domain's slots, over exactly the dialogs
/// that contain that domain.
pub fn zero_shot_jga(
    gold: &[Dialog],
    predicted: &BTreeMap<String, Vec<BeliefState>>,
    registry: &SlotRegistry,
    held_out_domain: &str,
) -> Result<JgaOutcome> {
    if !registry.contains_domain(held_out_domain) {
        return Err(Error::UnknownDomain(held_out_domain.to_string()));
    }
    let filter: BTreeSet<SlotKey> = registry
        .domain_slots(held_out_domain)
        .iter()
        .map(|d| d.key())
        .collect();
    let dialogs: Vec<Dialog> = gold
        .iter()
        .filter(|d| d.domains.contains(held_out_domain))
        .cloned()
        .collect();
    if dialogs.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no dialogs contain domain '{held_out_domain}'"
        )));
    }
    joint_goal_accuracy(&dialogs, predicted, &filter)
}

/// Classify every wrong slot-turn into exactly one modality, binned by slot
/// category, counting wrong-value errors that transferred another slot's
/// gold value.
pub fn classify_errors(
    gold: &[Dialog],
    predicted: &BTreeMap<String, Vec<BeliefState>>,
    registry: &SlotRegistry,
) -> Result<ErrorBreakdown> {
    let mut breakdown = ErrorBreakdown::default();
    for dialog in gold {
        let states = turn_states(predicted, dialog)?;
        let slots = registry.slots_for_domains(&dialog.domains);
        for (gold_state, pred_state) in dialog.gold_states.iter().zip(states.iter()) {
            for def in &slots {
                let key = def.key();
                let g = gold_state.value(&key);
                let p = pred_state.value(&key);
                if g == p {
                    continue;
                }
                let modality = match (g == NONE_VALUE, p == NONE_VALUE) {
                    (true, false) => ErrorModality::Spurious,
                    (false, true) => ErrorModality::Ignored,
                    (false, false) => ErrorModality::WrongValue,
                    (true, true) => unreachable!("equal strings handled above"),
                };
                *breakdown
                    .counts
                    .entry(modality)
                    .or_default()
                    .entry(def.category)
                    .or_insert(0) += 1;
                *breakdown.modality_totals.entry(modality).or_insert(0) += 1;
                breakdown.total_errors += 1;
                if modality == ErrorModality::WrongValue {
                    let transferred = gold_state
                        .entries()
                        .iter()
                        .any(|(other, value)| *other != key && value == p);
                    if transferred {
                        breakdown.slot_transfer_count += 1;
                    }
                }
            }
        }
    }
    Ok(breakdown)
}

/// The oracle upper bound for carry-over: wherever a slot's gold value is
/// unchanged from the previous turn, the prediction is replaced with the
/// already-adjusted previous prediction. First turns are untouched.
pub fn oracle_carryover_filter(
    gold: &Dialog,
    predicted: &[BeliefState],
    slots: &BTreeSet<SlotKey>,
) -> Result<Vec<BeliefState>> {
    if predicted.len() != dialog_turns(gold) {
        return Err(Error::Alignment {
            dialog_id: gold.id.clone(),
            message: format!(
                "{} predicted turns for {} user turns",
                predicted.len(),
                dialog_turns(gold)
            ),
        });
    }
    let mut adjusted: Vec<BeliefState> = Vec::with_capacity(predicted.len());
    for (t, pred) in predicted.iter().enumerate() {
        if t == 0 {
            adjusted.push(pred.clone());
            continue;
        }
        let mut state = BeliefState::new();
        for key in slots {
            let unchanged =
                gold.gold_states[t].value(key) == gold.gold_states[t - 1].value(key);
            let value = if unchanged {
                adjusted[t - 1].value(key).to_string()
            } else {
                pred.value(key).to_string()
            };
            state.set(key.clone(), value);
        }
        adjusted.push(state);
    }
    Ok(adjusted)
}

fn dialog_turns(dialog: &Dialog) -> usize {
    dialog.user_turn_count()
}

/// Apply the oracle to a whole corpus using each dialog's in-domain slots.
pub fn oracle_carryover_corpus(
    gold: &[Dialog],
    predicted: &BTreeMap<String, Vec<BeliefState>>,
    registry: &SlotRegistry,
) -> Result<BTreeMap<String, Vec<BeliefState>>> {
    let mut out = BTreeMap::new();
    for dialog in gold {
        let states = turn_states(predicted, dialog)?;
        let slots: BTreeSet<SlotKey> = registry
            .slots_for_domains(&dialog.domains)
            .iter()
            .map(|d| d.key())
            .collect();
        out.insert(
            dialog.id.clone(),
            oracle_carryover_filter(dialog, states, &slots)?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDelta {
    pub question_jga: f64,
    pub tuple_jga: f64,
    /// question minus tuple
    pub delta: f64,
}

/// Per-domain JGA for two prediction runs over the same eval set. No
/// directional claim is asserted; the report just pairs the numbers.
pub fn compare_query_styles(
    gold: &[Dialog],
    question_preds: &BTreeMap<String, Vec<BeliefState>>,
    tuple_preds: &BTreeMap<String, Vec<BeliefState>>,
    registry: &SlotRegistry,
) -> Result<BTreeMap<String, DomainDelta>> {
    let q_ids: BTreeSet<&String> = question_preds.keys().collect();
    let t_ids: BTreeSet<&String> = tuple_preds.keys().collect();
    if q_ids != t_ids {
        let missing: Vec<String> = q_ids
            .symmetric_difference(&t_ids)
            .map(|s| s.to_string())
            .collect();
        return Err(Error::Alignment {
            dialog_id: missing.join(", "),
            message: "prediction runs cover different dialog sets".into(),
        });
    }
    let mut domains = BTreeSet::new();
    for dialog in gold {
        domains.extend(dialog.domains.iter().cloned());
    }
    let mut report = BTreeMap::new();
    for domain in domains {
        let q = zero_shot_jga(gold, question_preds, registry, &domain)?;
        let t = zero_shot_jga(gold, tuple_preds, registry, &domain)?;
        report.insert(
            domain,
            DomainDelta {
                question_jga: q.jga,
                tuple_jga: t.jga,
                delta: q.jga - t.jga,
            },
        );
    }
    Ok(report)
}

/// Assemble the full report: overall and per-domain JGA plus the error
/// cross-tab.
pub fn build_report(
    gold: &[Dialog],
    predicted: &BTreeMap<String, Vec<BeliefState>>,
    registry: &SlotRegistry,
) -> Result<MetricsReport> {
    let mut filter = BTreeSet::new();
    let mut domains = BTreeSet::new();
    for dialog in gold {
        domains.extend(dialog.domains.iter().cloned());
        for def in registry.slots_for_domains(&dialog.domains) {
            filter.insert(def.key());
        }
    }
    let overall = joint_goal_accuracy(gold, predicted, &filter)?;
    let mut per_domain = BTreeMap::new();
    for domain in domains {
        per_domain.insert(
            domain.clone(),
            zero_shot_jga(gold, predicted, registry, &domain)?.jga,
        );
    }
    let errors = classify_errors(gold, predicted, registry)?;
    Ok(MetricsReport {
        jga: overall.jga,
        correct_turns: overall.correct,
        total_turns: overall.total,
        per_turn_jga: overall.per_turn,
        per_domain_jga: per_domain,
        errors,
    })
}

impl MetricsReport {
    /// Aligned-column rendering for terminals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "jga {:.4} ({}/{} turns)\n\n",
            self.jga, self.correct_turns, self.total_turns
        ));
        out.push_str("domain            jga\n");
        for (domain, jga) in &self.per_domain_jga {
            out.push_str(&format!("{domain:<16} {jga:>6.4}\n"));
        }
        out.push_str("\nturn   jga      n\n");
        for p in &self.per_turn_jga {
            out.push_str(&format!("{:<6} {:>6.4} {:>6}\n", p.turn, p.jga, p.total));
        }
        out.push_str("\nerror modality   open  numeric  temporal  categorical  total\n");
        for modality in [
            ErrorModality::Spurious,
            ErrorModality::Ignored,
            ErrorModality::WrongValue,
        ] {
            let row = self.errors.counts.get(&modality);
            let get = |c: SlotCategory| row.and_then(|r| r.get(&c)).copied().unwrap_or(0);
            out.push_str(&format!(
                "{:<16} {:>5} {:>8} {:>9} {:>12} {:>6}\n",
                modality.to_string(),
                get(SlotCategory::Open),
                get(SlotCategory::Numeric),
                get(SlotCategory::Temporal),
                get(SlotCategory::Categorical),
                self.errors.modality_totals.get(&modality).copied().unwrap_or(0),
            ));
        }
        out.push_str(&format!(
            "\nslot transfers: {} of {} errors\n",
            self.errors.slot_transfer_count, self.errors.total_errors
        ));
        out
    }

    /// Two-column plot-ready per-turn curve.
    pub fn per_turn_curve(&self) -> String {
        let mut out = String::from("turn\tjga\n");
        for p in &self.per_turn_jga {
            out.push_str(&format!("{}\t{:.6}\n", p.turn, p.jga));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SlotDef, Speaker, Turn};

    fn registry() -> SlotRegistry {
        SlotRegistry::new(vec![
            SlotDef {
                domain: "attraction".into(),
                name: "name".into(),
                question: "what is the name of the attraction?".into(),
                tuple_synonym: "attraction name".into(),
                category: SlotCategory::Open,
            },
            SlotDef {
                domain: "attraction".into(),
                name: "type".into(),
                question: "what type of attraction?".into(),
                tuple_synonym: "attraction type".into(),
                category: SlotCategory::Categorical,
            },
            SlotDef {
                domain: "hotel".into(),
                name: "internet".into(),
                question: "does the user need internet?".into(),
                tuple_synonym: "hotel internet".into(),
                category: SlotCategory::Categorical,
            },
        ])
        .unwrap()
    }

    fn dialog(id: &str, domains: &[&str], states: Vec<BeliefState>) -> Dialog {
        let turns = states
            .iter()
            .enumerate()
            .flat_map(|(i, _)| {
                vec![
                    Turn {
                        speaker: Speaker::System,
                        text: format!("sys {i}"),
                        turn_index: 2 * i,
                    },
                    Turn {
                        speaker: Speaker::User,
                        text: format!("usr {i}"),
                        turn_index: 2 * i + 1,
                    },
                ]
            })
            .collect();
        Dialog {
            id: id.into(),
            turns,
            gold_states: states,
            domains: domains.iter().map(|s| s.to_string()).collect(),
            sources: None,
        }
    }

    fn state(entries: &[(&str, &str, &str)]) -> BeliefState {
        entries
            .iter()
            .map(|(d, n, v)| (SlotKey::new(*d, *n), v.to_string()))
            .collect()
    }

    #[test]
    fn identical_predictions_score_one() {
        let d = dialog(
            "d1",
            &["attraction"],
            vec![state(&[("attraction", "type", "museum")])],
        );
        let mut predicted = BTreeMap::new();
        predicted.insert("d1".to_string(), d.gold_states.clone());
        let filter: BTreeSet<SlotKey> =
            registry().domain_slots("attraction").iter().map(|s| s.key()).collect();
        let out = joint_goal_accuracy(&[d], &predicted, &filter).unwrap();
        assert_eq!(out.jga, 1.0);
        assert_eq!((out.correct, out.total), (1, 1));
    }

    #[test]
    fn empty_filter_is_undefined() {
        let d = dialog("d1", &["attraction"], vec![BeliefState::new()]);
        let mut predicted = BTreeMap::new();
        predicted.insert("d1".to_string(), d.gold_states.clone());
        assert!(matches!(
            joint_goal_accuracy(&[d], &predicted, &BTreeSet::new()),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn misaligned_turns_name_the_dialog() {
        let d = dialog(
            "d9",
            &["attraction"],
            vec![BeliefState::new(), BeliefState::new()],
        );
        let mut predicted = BTreeMap::new();
        predicted.insert("d9".to_string(), vec![BeliefState::new()]);
        let filter: BTreeSet<SlotKey> = [SlotKey::new("attraction", "type")].into();
        match joint_goal_accuracy(&[d], &predicted, &filter).unwrap_err() {
            Error::Alignment { dialog_id, .. } => assert_eq!(dialog_id, "d9"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn error_modalities_match_reference_cases() {
        // gold none, predicted "cambridge punter" -> spurious
        // gold "yes", predicted none -> ignored
        // gold "museum", predicted "boat" -> wrong value
        let d = dialog(
            "d1",
            &["attraction", "hotel"],
            vec![state(&[
                ("hotel", "internet", "yes"),
                ("attraction", "type", "museum"),
            ])],
        );
        let mut predicted = BTreeMap::new();
        predicted.insert(
            "d1".to_string(),
            vec![state(&[
                ("attraction", "name", "cambridge punter"),
                ("attraction", "type", "boat"),
            ])],
        );
        let breakdown = classify_errors(&[d], &predicted, &registry()).unwrap();
        assert_eq!(breakdown.modality_totals[&ErrorModality::Spurious], 1);
        assert_eq!(breakdown.modality_totals[&ErrorModality::Ignored], 1);
        assert_eq!(breakdown.modality_totals[&ErrorModality::WrongValue], 1);
        assert_eq!(breakdown.total_errors, 3);
        assert_eq!(
            breakdown.counts[&ErrorModality::Spurious][&SlotCategory::Open],
            1
        );
        // totals are exclusive and exhaustive
        let sum: u64 = breakdown.modality_totals.values().sum();
        assert_eq!(sum, breakdown.total_errors);
    }

    #[test]
    fn slot_transfer_detection() {
        let d = dialog(
            "d1",
            &["attraction"],
            vec![state(&[
                ("attraction", "type", "museum"),
                ("attraction", "name", "clare hall"),
            ])],
        );
        let mut predicted = BTreeMap::new();
        // type predicted with the *name* slot's gold value
        predicted.insert(
            "d1".to_string(),
            vec![state(&[
                ("attraction", "type", "clare hall"),
                ("attraction", "name", "clare hall"),
            ])],
        );
        let breakdown = classify_errors(&[d], &predicted, &registry()).unwrap();
        assert_eq!(breakdown.slot_transfer_count, 1);
    }

    #[test]
    fn zero_shot_ignores_other_domain_corruption() {
        let d = dialog(
            "d1",
            &["attraction", "hotel"],
            vec![state(&[("attraction", "type", "museum")])],
        );
        let mut predicted = BTreeMap::new();
        // hotel slot corrupted; attraction slots correct
        predicted.insert(
            "d1".to_string(),
            vec![state(&[
                ("attraction", "type", "museum"),
                ("hotel", "internet", "garbage"),
            ])],
        );
        let out = zero_shot_jga(&[d.clone()], &predicted, &registry(), "attraction").unwrap();
        assert_eq!(out.jga, 1.0);
        let out = zero_shot_jga(&[d], &predicted, &registry(), "hotel").unwrap();
        assert_eq!(out.jga, 0.0);
    }

    #[test]
    fn zero_shot_without_eval_dialogs_is_undefined() {
        let d = dialog("d1", &["hotel"], vec![BeliefState::new()]);
        let mut predicted = BTreeMap::new();
        predicted.insert("d1".to_string(), d.gold_states.clone());
        assert!(matches!(
            zero_shot_jga(&[d], &predicted, &registry(), "attraction"),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn oracle_propagates_through_unchanged_gold() {
        // gold unchanged across 3 turns; prediction right at turn 0, wrong later
        let gold_value = state(&[("attraction", "type", "museum")]);
        let d = dialog(
            "d1",
            &["attraction"],
            vec![gold_value.clone(), gold_value.clone(), gold_value.clone()],
        );
        let predicted = vec![
            state(&[("attraction", "type", "museum")]),
            state(&[("attraction", "type", "boat")]),
            BeliefState::new(),
        ];
        let slots: BTreeSet<SlotKey> = [
            SlotKey::new("attraction", "type"),
            SlotKey::new("attraction", "name"),
        ]
        .into();
        let adjusted = oracle_carryover_filter(&d, &predicted, &slots).unwrap();
        for t in 0..3 {
            assert_eq!(adjusted[t].value(&SlotKey::new("attraction", "type")), "museum");
        }
    }

    #[test]
    fn oracle_leaves_changed_slots_alone() {
        let d = dialog(
            "d1",
            &["attraction"],
            vec![
                state(&[("attraction", "type", "museum")]),
                state(&[("attraction", "type", "park")]),
            ],
        );
        let predicted = vec![
            state(&[("attraction", "type", "museum")]),
            state(&[("attraction", "type", "cinema")]),
        ];
        let slots: BTreeSet<SlotKey> = [SlotKey::new("attraction", "type")].into();
        let adjusted = oracle_carryover_filter(&d, &predicted, &slots).unwrap();
        assert_eq!(adjusted[1].value(&SlotKey::new("attraction", "type")), "cinema");
    }

    #[test]
    fn single_turn_oracle_is_identity() {
        let d = dialog(
            "d1",
            &["attraction"],
            vec![state(&[("attraction", "type", "museum")])],
        );
        let predicted = vec![state(&[("attraction", "type", "boat")])];
        let slots: BTreeSet<SlotKey> = [SlotKey::new("attraction", "type")].into();
        let adjusted = oracle_carryover_filter(&d, &predicted, &slots).unwrap();
        assert_eq!(adjusted, predicted);
    }

    #[test]
    fn query_style_comparison_identity_and_alignment() {
        let d = dialog(
            "d1",
            &["attraction"],
            vec![state(&[("attraction", "type", "museum")])],
        );
        let mut preds = BTreeMap::new();
        preds.insert("d1".to_string(), d.gold_states.clone());
        let report =
            compare_query_styles(&[d.clone()], &preds, &preds, &registry()).unwrap();
        assert_eq!(report["attraction"].delta, 0.0);

        let mut other = BTreeMap::new();
        other.insert("d2".to_string(), d.gold_states.clone());
        assert!(matches!(
            compare_query_styles(&[d], &preds, &other, &registry()),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn jga_union_equals_turn_weighted_mean() {
        let d1 = dialog(
            "d1",
            &["attraction"],
            vec![state(&[("attraction", "type", "museum")])],
        );
        let d2 = dialog(
            "d2",
            &["attraction"],
            vec![BeliefState::new(), BeliefState::new()],
        );
        let mut predicted = BTreeMap::new();
        predicted.insert("d1".to_string(), vec![BeliefState::new()]); // wrong
        predicted.insert("d2".to_string(), d2.gold_states.clone()); // right
        let filter: BTreeSet<SlotKey> = [SlotKey::new("attraction", "type")].into();
        let a = joint_goal_accuracy(&[d1.clone()], &predicted, &filter).unwrap();
        let b = joint_goal_accuracy(&[d2.clone()], &predicted, &filter).unwrap();
        let union = joint_goal_accuracy(&[d1, d2], &predicted, &filter).unwrap();
        assert_eq!(union.correct, a.correct + b.correct);
        assert_eq!(union.total, a.total + b.total);
    }
}
