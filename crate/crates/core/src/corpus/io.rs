//! Corpus and registry file formats.
//!
//! A corpus file is UTF-8 JSON-lines, one dialog per line:
//!
//! ```json
//! {"id":"d1","turns":[{"speaker":"system","text":"hello"},{"speaker":"user","text":"hi"}],
//!  "states":[{"turn":0,"entries":{"hotel-area":"north"}}],
//!  "sources":[{"turn":0,"entries":{"hotel-area":"user"}}]}
//! ```
//!
//! `states[i].turn` is the 0-based user-turn ordinal. The registry file is a
//! JSON list of slot definitions.

use super::{
    normalize_value, BeliefState, CorpusStats, Dialog, SlotDef, SlotKey, SlotRegistry, SlotSource,
    Speaker, Turn,
};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    turn: usize,
    entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct SourceRecord {
    turn: usize,
    entries: BTreeMap<String, SlotSource>,
}

#[derive(Serialize, Deserialize)]
struct DialogRecord {
    id: String,
    turns: Vec<TurnRecord>,
    states: Vec<StateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sources: Option<Vec<SourceRecord>>,
}

/// Load a corpus file, normalizing all text and validating slot keys against
/// the registry. Dialogs touching a domain absent from the registry are
/// dropped (counted in the returned stats); a registered domain with an
/// unknown slot name is an error.
pub fn load_corpus(path: &Path, registry: &SlotRegistry) -> Result<(Vec<Dialog>, CorpusStats)> {
    let data =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut dialogs = Vec::new();
    let mut dropped = 0usize;

    for (lineno, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogRecord =
            serde_json::from_str(line).map_err(|e| Error::CorpusFormat {
                locus: format!("{}:{}", path.display(), lineno + 1),
                message: e.to_string(),
            })?;
        match dialog_from_record(record, registry) {
            Ok(Some(dialog)) => dialogs.push(dialog),
            Ok(None) => dropped += 1,
            Err(Error::CorpusFormat { locus, message }) => {
                return Err(Error::CorpusFormat {
                    locus: format!("{}:{} ({locus})", path.display(), lineno + 1),
                    message,
                })
            }
            Err(e) => return Err(e),
        }
    }

    let stats = CorpusStats::compute("all", &dialogs, dropped, registry);
    Ok((dialogs, stats))
}

fn dialog_from_record(record: DialogRecord, registry: &SlotRegistry) -> Result<Option<Dialog>> {
    let mut turns = Vec::new();
    for (i, t) in record.turns.into_iter().enumerate() {
        let text = normalize_value(&t.text);
        if text == super::NONE_VALUE && t.text.trim().is_empty() {
            return Err(Error::CorpusFormat {
                locus: record.id.clone(),
                message: format!("turn {i} is empty"),
            });
        }
        turns.push(Turn {
            speaker: t.speaker,
            text,
            turn_index: i,
        });
    }

    let user_turns = turns.iter().filter(|t| t.speaker == Speaker::User).count();
    let mut gold_states = vec![BeliefState::new(); user_turns];
    let mut domains = BTreeSet::new();
    let mut unknown_keys = Vec::new();

    for state in record.states {
        if state.turn >= user_turns {
            return Err(Error::CorpusFormat {
                locus: record.id.clone(),
                message: format!("state turn {} out of range", state.turn),
            });
        }
        for (raw_key, value) in state.entries {
            let key = SlotKey::parse(&raw_key).map_err(|_| Error::CorpusFormat {
                locus: record.id.clone(),
                message: format!("bad slot key '{raw_key}'"),
            })?;
            domains.insert(key.domain.clone());
            if !registry.contains(&key) && registry.contains_domain(&key.domain) {
                unknown_keys.push(key.to_string());
                continue;
            }
            gold_states[state.turn].set(key, value);
        }
    }

    // A dialog whose states reference an unregistered domain mirrors the
    // convention of removing training-only domains wholesale.
    if domains.iter().any(|d| !registry.contains_domain(d)) {
        return Ok(None);
    }
    if !unknown_keys.is_empty() {
        unknown_keys.sort();
        unknown_keys.dedup();
        return Err(Error::RegistryMismatch { keys: unknown_keys });
    }

    let sources = match record.sources {
        None => None,
        Some(records) => {
            let mut per_turn = vec![BTreeMap::new(); user_turns];
            for s in records {
                if s.turn >= user_turns {
                    return Err(Error::CorpusFormat {
                        locus: record.id.clone(),
                        message: format!("source turn {} out of range", s.turn),
                    });
                }
                for (raw_key, source) in s.entries {
                    let key = SlotKey::parse(&raw_key)?;
                    per_turn[s.turn].insert(key, source);
                }
            }
            Some(per_turn)
        }
    };

    let dialog = Dialog {
        id: record.id,
        turns,
        gold_states,
        domains,
        sources,
    };
    dialog.validate()?;
    Ok(Some(dialog))
}

/// Serialize dialogs to the JSON-lines corpus format. Inverse of
/// [`load_corpus`] on normalized corpora.
pub fn save_corpus(path: &Path, dialogs: &[Dialog]) -> Result<()> {
    let mut out = String::new();
    for dialog in dialogs {
        let record = DialogRecord {
            id: dialog.id.clone(),
            turns: dialog
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
            states: dialog
                .gold_states
                .iter()
                .enumerate()
                .map(|(turn, state)| StateRecord {
                    turn,
                    entries: state
                        .entries()
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.clone()))
                        .collect(),
                })
                .collect(),
            sources: dialog.sources.as_ref().map(|per_turn| {
                per_turn
                    .iter()
                    .enumerate()
                    .map(|(turn, entries)| SourceRecord {
                        turn,
                        entries: entries
                            .iter()
                            .map(|(k, v)| (k.to_string(), *v))
                            .collect(),
                    })
                    .collect()
            }),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a registry file: a JSON list of slot definitions.
pub fn load_registry(path: &Path) -> Result<SlotRegistry> {
    let data =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut defs: Vec<SlotDef> = serde_json::from_str(&data)?;
    for def in &mut defs {
        def.question = normalize_value(&def.question);
        def.tuple_synonym = normalize_value(&def.tuple_synonym);
    }
    SlotRegistry::new(defs)
}

pub fn save_registry(path: &Path, registry: &SlotRegistry) -> Result<()> {
    let defs: Vec<&SlotDef> = registry.slots().collect();
    let data = serde_json::to_string_pretty(&defs)?;
    std::fs::write(path, data).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotCategory;
    use tempfile::tempdir;

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
                domain: "hotel".into(),
                name: "area".into(),
                question: "which area?".into(),
                tuple_synonym: "area".into(),
                category: SlotCategory::Categorical,
            },
        ])
        .unwrap()
    }

    const TWO_DIALOGS: &str = concat!(
        r#"{"id":"d1","turns":[{"speaker":"system","text":"Hello"},{"speaker":"user","text":"I want a CHEAP restaurant"}],"states":[{"turn":0,"entries":{"restaurant-pricerange":"Cheap"}}]}"#,
        "\n",
        r#"{"id":"d2","turns":[{"speaker":"system","text":"hi"},{"speaker":"user","text":"hotel in the north"}],"states":[{"turn":0,"entries":{"hotel-area":"north"}}]}"#,
        "\n",
    );

    #[test]
    fn loads_well_formed_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, TWO_DIALOGS).unwrap();
        let (dialogs, stats) = load_corpus(&path, &registry()).unwrap();
        assert_eq!(dialogs.len(), 2);
        assert_eq!(stats.n_dialogs["all"], 2);
        // normalization applied on load
        assert_eq!(dialogs[0].turns[1].text, "i want a cheap restaurant");
        assert_eq!(
            dialogs[0].gold_states[0].value(&SlotKey::new("restaurant", "pricerange")),
            "cheap"
        );
    }

    #[test]
    fn unregistered_domain_drops_dialog() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let line = r#"{"id":"d3","turns":[{"speaker":"user","text":"book a flight"}],"states":[{"turn":0,"entries":{"flight-destination":"paris"}}]}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let (dialogs, stats) = load_corpus(&path, &registry()).unwrap();
        assert!(dialogs.is_empty());
        assert_eq!(stats.n_dropped, 1);
    }

    #[test]
    fn unknown_slot_in_registered_domain_is_an_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let line = r#"{"id":"d4","turns":[{"speaker":"user","text":"hotel with parking"}],"states":[{"turn":0,"entries":{"hotel-parking":"yes"}}]}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_corpus(&path, &registry()).unwrap_err();
        match err {
            Error::RegistryMismatch { keys } => assert_eq!(keys, vec!["hotel-parking"]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_failure_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        let err = load_corpus(&path, &registry()).unwrap_err();
        match err {
            Error::CorpusFormat { locus, .. } => assert!(locus.ends_with(":1"), "{locus}"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        std::fs::write(&path, TWO_DIALOGS).unwrap();
        let (dialogs, _) = load_corpus(&path, &registry()).unwrap();

        let path2 = dir.path().join("copy.jsonl");
        save_corpus(&path2, &dialogs).unwrap();
        let (reloaded, _) = load_corpus(&path2, &registry()).unwrap();
        assert_eq!(reloaded, dialogs);
    }

    #[test]
    fn registry_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("registry.json");
        save_registry(&path, &registry()).unwrap();
        let loaded = load_registry(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded.contains(&SlotKey::new("hotel", "area")));
    }
}
