//! Dialog and belief-state data model.
//!
//! Dialogs carry speaker-tagged turns and one gold belief state per user
//! turn. Slots are identified by `(domain, name)` and described in a
//! [`SlotRegistry`] that holds the natural-language question and the short
//! tuple synonym used as the two query styles.

mod examples;
mod io;
mod split;
mod synthetic;

pub use examples::{
    build_examples, serialize_prompt, ExampleMode, NegativePolicy, PromptTokens, QueryStyle,
    TrainingExample,
};
pub use io::{load_corpus, load_registry, save_corpus, save_registry};
pub use split::{leave_one_out_split, mix_datasets};
pub use synthetic::{default_schema, generate_synthetic_corpus, SyntheticSchema};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Canonical string stored and predicted for an absent slot.
pub const NONE_VALUE: &str = "none";

/// Value type of a slot, used for error-analysis breakdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotCategory {
    Open,
    Numeric,
    Temporal,
    Categorical,
}

impl SlotCategory {
    pub const ALL: [SlotCategory; 4] = [
        SlotCategory::Open,
        SlotCategory::Numeric,
        SlotCategory::Temporal,
        SlotCategory::Categorical,
    ];
}

impl fmt::Display for SlotCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SlotCategory::Open => "open",
            SlotCategory::Numeric => "numeric",
            SlotCategory::Temporal => "temporal",
            SlotCategory::Categorical => "categorical",
        };
        f.write_str(s)
    }
}

/// `(domain, name)` identifier of a slot. Serialized as `"domain-name"`;
/// domains therefore must not contain `-`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub domain: String,
    pub name: String,
}

impl SlotKey {
    pub fn new(domain: impl Into<String>, name: impl Into<String>) -> Self {
        SlotKey {
            domain: domain.into(),
            name: name.into(),
        }
    }

    pub fn parse(key: &str) -> Result<Self> {
        let (domain, name) = key.split_once('-').ok_or_else(|| Error::CorpusFormat {
            locus: key.to_string(),
            message: "slot key must be 'domain-name'".into(),
        })?;
        if domain.is_empty() || name.is_empty() {
            return Err(Error::CorpusFormat {
                locus: key.to_string(),
                message: "slot key has empty domain or name".into(),
            });
        }
        Ok(SlotKey::new(domain, name))
    }
}

impl fmt::Display for SlotKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.domain, self.name)
    }
}

impl Serialize for SlotKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SlotKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        SlotKey::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// A queryable slot: its key, the full natural-language question, a short
/// tuple-style synonym, and its value category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotDef {
    pub domain: String,
    pub name: String,
    pub question: String,
    pub tuple_synonym: String,
    pub category: SlotCategory,
}

impl SlotDef {
    pub fn key(&self) -> SlotKey {
        SlotKey::new(self.domain.clone(), self.name.clone())
    }
}

/// All slots known to an experiment, keyed by `(domain, name)`.
#[derive(Debug, Clone, Default)]
pub struct SlotRegistry {
    slots: BTreeMap<SlotKey, SlotDef>,
}

impl SlotRegistry {
    pub fn new(defs: Vec<SlotDef>) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for def in defs {
            if def.domain.contains('-') {
                return Err(Error::InvalidInput(format!(
                    "domain '{}' must not contain '-'",
                    def.domain
                )));
            }
            if def.question.is_empty() || def.tuple_synonym.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "slot {} has an empty question or tuple synonym",
                    def.key()
                )));
            }
            let key = def.key();
            if slots.insert(key.clone(), def).is_some() {
                return Err(Error::InvalidInput(format!("duplicate slot {key}")));
            }
        }
        Ok(SlotRegistry { slots })
    }

    pub fn get(&self, key: &SlotKey) -> Option<&SlotDef> {
        self.slots.get(key)
    }

    pub fn contains(&self, key: &SlotKey) -> bool {
        self.slots.contains_key(key)
    }

    pub fn contains_domain(&self, domain: &str) -> bool {
        self.slots.keys().any(|k| k.domain == domain)
    }

    /// All slots, in key order.
    pub fn slots(&self) -> impl Iterator<Item = &SlotDef> {
        self.slots.values()
    }

    /// Slots belonging to one domain, in key order.
    pub fn domain_slots(&self, domain: &str) -> Vec<&SlotDef> {
        self.slots
            .values()
            .filter(|d| d.domain == domain)
            .collect()
    }

    /// Slots belonging to any of the given domains, in key order.
    pub fn slots_for_domains(&self, domains: &BTreeSet<String>) -> Vec<&SlotDef> {
        self.slots
            .values()
            .filter(|d| domains.contains(&d.domain))
            .collect()
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.slots.keys().map(|k| k.domain.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "[usr]",
            Speaker::System => "[sys]",
        }
    }
}

/// One utterance with its speaker and position in the dialog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

/// Where a slot value was introduced, when annotated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotSource {
    User,
    System,
    Implicit,
}

/// Belief state at one user turn: slot key -> normalized value. Absent keys
/// mean "none"; the literal string "none" is never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeliefState {
    entries: BTreeMap<SlotKey, String>,
}

impl BeliefState {
    pub fn new() -> Self {
        BeliefState::default()
    }

    /// Insert a normalized value; a "none" value removes the key instead.
    pub fn set(&mut self, key: SlotKey, value: impl Into<String>) {
        let value = normalize_value(&value.into());
        if value == NONE_VALUE {
            self.entries.remove(&key);
        } else {
            self.entries.insert(key, value);
        }
    }

    /// The value for a slot, with absence reported as "none".
    pub fn value(&self, key: &SlotKey) -> &str {
        self.entries.get(key).map(String::as_str).unwrap_or(NONE_VALUE)
    }

    pub fn entries(&self) -> &BTreeMap<SlotKey, String> {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<(SlotKey, String)> for BeliefState {
    fn from_iter<I: IntoIterator<Item = (SlotKey, String)>>(iter: I) -> Self {
        let mut state = BeliefState::new();
        for (k, v) in iter {
            state.set(k, v);
        }
        state
    }
}

/// A full conversation: alternating turns, one gold belief state per user
/// turn, and the set of domains it touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub id: String,
    pub turns: Vec<Turn>,
    pub gold_states: Vec<BeliefState>,
    pub domains: BTreeSet<String>,
    /// Optional per-user-turn annotation of where each slot value came from.
    pub sources: Option<Vec<BTreeMap<SlotKey, SlotSource>>>,
}

impl Dialog {
    pub fn user_turn_count(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::User)
            .count()
    }

    /// Turns forming the context C_t of user turn `user_ordinal` (0-based):
    /// everything up to and including that user turn.
    pub fn context_turns(&self, user_ordinal: usize) -> &[Turn] {
        let mut seen = 0;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.speaker == Speaker::User {
                if seen == user_ordinal {
                    return &self.turns[..=i];
                }
                seen += 1;
            }
        }
        &self.turns
    }

    /// Check turn/state alignment and text invariants.
    pub fn validate(&self) -> Result<()> {
        let users = self.user_turn_count();
        if users == 0 {
            return Err(Error::CorpusFormat {
                locus: self.id.clone(),
                message: "dialog has no user turns".into(),
            });
        }
        if self.gold_states.len() != users {
            return Err(Error::CorpusFormat {
                locus: self.id.clone(),
                message: format!(
                    "{} gold states for {} user turns",
                    self.gold_states.len(),
                    users
                ),
            });
        }
        if self.turns.iter().any(|t| t.text.trim().is_empty()) {
            return Err(Error::CorpusFormat {
                locus: self.id.clone(),
                message: "empty utterance".into(),
            });
        }
        Ok(())
    }
}

/// Corpus summary counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogs: BTreeMap<String, usize>,
    pub n_dropped: usize,
    pub n_domains: usize,
    pub n_slots: usize,
    pub slots_by_category: BTreeMap<SlotCategory, usize>,
}

impl CorpusStats {
    pub fn compute(split: &str, dialogs: &[Dialog], dropped: usize, registry: &SlotRegistry) -> Self {
        let mut slots_by_category = BTreeMap::new();
        for def in registry.slots() {
            *slots_by_category.entry(def.category).or_insert(0) += 1;
        }
        CorpusStats {
            n_dialogs: BTreeMap::from([(split.to_string(), dialogs.len())]),
            n_dropped: dropped,
            n_domains: registry.domains().len(),
            n_slots: registry.len(),
            slots_by_category,
        }
    }
}

/// Lowercase, trim, collapse internal whitespace runs. Empty results and
/// "not mentioned" map to the canonical "none".
pub fn normalize_value(raw: &str) -> String {
    let collapsed = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    if collapsed.is_empty() || collapsed == "not mentioned" {
        NONE_VALUE.to_string()
    } else {
        collapsed
    }
}
