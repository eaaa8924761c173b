//! Deterministic synthetic multi-domain dialog generator.
//!
//! The schema declares domains, slots with value pools and utterance
//! templates, per-value paraphrases, and no-change filler exchanges. The
//! generated dialogs exercise everything the tracker has to cope with:
//! multi-domain conversations, values repeated implicitly across turns,
//! reactive slots whose value only ever appears in a system utterance, and
//! paraphrased mentions that differ from the canonical value.

use super::{
    normalize_value, BeliefState, Dialog, SlotCategory, SlotDef, SlotKey, SlotRegistry,
    SlotSource, Speaker, Turn,
};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// One slot in the synthetic schema. Templates carry a `{}` placeholder for
/// the value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotTemplate {
    pub name: String,
    pub category: SlotCategory,
    pub question: String,
    pub tuple_synonym: String,
    pub values: Vec<String>,
    pub user_template: String,
    /// System proposal used for reactive mentions; slots without one are
    /// never chosen for reactive turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_offer_template: Option<String>,
    /// Canonical value -> paraphrase that does not contain the value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub paraphrases: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainTemplate {
    pub name: String,
    pub opening: String,
    pub slots: Vec<SlotTemplate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSchema {
    pub domains: Vec<DomainTemplate>,
    /// System acknowledgements between user turns.
    pub acknowledgements: Vec<String>,
    /// (system, user) exchanges that leave the belief state unchanged.
    pub fillers: Vec<(String, String)>,
    /// Closing (system, user) exchange, also state-preserving.
    pub closing: (String, String),
    pub two_domain_prob: f64,
}

impl SyntheticSchema {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::InvalidSchema(format!(
                "need at least 2 domains, got {}",
                self.domains.len()
            )));
        }
        for domain in &self.domains {
            if domain.slots.is_empty() {
                return Err(Error::InvalidSchema(format!(
                    "domain '{}' has no slots",
                    domain.name
                )));
            }
            if domain.name.contains('-') {
                return Err(Error::InvalidSchema(format!(
                    "domain '{}' must not contain '-'",
                    domain.name
                )));
            }
            for slot in &domain.slots {
                if slot.values.is_empty() {
                    return Err(Error::InvalidSchema(format!(
                        "slot '{}-{}' has an empty value pool",
                        domain.name, slot.name
                    )));
                }
                if !slot.user_template.contains("{}") {
                    return Err(Error::InvalidSchema(format!(
                        "user template for '{}-{}' lacks a {{}} placeholder",
                        domain.name, slot.name
                    )));
                }
            }
        }
        if self.acknowledgements.is_empty() || self.fillers.is_empty() {
            return Err(Error::InvalidSchema(
                "acknowledgements and fillers must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Slot registry induced by the schema.
    pub fn registry(&self) -> Result<SlotRegistry> {
        let mut defs = Vec::new();
        for domain in &self.domains {
            for slot in &domain.slots {
                defs.push(SlotDef {
                    domain: domain.name.clone(),
                    name: slot.name.clone(),
                    question: normalize_value(&slot.question),
                    tuple_synonym: normalize_value(&slot.tuple_synonym),
                    category: slot.category,
                });
            }
        }
        SlotRegistry::new(defs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = serde_json::to_string_pretty(self)?;
        std::fs::write(path, data).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let schema: SyntheticSchema = serde_json::from_str(&data)?;
        schema.validate()?;
        Ok(schema)
    }
}

fn slot(
    name: &str,
    category: SlotCategory,
    question: &str,
    synonym: &str,
    values: &[&str],
    user_template: &str,
    offer: Option<&str>,
    paraphrases: &[(&str, &str)],
) -> SlotTemplate {
    SlotTemplate {
        name: name.into(),
        category,
        question: question.into(),
        tuple_synonym: synonym.into(),
        values: values.iter().map(|v| v.to_string()).collect(),
        user_template: user_template.into(),
        system_offer_template: offer.map(|s| s.to_string()),
        paraphrases: paraphrases
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

/// The built-in five-domain schema. Slot semantics deliberately recur across
/// domains (shared areas, price ranges, times, and phrasing) so that a model
/// trained with one domain held out still sees the linguistic patterns the
/// held-out slots rely on.
pub fn default_schema() -> SyntheticSchema {
    let areas = ["north", "south", "east", "west", "centre"];
    let prices = ["cheap", "moderate", "expensive"];
    let times = [
        "08:15", "09:30", "11:45", "13:10", "15:15", "17:30", "19:00", "21:20",
    ];
    let places = [
        "cambridge",
        "london",
        "norwich",
        "peterborough",
        "ely",
        "stevenage",
        "broxbourne",
    ];
    let counts = ["1", "2", "3", "4", "5", "6", "7", "8"];

    let area_slot = |noun: &str| {
        slot(
            "area",
            SlotCategory::Categorical,
            &format!("what area of town does the user want the {noun} in?"),
            &format!("{noun} area"),
            &areas,
            "somewhere in the {} part of town",
            Some("there are several in the {} , is that alright ?"),
            &[("centre", "right in the middle of town please")],
        )
    };
    let price_slot = |noun: &str| {
        slot(
            "pricerange",
            SlotCategory::Categorical,
            &format!("what is the price range of the {noun} the user wants?"),
            &format!("{noun} price range"),
            &prices,
            "i want something in the {} price range",
            Some("i can offer something in the {} price range , does that work ?"),
            &[
                ("cheap", "i do not want to spend a lot of money"),
                ("expensive", "money is no object , i want something fancy"),
            ],
        )
    };
    let name_slot = |noun: &str, names: &[&str]| {
        slot(
            "name",
            SlotCategory::Open,
            &format!("what is the name of the {noun} the user is interested in?"),
            &format!("{noun} name"),
            names,
            "i heard about a place called {}",
            Some("you could try {} , does that sound good ?"),
            &[],
        )
    };

    let restaurant = DomainTemplate {
        name: "restaurant".into(),
        opening: "i am looking for a restaurant".into(),
        slots: vec![
            price_slot("restaurant"),
            area_slot("restaurant"),
            slot(
                "food",
                SlotCategory::Categorical,
                "what type of food does the user want to eat?",
                "food type",
                &["italian", "chinese", "indian", "british", "thai"],
                "i would like {} food",
                Some("how about some {} food ?"),
                &[("italian", "i fancy pasta and pizza tonight")],
            ),
            name_slot(
                "restaurant",
                &[
                    "the golden curry",
                    "pizza hut city",
                    "the oak bistro",
                    "cote brasserie",
                    "curry prince",
                ],
            ),
            slot(
                "book people",
                SlotCategory::Numeric,
                "how many people is the restaurant booking for?",
                "restaurant booking people",
                &counts,
                "it will be for {} people",
                Some("shall i book a table for {} people ?"),
                &[],
            ),
        ],
    };

    let hotel = DomainTemplate {
        name: "hotel".into(),
        opening: "i need a place to stay".into(),
        slots: vec![
            price_slot("hotel"),
            area_slot("hotel"),
            slot(
                "stars",
                SlotCategory::Numeric,
                "how many stars should the hotel have?",
                "hotel stars",
                &["2", "3", "4", "5"],
                "it should have {} stars",
                Some("i found one with {} stars , is that ok ?"),
                &[],
            ),
            name_slot(
                "hotel",
                &[
                    "alexander bed and breakfast",
                    "huntingdon marriott",
                    "cityroomz",
                    "warkworth house",
                    "acorn guest house",
                ],
            ),
            slot(
                "book stay",
                SlotCategory::Numeric,
                "how many nights does the user want to stay?",
                "hotel booking stay",
                &["1", "2", "3", "4", "5", "6", "7"],
                "we will stay for {} nights",
                Some("shall i book it for {} nights ?"),
                &[],
            ),
        ],
    };

    let attraction = DomainTemplate {
        name: "attraction".into(),
        opening: "i want to find an attraction to visit".into(),
        slots: vec![
            area_slot("attraction"),
            slot(
                "type",
                SlotCategory::Categorical,
                "what type of attraction does the user want to visit?",
                "attraction type",
                &["museum", "park", "cinema", "theatre", "college"],
                "i would like to visit a {}",
                Some("how about a {} ?"),
                &[("park", "somewhere outdoors with a bit of fresh air")],
            ),
            name_slot(
                "attraction",
                &[
                    "the cambridge punter",
                    "scott polar museum",
                    "clare hall",
                    "the fez club",
                    "castle galleries",
                ],
            ),
        ],
    };

    let train = DomainTemplate {
        name: "train".into(),
        opening: "i need a train".into(),
        slots: vec![
            slot(
                "departure",
                SlotCategory::Open,
                "where does the user want the train to depart from?",
                "train departure",
                &places,
                "i will be departing from {}",
                None,
                &[],
            ),
            slot(
                "destination",
                SlotCategory::Open,
                "where does the user want the train to go to?",
                "train destination",
                &places,
                "i am going to {}",
                None,
                &[],
            ),
            slot(
                "day",
                SlotCategory::Categorical,
                "what day does the user want to travel by train?",
                "train day",
                &[
                    "monday",
                    "tuesday",
                    "wednesday",
                    "thursday",
                    "friday",
                    "saturday",
                    "sunday",
                ],
                "i want to travel on {}",
                Some("there is a train on {} , shall i book it ?"),
                &[],
            ),
            slot(
                "leave at",
                SlotCategory::Temporal,
                "what time does the user want the train to leave?",
                "train leave at",
                &times,
                "i want to leave at {}",
                Some("there is one leaving at {} , does that suit you ?"),
                &[],
            ),
            slot(
                "arrive by",
                SlotCategory::Temporal,
                "what time does the user want the train to arrive by?",
                "train arrive by",
                &times,
                "i need to arrive by {}",
                Some("it would get you there by {} , is that ok ?"),
                &[],
            ),
            slot(
                "book people",
                SlotCategory::Numeric,
                "how many people is the train booking for?",
                "train booking people",
                &counts,
                "it will be for {} people",
                Some("shall i book {} tickets ?"),
                &[],
            ),
        ],
    };

    let taxi = DomainTemplate {
        name: "taxi".into(),
        opening: "i need a taxi".into(),
        slots: vec![
            slot(
                "departure",
                SlotCategory::Open,
                "where does the user want the taxi to depart from?",
                "taxi departure",
                &places,
                "i will be departing from {}",
                None,
                &[],
            ),
            slot(
                "destination",
                SlotCategory::Open,
                "where does the user want the taxi to go to?",
                "taxi destination",
                &places,
                "i am going to {}",
                None,
                &[],
            ),
            slot(
                "leave at",
                SlotCategory::Temporal,
                "what time does the user want the taxi to leave?",
                "pick up time",
                &times,
                "i want to leave at {}",
                Some("a taxi could pick you up at {} , does that suit you ?"),
                &[],
            ),
            slot(
                "arrive by",
                SlotCategory::Temporal,
                "what time does the user want the taxi to arrive by?",
                "drop off time",
                &times,
                "i need to arrive by {}",
                Some("it would get you there by {} , is that ok ?"),
                &[],
            ),
        ],
    };

    SyntheticSchema {
        domains: vec![restaurant, hotel, attraction, train, taxi],
        acknowledgements: vec![
            "ok , let me see what i can find .".into(),
            "sure , i can help with that .".into(),
            "alright , noted .".into(),
            "of course , one moment .".into(),
        ],
        fillers: vec![
            (
                "would you like the phone number ?".into(),
                "yes please , that would be great .".into(),
            ),
            (
                "one moment while i look that up .".into(),
                "sure , take your time .".into(),
            ),
            (
                "i have found a few matches for you .".into(),
                "great , that sounds promising .".into(),
            ),
        ],
        closing: (
            "anything else i can help you with ?".into(),
            "no , that is all . thank you !".into(),
        ),
        two_domain_prob: 0.4,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum MentionKind {
    Plain,
    Reactive,
    Implicit,
}

struct Mention {
    slot_idx: usize,
    value: String,
    kind: MentionKind,
}

/// Whole-word (space-delimited) containment check.
pub(crate) fn contains_word_seq(text: &str, value: &str) -> bool {
    format!(" {text} ").contains(&format!(" {value} "))
}

/// Generate `n_dialogs` dialogs, a pure function of `(seed, schema, n_dialogs)`.
pub fn generate_synthetic_corpus(
    seed: u64,
    schema: &SyntheticSchema,
    n_dialogs: usize,
) -> Result<Vec<Dialog>> {
    schema.validate()?;
    if n_dialogs == 0 {
        return Err(Error::InvalidInput("n_dialogs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_dialogs)
        .map(|i| generate_dialog(&mut rng, schema, i))
        .collect()
}

fn generate_dialog(rng: &mut ChaCha8Rng, schema: &SyntheticSchema, index: usize) -> Result<Dialog> {
    let n_domains = if schema.domains.len() >= 2 && rng.random_bool(schema.two_domain_prob) {
        2
    } else {
        1
    };
    let mut domain_indices: Vec<usize> = (0..schema.domains.len()).collect();
    domain_indices.shuffle(rng);
    domain_indices.truncate(n_domains);

    // Plan mentions per domain, one or two slots folded into the opening turn.
    let mut segments: Vec<(usize, Vec<Mention>)> = Vec::new();
    for &di in &domain_indices {
        let domain = &schema.domains[di];
        let n_fill = rng.random_range(2..=domain.slots.len().min(4));
        let mut slot_indices: Vec<usize> = (0..domain.slots.len()).collect();
        slot_indices.shuffle(rng);
        slot_indices.truncate(n_fill);

        let mut mentions = Vec::new();
        for si in slot_indices {
            let tpl = &domain.slots[si];
            let value = tpl.values[rng.random_range(0..tpl.values.len())].clone();
            let kind = if tpl.paraphrases.contains_key(&value) && rng.random_bool(0.5) {
                MentionKind::Implicit
            } else {
                MentionKind::Plain
            };
            mentions.push(Mention {
                slot_idx: si,
                value,
                kind,
            });
        }
        segments.push((di, mentions));
    }

    // Upgrade some mentions to reactive (system proposes, user accepts).
    // A reactive value must never surface in a user utterance, so skip the
    // upgrade when the value collides with any other planned user line. The
    // opening mention of a segment stays as-is: there is no proposal yet.
    let user_texts: Vec<String> = segments
        .iter()
        .flat_map(|(di, mentions)| {
            let domain = &schema.domains[*di];
            mentions.iter().map(|m| {
                let tpl = &domain.slots[m.slot_idx];
                match m.kind {
                    MentionKind::Implicit => tpl.paraphrases[&m.value].clone(),
                    _ => tpl.user_template.replace("{}", &m.value),
                }
            })
        })
        .collect();
    let mut flat_pos = 0;
    for (di, mentions) in &mut segments {
        let domain = &schema.domains[*di];
        for (i, m) in mentions.iter_mut().enumerate() {
            let tpl = &domain.slots[m.slot_idx];
            if i > 0 && tpl.system_offer_template.is_some() && rng.random_bool(0.25) {
                let clashes = user_texts
                    .iter()
                    .enumerate()
                    .any(|(j, text)| j != flat_pos && contains_word_seq(text, &m.value));
                if !clashes {
                    m.kind = MentionKind::Reactive;
                }
            }
            flat_pos += 1;
        }
    }

    let mut turns: Vec<Turn> = Vec::new();
    let mut gold_states: Vec<BeliefState> = Vec::new();
    let mut sources: Vec<BTreeMap<SlotKey, SlotSource>> = Vec::new();
    let mut state = BeliefState::new();

    let push_system = |turns: &mut Vec<Turn>, text: String| {
        turns.push(Turn {
            speaker: Speaker::System,
            text: normalize_value(&text),
            turn_index: turns.len(),
        });
    };
    let user_turn = |turns: &mut Vec<Turn>,
                         gold_states: &mut Vec<BeliefState>,
                         sources: &mut Vec<BTreeMap<SlotKey, SlotSource>>,
                         state: &mut BeliefState,
                         text: String,
                         updates: Vec<(SlotKey, String, SlotSource)>| {
        turns.push(Turn {
            speaker: Speaker::User,
            text: normalize_value(&text),
            turn_index: turns.len(),
        });
        let mut turn_sources = BTreeMap::new();
        for (key, value, source) in updates {
            state.set(key.clone(), value);
            turn_sources.insert(key, source);
        }
        gold_states.push(state.clone());
        sources.push(turn_sources);
    };

    push_system(&mut turns, "hello , how can i help you today ?".into());

    let n_fillers = rng.random_range(1..=2usize);
    // Positions (in user-turn ordinals after the opening) where fillers go.
    let mut filler_after: Vec<usize> = Vec::new();
    for _ in 0..n_fillers {
        filler_after.push(rng.random_range(1..=3));
    }

    let mut user_ordinal = 0usize;
    for (seg_pos, (di, mentions)) in segments.iter().enumerate() {
        let domain = &schema.domains[*di];
        let mut pending = mentions.iter();

        // Opening turn of the segment carries the first mention when it is
        // expressible by the user.
        let first = pending.next();
        let mut opening_text = domain.opening.clone();
        let mut opening_updates = Vec::new();
        if let Some(m) = first {
            let tpl = &domain.slots[m.slot_idx];
            let key = SlotKey::new(domain.name.clone(), tpl.name.clone());
            match m.kind {
                MentionKind::Implicit => {
                    opening_text =
                        format!("{opening_text} . {}", tpl.paraphrases[&m.value]);
                    opening_updates.push((key, m.value.clone(), SlotSource::Implicit));
                }
                _ => {
                    opening_text = format!(
                        "{opening_text} . {}",
                        tpl.user_template.replace("{}", &m.value)
                    );
                    opening_updates.push((key, m.value.clone(), SlotSource::User));
                }
            }
        }
        if seg_pos > 0 {
            let ack = &schema.acknowledgements
                [rng.random_range(0..schema.acknowledgements.len())];
            push_system(&mut turns, ack.clone());
        }
        user_turn(
            &mut turns,
            &mut gold_states,
            &mut sources,
            &mut state,
            opening_text,
            opening_updates,
        );
        user_ordinal += 1;

        for m in pending {
            if filler_after.contains(&user_ordinal) {
                let filler = &schema.fillers[rng.random_range(0..schema.fillers.len())];
                push_system(&mut turns, filler.0.clone());
                user_turn(
                    &mut turns,
                    &mut gold_states,
                    &mut sources,
                    &mut state,
                    filler.1.clone(),
                    Vec::new(),
                );
                user_ordinal += 1;
            }
            let tpl = &domain.slots[m.slot_idx];
            let key = SlotKey::new(domain.name.clone(), tpl.name.clone());
            match m.kind {
                MentionKind::Reactive => {
                    let offer = tpl
                        .system_offer_template
                        .as_ref()
                        .expect("reactive mention requires an offer template");
                    push_system(&mut turns, offer.replace("{}", &m.value));
                    user_turn(
                        &mut turns,
                        &mut gold_states,
                        &mut sources,
                        &mut state,
                        "yes , that works for me .".into(),
                        vec![(key, m.value.clone(), SlotSource::System)],
                    );
                }
                MentionKind::Implicit => {
                    let ack = &schema.acknowledgements
                        [rng.random_range(0..schema.acknowledgements.len())];
                    push_system(&mut turns, ack.clone());
                    user_turn(
                        &mut turns,
                        &mut gold_states,
                        &mut sources,
                        &mut state,
                        tpl.paraphrases[&m.value].clone(),
                        vec![(key, m.value.clone(), SlotSource::Implicit)],
                    );
                }
                MentionKind::Plain => {
                    let ack = &schema.acknowledgements
                        [rng.random_range(0..schema.acknowledgements.len())];
                    push_system(&mut turns, ack.clone());
                    user_turn(
                        &mut turns,
                        &mut gold_states,
                        &mut sources,
                        &mut state,
                        tpl.user_template.replace("{}", &m.value),
                        vec![(key, m.value.clone(), SlotSource::User)],
                    );
                }
            }
            user_ordinal += 1;
        }
    }

    // Closing exchange leaves the state unchanged, guaranteeing at least one
    // trailing carry-over turn.
    push_system(&mut turns, schema.closing.0.clone());
    user_turn(
        &mut turns,
        &mut gold_states,
        &mut sources,
        &mut state,
        schema.closing.1.clone(),
        Vec::new(),
    );

    let domains: BTreeSet<String> = domain_indices
        .iter()
        .map(|&di| schema.domains[di].name.clone())
        .collect();

    let dialog = Dialog {
        id: format!("syn-{index:05}"),
        turns,
        gold_states,
        domains,
        sources: Some(sources),
    };
    dialog.validate()?;
    Ok(dialog)
}
