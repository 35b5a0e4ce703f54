//! Dialogue corpora: loading, delexicalization, vocabularies and batching.
//!
//! Two on-disk formats are supported:
//!
//! * the native JSON-lines format ([`jsonl`]), one dialogue per line with
//!   pre-tokenized turns, optional dependency arcs and KB triples, plus an
//!   optional per-turn dependency file;
//! * the public SMD (KVRET) release ([`smd`]), whose wide KB rows are
//!   normalized to triples on load.

pub mod batch;
pub mod jsonl;
pub mod smd;
pub mod synthetic;
pub mod vocab;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dialogue_graph::{build_graph, DepEdge, DialogueGraph, Speaker, TokenSeq};
use crate::error::{Error, Result};
use crate::kg::{build_kb_graph, KbTriple, KnowledgeGraph};

pub use batch::{make_batches, Batch};
pub use vocab::{build_entity_vocab, build_vocab, Vocabulary};

/// Prefix marking sketch tags.
pub const TAG_PREFIX: char = '@';

/// Tokens opening each turn of a history.
pub const USER_MARKER: &str = "$u";
pub const SYSTEM_MARKER: &str = "$s";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    /// Dependency arcs with positions local to this turn.
    #[serde(default)]
    pub deps: Vec<DepEdge>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domain: String,
    pub turns: Vec<Turn>,
    pub kb: Vec<KbTriple>,
}

/// Entity normalizer: lowercase, internal whitespace runs become `_`.
pub fn normalize_entity(value: &str) -> String {
    value
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Slot types and their values.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    slots: BTreeMap<String, BTreeSet<String>>,
}

impl Ontology {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a normalized value under `slot`.
    pub fn insert(&mut self, slot: &str, value: &str) {
        let v = normalize_entity(value);
        if !v.is_empty() {
            self.slots.entry(slot.to_string()).or_default().insert(v);
        }
    }

    pub fn add_slot(&mut self, slot: &str) {
        self.slots.entry(slot.to_string()).or_default();
    }

    /// Reads `{"slot": ["value", ...], ...}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut o = Self::new();
        for (slot, values) in raw {
            o.add_slot(&slot);
            for v in values {
                o.insert(&slot, &v);
            }
        }
        Ok(o)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.slots).expect("ontology serializes")
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn values(&self, slot: &str) -> impl Iterator<Item = &str> {
        self.slots.get(slot).into_iter().flatten().map(String::as_str)
    }

    /// Slot of `value`; when a value is listed under several slots the
    /// lexicographically first slot wins.
    pub fn slot_of(&self, value: &str) -> Option<&str> {
        self.slots
            .iter()
            .find(|(_, vs)| vs.contains(value))
            .map(|(s, _)| s.as_str())
    }

    pub fn tag(slot: &str) -> String {
        format!("{TAG_PREFIX}{slot}")
    }

    pub fn all_values(&self) -> impl Iterator<Item = &str> {
        self.slots.values().flatten().map(String::as_str)
    }
}

pub fn is_tag(token: &str) -> bool {
    token.len() > 1 && token.starts_with(TAG_PREFIX)
}

/// Recognizes entity tokens: ontology values plus the entities of one KB.
#[derive(Clone, Debug)]
pub struct EntityLexicon<'a> {
    ontology: &'a Ontology,
    kb_slots: HashMap<&'a str, &'a str>,
}

impl<'a> EntityLexicon<'a> {
    /// Objects map to their relation; subjects map to nothing beyond the ontology.
    pub fn new(ontology: &'a Ontology, kb: &'a [KbTriple]) -> Self {
        let mut kb_slots = HashMap::new();
        for t in kb {
            kb_slots.entry(t.object.as_str()).or_insert(t.relation.as_str());
        }
        let mut lex = Self { ontology, kb_slots };
        for t in kb {
            if lex.ontology.slot_of(&t.subject).is_none() {
                lex.kb_slots.entry(t.subject.as_str()).or_insert("");
            }
        }
        lex
    }

    /// Slot type for an entity token, `None` for ordinary words.
    ///
    /// A KB subject that neither the ontology nor any relation types is an
    /// entity without a slot (`Some("")`): it counts for entity F1 but is
    /// never delexicalized.
    pub fn slot_of(&self, token: &str) -> Option<&str> {
        self.ontology
            .slot_of(token)
            .or_else(|| self.kb_slots.get(token).copied())
    }

    pub fn is_entity(&self, token: &str) -> bool {
        self.slot_of(token).is_some()
    }

    /// Entity tokens of a response, in order.
    pub fn entities<'t>(&self, tokens: &'t [String]) -> Vec<&'t str> {
        tokens
            .iter()
            .map(String::as_str)
            .filter(|t| self.is_entity(t))
            .collect()
    }
}

/// Replaces entity tokens with `@slot` tags and labels each with its KB node.
///
/// When a surface form matches several nodes the node whose KB row holds the
/// most other entities of the same response wins; ties go to the lowest id.
pub fn delexicalize(
    response: &[String],
    kb: &[KbTriple],
    graph: &KnowledgeGraph,
    ontology: &Ontology,
) -> (Vec<String>, Vec<Option<usize>>) {
    let lex = EntityLexicon::new(ontology, kb);
    let typed: Vec<Option<&str>> = response
        .iter()
        .map(|t| lex.slot_of(t).filter(|s| !s.is_empty()))
        .collect();
    let mut sketch = Vec::with_capacity(response.len());
    let mut labels = Vec::with_capacity(response.len());
    for (pos, (tok, slot)) in response.iter().zip(&typed).enumerate() {
        let Some(slot) = slot else {
            sketch.push(tok.clone());
            labels.push(None);
            continue;
        };
        sketch.push(Ontology::tag(slot));
        let candidates = graph.nodes_with_token(tok);
        let label = candidates
            .iter()
            .map(|&node| {
                let row = graph.row_members(graph.node(node).row);
                let support = response
                    .iter()
                    .enumerate()
                    .filter(|&(i, t)| {
                        i != pos
                            && typed[i].is_some()
                            && row.iter().any(|&m| m != node && graph.node(m).token == *t)
                    })
                    .count();
                (node, support)
            })
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(node, _)| node);
        labels.push(label);
    }
    (sketch, labels)
}

/// Fills tags that carry a node label with that node's surface form.
pub fn relexicalize(sketch: &[String], labels: &[Option<usize>], graph: &KnowledgeGraph) -> Vec<String> {
    sketch
        .iter()
        .zip(labels)
        .map(|(tok, label)| match label {
            Some(node) if is_tag(tok) => graph.node(*node).token.clone(),
            _ => tok.clone(),
        })
        .collect()
}

/// One prediction target: the history up to a user turn and the system reply.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: String,
    /// Index of the system turn being predicted.
    pub turn: usize,
    pub domain: String,
    pub history: TokenSeq,
    /// Dependency arcs over history positions.
    pub deps: Vec<DepEdge>,
    pub kb: Vec<KbTriple>,
    pub graph: KnowledgeGraph,
    pub response: Vec<String>,
    pub sketch: Vec<String>,
    pub labels: Vec<Option<usize>>,
}

impl TrainingExample {
    pub fn key(&self) -> String {
        format!("{}#{}", self.dialogue_id, self.turn)
    }
}

/// One example per system turn that follows at least one earlier turn.
///
/// The history concatenates all earlier turns, each opened by its speaker
/// marker; dependency arcs stay within their utterance and are shifted to
/// history positions.
pub fn make_examples(dialogues: &[Dialogue], ontology: &Ontology) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for d in dialogues {
        let graph = build_kb_graph(&d.kb);
        for (ti, turn) in d.turns.iter().enumerate() {
            if turn.speaker != Speaker::System || ti == 0 {
                continue;
            }
            let mut tokens = Vec::new();
            let mut speakers = Vec::new();
            let mut turns = Vec::new();
            let mut deps = Vec::new();
            for (pi, prev) in d.turns[..ti].iter().enumerate() {
                let marker = match prev.speaker {
                    Speaker::User => USER_MARKER,
                    Speaker::System => SYSTEM_MARKER,
                };
                tokens.push(marker.to_string());
                speakers.push(prev.speaker);
                turns.push(pi);
                let offset = tokens.len();
                for dep in &prev.deps {
                    deps.push(DepEdge::new(
                        dep.head + offset,
                        dep.dependent + offset,
                        dep.label.clone(),
                    ));
                }
                tokens.extend(prev.tokens.iter().cloned());
                speakers.extend(std::iter::repeat_n(prev.speaker, prev.tokens.len()));
                turns.extend(std::iter::repeat_n(pi, prev.tokens.len()));
            }
            if turn.tokens.is_empty() {
                return Err(Error::Data(format!(
                    "dialogue {} turn {ti}: empty history or response",
                    d.id
                )));
            }
            let history = TokenSeq::new(tokens, speakers, turns)?;
            let (sketch, labels) = delexicalize(&turn.tokens, &d.kb, &graph, ontology);
            out.push(TrainingExample {
                dialogue_id: d.id.clone(),
                turn: ti,
                domain: d.domain.clone(),
                history,
                deps,
                kb: d.kb.clone(),
                graph: graph.clone(),
                response: turn.tokens.clone(),
                sketch,
                labels,
            });
        }
    }
    Ok(out)
}

/// One dialogue graph per non-empty turn, for edge statistics.
pub fn turn_graphs(dialogues: &[Dialogue]) -> Result<Vec<DialogueGraph>> {
    let mut out = Vec::new();
    for d in dialogues {
        for (ti, t) in d.turns.iter().enumerate() {
            if t.tokens.is_empty() {
                continue;
            }
            let g = build_graph(TokenSeq::plain(&t.tokens)?, &t.deps)
                .map_err(|e| Error::Data(format!("dialogue {} turn {ti}: {e}", d.id)))?;
            out.push(g);
        }
    }
    Ok(out)
}

/// Splits raw text into tokens.
///
/// Lowercases, rewrites each known multi-word entity to its underscored
/// form (longest first, on word boundaries), then splits on whitespace with
/// `. , ? ! ; :` and double quotes as separate tokens.
pub fn tokenize(text: &str, entities: &[String]) -> Vec<String> {
    let mut s = format!(" {} ", text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" "));
    let mut spaced: Vec<(String, &String)> = entities
        .iter()
        .filter(|e| e.contains('_'))
        .map(|e| (format!(" {} ", e.replace('_', " ")), e))
        .collect();
    spaced.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
    let punct = |c: char| matches!(c, '.' | ',' | '?' | '!' | ';' | ':' | '"');
    // Entities may sit next to punctuation, so pad punctuation first.
    let mut padded = String::with_capacity(s.len() * 2);
    for c in s.chars() {
        if punct(c) {
            padded.push(' ');
            padded.push(c);
            padded.push(' ');
        } else {
            padded.push(c);
        }
    }
    s = format!(" {} ", padded.split_whitespace().collect::<Vec<_>>().join(" "));
    for (spaced_form, canon) in &spaced {
        if s.contains(spaced_form.as_str()) {
            s = s.replace(spaced_form.as_str(), &format!(" {canon} "));
        }
    }
    s.split_whitespace().map(str::to_string).collect()
}
