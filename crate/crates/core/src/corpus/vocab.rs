//! Token vocabularies.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{Ontology, TrainingExample};
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

/// Bidirectional token/id map. Unknown tokens map to the `<unk>` id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    unk: usize,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index: HashMap<String, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let unk = index.get(UNK).copied().unwrap_or(0);
        Self { words, index, unk }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Builds from an explicit word list; entries must be distinct.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let v = Self::from(words);
        if v.index.len() != v.words.len() {
            return Err(Error::Data("vocabulary contains duplicate entries".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn unk_id(&self) -> usize {
        self.unk
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

fn frequency_order(counts: HashMap<&str, usize>) -> Vec<String> {
    let mut items: Vec<(&str, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    items.into_iter().map(|(w, _)| w.to_string()).collect()
}

/// Shared input/sketch vocabulary.
///
/// Specials come first (`<pad> <sos> <eos> <unk>`), then one tag per
/// ontology slot and per tag seen in any sketch, then the remaining history
/// and sketch tokens by descending frequency with lexicographic tie-breaks.
pub fn build_vocab(examples: &[TrainingExample], ontology: &Ontology) -> Vocabulary {
    let mut words: Vec<String> = [PAD, SOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
    let mut tags: BTreeSet<String> = ontology.slots().map(Ontology::tag).collect();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        for t in ex.history.tokens().iter().chain(&ex.sketch) {
            if super::is_tag(t) {
                tags.insert(t.clone());
            } else {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    for s in [PAD, SOS, EOS, UNK] {
        counts.remove(s);
    }
    for t in &tags {
        counts.remove(t.as_str());
    }
    words.extend(tags);
    words.extend(frequency_order(counts));
    Vocabulary::from(words)
}

/// Vocabulary of KB node surface forms, `<unk>` first.
pub fn build_entity_vocab(examples: &[TrainingExample]) -> Vocabulary {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in examples {
        for n in ex.graph.nodes() {
            *counts.entry(n.token.as_str()).or_default() += 1;
        }
    }
    counts.remove(UNK);
    let mut words = vec![UNK.to_string()];
    words.extend(frequency_order(counts));
    Vocabulary::from(words)
}
