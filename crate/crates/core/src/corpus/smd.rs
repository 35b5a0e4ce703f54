//! Loader for the public SMD (KVRET) JSON release.
//!
//! KB rows are wide records; each becomes triples `(subject, column, value)`
//! with the subject column chosen per domain (`poi`, `event`, `location`).
//! Weather day cells such as `"rain, low of 50f, high of 70f"` split into
//! `(loc, day, rain)`, `(loc, day_low, 50f)` and `(loc, day_high, 70f)`.
//! Cells equal to `-` or empty are dropped. Values pass through
//! [`normalize_entity`], utterances through [`tokenize`].

use std::collections::BTreeSet;
use std::path::Path;

use serde_json::Value;

use super::{normalize_entity, tokenize, Dialogue, Ontology, Turn};
use crate::dialogue_graph::Speaker;
use crate::error::{Error, Result};
use crate::kg::KbTriple;

pub const DOMAINS: [&str; 3] = ["navigate", "schedule", "weather"];

fn subject_column(domain: &str) -> Option<&'static str> {
    match domain {
        "navigate" => Some("poi"),
        "schedule" => Some("event"),
        "weather" => Some("location"),
        _ => None,
    }
}

fn cell(v: &Value) -> Option<String> {
    let s = match v {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    let s = s.trim();
    if s.is_empty() || s == "-" {
        None
    } else {
        Some(s.to_string())
    }
}

/// Reads the entity file into an ontology.
///
/// List entries that are objects contribute each field under the field's
/// name (`type` becomes `poi_type`); plain strings go under the list's key.
pub fn load_ontology(text: &str) -> Result<Ontology> {
    let raw: Value = serde_json::from_str(text)?;
    let map = raw
        .as_object()
        .ok_or_else(|| Error::Data("entity file must be a JSON object".into()))?;
    let mut o = Ontology::new();
    for (slot, values) in map {
        let list = values
            .as_array()
            .ok_or_else(|| Error::Data(format!("entity slot {slot} is not a list")))?;
        for v in list {
            match v {
                Value::Object(fields) => {
                    for (k, fv) in fields {
                        let name = if k == "type" { "poi_type" } else { k.as_str() };
                        if let Some(s) = cell(fv) {
                            o.insert(name, &s);
                        }
                    }
                }
                other => {
                    if let Some(s) = cell(other) {
                        o.insert(slot, &s);
                    }
                }
            }
        }
    }
    Ok(o)
}

/// Normalizes one wide KB row into triples.
pub fn row_triples(domain: &str, row: &serde_json::Map<String, Value>) -> Result<Vec<KbTriple>> {
    let col = subject_column(domain)
        .ok_or_else(|| Error::Data(format!("unknown SMD domain {domain}")))?;
    let Some(subject) = row.get(col).and_then(cell) else {
        return Ok(Vec::new());
    };
    let subject = normalize_entity(&subject);
    let mut out = Vec::new();
    for (key, v) in row {
        if key == col {
            continue;
        }
        let Some(text) = cell(v) else { continue };
        let relation = if key == "type" { "poi_type".to_string() } else { key.clone() };
        if domain == "weather" && key != "today" && text.contains(',') {
            for (i, part) in text.split(',').map(str::trim).enumerate() {
                let (rel, val) = if let Some(rest) = part.strip_prefix("low of ") {
                    (format!("{relation}_low"), rest)
                } else if let Some(rest) = part.strip_prefix("high of ") {
                    (format!("{relation}_high"), rest)
                } else if i == 0 {
                    (relation.clone(), part)
                } else {
                    (format!("{relation}_{i}"), part)
                };
                if !val.is_empty() {
                    out.push(KbTriple::new(subject.clone(), rel, normalize_entity(val)));
                }
            }
        } else {
            out.push(KbTriple::new(subject.clone(), relation, normalize_entity(&text)));
        }
    }
    Ok(out)
}

/// Parses one split file.
pub fn parse_dialogues(text: &str, ontology: &Ontology) -> Result<Vec<Dialogue>> {
    let raw: Value = serde_json::from_str(text)?;
    let list = raw
        .as_array()
        .ok_or_else(|| Error::Data("SMD split must be a JSON list".into()))?;
    let known: Vec<String> = ontology.all_values().map(str::to_string).collect();
    let mut out = Vec::with_capacity(list.len());
    for (i, d) in list.iter().enumerate() {
        let scenario = &d["scenario"];
        let domain = scenario["task"]["intent"]
            .as_str()
            .ok_or_else(|| Error::Data(format!("dialogue {i}: missing task intent")))?
            .to_string();
        let id = scenario["uuid"].as_str().map_or_else(|| format!("smd-{i}"), str::to_string);
        let mut kb = Vec::new();
        if let Some(items) = scenario["kb"]["items"].as_array() {
            for item in items {
                let row = item
                    .as_object()
                    .ok_or_else(|| Error::Data(format!("dialogue {id}: KB row is not an object")))?;
                kb.extend(row_triples(&domain, row)?);
            }
        }
        let mut entities: BTreeSet<String> = known.iter().cloned().collect();
        for t in &kb {
            entities.insert(t.subject.clone());
            entities.insert(t.object.clone());
        }
        let entities: Vec<String> = entities.into_iter().collect();
        let mut turns = Vec::new();
        for t in d["dialogue"].as_array().into_iter().flatten() {
            let speaker = match t["turn"].as_str() {
                Some("driver") => Speaker::User,
                Some("assistant") => Speaker::System,
                other => {
                    return Err(Error::Data(format!("dialogue {id}: unknown speaker {other:?}")));
                }
            };
            let utterance = t["data"]["utterance"].as_str().unwrap_or_default();
            let tokens = tokenize(utterance, &entities);
            if !tokens.is_empty() {
                turns.push(Turn { speaker, tokens, deps: Vec::new() });
            }
        }
        out.push(Dialogue { id, domain, turns, kb });
    }
    Ok(out)
}

/// Standard file names of the release.
pub struct SmdPaths {
    pub train: std::path::PathBuf,
    pub dev: std::path::PathBuf,
    pub test: std::path::PathBuf,
    pub entities: std::path::PathBuf,
}

impl SmdPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("kvret_train_public.json"),
            dev: dir.join("kvret_dev_public.json"),
            test: dir.join("kvret_test_public.json"),
            entities: dir.join("kvret_entities.json"),
        }
    }

    pub fn exists(&self) -> bool {
        [&self.train, &self.dev, &self.test, &self.entities].iter().all(|p| p.is_file())
    }
}

pub fn load_split(path: &Path, ontology: &Ontology) -> Result<Vec<Dialogue>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_dialogues(&text, ontology)
}

pub fn load_entities(path: &Path) -> Result<Ontology> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    load_ontology(&text)
}
