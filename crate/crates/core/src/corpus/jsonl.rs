//! Native JSON-lines corpus format.
//!
//! Dialogue file, one object per line:
//!
//! ```json
//! {"id": "d1", "domain": "navigate",
//!  "turns": [{"speaker": "user", "tokens": ["find", "a", "garage"],
//!             "deps": [{"head": 0, "dependent": 2, "label": "dobj"}]},
//!            {"speaker": "system", "tokens": ["palo_alto_garage", "is", "close"]}],
//!  "kb": [{"subject": "palo_alto_garage", "relation": "distance", "object": "1_miles"}]}
//! ```
//!
//! Dependency file, one object per turn, overriding inline arcs:
//!
//! ```json
//! {"dialogue": "d1", "turn": 0, "tokens": ["find", "a", "garage"],
//!  "deps": [{"head": 0, "dependent": 2, "label": "dobj"}]}
//! ```
//!
//! Blank lines are skipped.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dialogue;
use crate::dialogue_graph::DepEdge;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnGraph {
    pub dialogue: String,
    pub turn: usize,
    pub tokens: Vec<String>,
    pub deps: Vec<DepEdge>,
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads dialogues, checking dependency arcs against turn lengths.
pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    let dialogues: Vec<Dialogue> = read_lines(path)?;
    for d in &dialogues {
        for (ti, t) in d.turns.iter().enumerate() {
            check_deps(&d.id, ti, t.tokens.len(), &t.deps)?;
        }
    }
    Ok(dialogues)
}

fn check_deps(id: &str, turn: usize, n: usize, deps: &[DepEdge]) -> Result<()> {
    for (k, e) in deps.iter().enumerate() {
        if e.head >= n || e.dependent >= n {
            return Err(Error::Data(format!(
                "dialogue {id} turn {turn}: dependency edge {k} ({} -> {}) outside {n} tokens",
                e.head, e.dependent
            )));
        }
    }
    Ok(())
}

pub fn load_turn_graphs(path: &Path) -> Result<Vec<TurnGraph>> {
    read_lines(path)
}

/// Replaces inline arcs with those of the dependency file.
///
/// Each record must name an existing turn and repeat its tokens exactly.
pub fn attach_turn_graphs(dialogues: &mut [Dialogue], graphs: &[TurnGraph]) -> Result<()> {
    let by_id: HashMap<String, usize> =
        dialogues.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
    for g in graphs {
        let di = *by_id
            .get(&g.dialogue)
            .ok_or_else(|| Error::Data(format!("dependency record for unknown dialogue {}", g.dialogue)))?;
        let turn = dialogues[di].turns.get_mut(g.turn).ok_or_else(|| {
            Error::Data(format!("dialogue {} has no turn {}", g.dialogue, g.turn))
        })?;
        if turn.tokens != g.tokens {
            return Err(Error::Data(format!(
                "dialogue {} turn {}: dependency record tokens differ from the dialogue",
                g.dialogue, g.turn
            )));
        }
        check_deps(&g.dialogue, g.turn, g.tokens.len(), &g.deps)?;
        turn.deps = g.deps.clone();
    }
    Ok(())
}

pub fn write_dialogues<W: Write>(mut w: W, dialogues: &[Dialogue]) -> Result<()> {
    for d in dialogues {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::toy_corpus;

    #[test]
    fn roundtrip_and_errors() {
        let (dialogues, _) = toy_corpus(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut buf = Vec::new();
        write_dialogues(&mut buf, &dialogues).unwrap();
        buf.extend_from_slice(b"\n");
        std::fs::write(&path, &buf).unwrap();
        assert_eq!(load_dialogues(&path).unwrap(), dialogues);

        std::fs::write(&path, "{\"id\": 3}\n").unwrap();
        let err = load_dialogues(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn dependency_file_overrides_and_validates() {
        let (mut dialogues, _) = toy_corpus(1);
        let t0 = dialogues[0].turns[0].tokens.clone();
        let rec = TurnGraph {
            dialogue: dialogues[0].id.clone(),
            turn: 0,
            tokens: t0.clone(),
            deps: vec![DepEdge::new(0, t0.len() - 1, "dep")],
        };
        attach_turn_graphs(&mut dialogues, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(dialogues[0].turns[0].deps, rec.deps);

        let mut bad = rec.clone();
        bad.deps = vec![DepEdge::new(0, 99, "dep")];
        assert!(attach_turn_graphs(&mut dialogues, &[bad]).is_err());
        let mut bad = rec;
        bad.tokens.push("extra".into());
        assert!(attach_turn_graphs(&mut dialogues, &[bad]).is_err());
    }
}
