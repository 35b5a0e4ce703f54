//! Per-step attention dumps for trained models.

use serde::{Deserialize, Serialize};

use crate::corpus::{is_tag, TrainingExample};
use crate::error::Result;
use crate::kg::HopTrace;
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sketch_token: String,
    pub is_tag: bool,
    pub emitted: String,
    pub copied_node: Option<usize>,
    /// Node with the largest graph weight, whether or not it was copied.
    pub graph_argmax: Option<usize>,
    pub p_graph: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub dialogue: String,
    pub turn: usize,
    pub history: Vec<String>,
    pub nodes: Vec<String>,
    pub gold_sketch: Vec<String>,
    pub gold_labels: Vec<Option<usize>>,
    pub steps: Vec<StepRecord>,
    /// Hops run from the encoder query.
    pub encoder_hops: Option<HopTrace>,
}

pub fn inspect(model: &Model, ex: &TrainingExample, max_len: usize) -> Result<AttentionDump> {
    let p = model.prepare(ex)?;
    let (decoded, trace) = model.decode(&p, max_len)?;
    let steps = decoded
        .steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let token = model.vocab.token(s.choice.sketch_id).to_string();
            StepRecord {
                step: i,
                is_tag: is_tag(&token),
                sketch_token: token,
                emitted: s.choice.surface.clone(),
                copied_node: s.choice.copied,
                graph_argmax: s.p_graph.as_deref().and_then(crate::tensor::argmax),
                p_graph: s.p_graph.clone(),
            }
        })
        .collect();
    Ok(AttentionDump {
        dialogue: ex.dialogue_id.clone(),
        turn: ex.turn,
        history: ex.history.tokens().to_vec(),
        nodes: ex.graph.nodes().iter().map(|n| n.token.clone()).collect(),
        gold_sketch: ex.sketch.clone(),
        gold_labels: ex.labels.clone(),
        steps,
        encoder_hops: trace,
    })
}

impl AttentionDump {
    /// Plain-text table: one row per step, one column per node.
    pub fn to_table(&self) -> String {
        let mut s = format!("dialogue {} turn {}\n", self.dialogue, self.turn);
        s.push_str(&format!("{:<4} {:<18} {:<24}", "step", "sketch", "emitted"));
        for (i, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!(" {i}:{n}"));
        }
        s.push('\n');
        for r in &self.steps {
            s.push_str(&format!("{:<4} {:<18} {:<24}", r.step, r.sketch_token, r.emitted));
            if let Some(p) = &r.p_graph {
                for (i, w) in p.iter().enumerate() {
                    let mark = if r.copied_node == Some(i) { "*" } else { "" };
                    s.push_str(&format!(" {w:.3}{mark}"));
                }
            }
            s.push('\n');
        }
        s
    }
}
