//! Dialogue graphs: tokens joined by sequential and dependency edges, and the
//! left-to-right / right-to-left views the recurrent encoder walks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

/// Tokens of a dialogue history with per-token speaker and turn annotations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    tokens: Vec<String>,
    speakers: Vec<Speaker>,
    turns: Vec<usize>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<String>, speakers: Vec<Speaker>, turns: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if speakers.len() != tokens.len() || turns.len() != tokens.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} speaker and {} turn annotations",
                tokens.len(),
                speakers.len(),
                turns.len()
            )));
        }
        Ok(Self {
            tokens,
            speakers,
            turns,
        })
    }

    /// A single-speaker, single-turn sequence.
    pub fn plain<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let n = tokens.len();
        Self::new(
            tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            vec![Speaker::User; n],
            vec![0; n],
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn speakers(&self) -> &[Speaker] {
        &self.speakers
    }

    pub fn turns(&self) -> &[usize] {
        &self.turns
    }
}

/// A dependency arc between token positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepEdge {
    pub head: usize,
    pub dependent: usize,
    pub label: String,
}

impl DepEdge {
    pub fn new(head: usize, dependent: usize, label: impl Into<String>) -> Self {
        Self {
            head,
            dependent,
            label: label.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    Next,
    Pre,
    /// Head to dependent.
    Dep(String),
    /// Dependent to head.
    DepInv(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
}

/// Tokens plus at most one typed edge per ordered position pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueGraph {
    tokens: TokenSeq,
    edges: Vec<Edge>,
}

/// Merges sequential `Next`/`Pre` edges with bidirectional dependency edges.
///
/// A dependency arc between adjacent tokens collapses into the sequential
/// edge already present for that pair; duplicate arcs collapse likewise.
pub fn build_graph(tokens: TokenSeq, deps: &[DepEdge]) -> Result<DialogueGraph> {
    let n = tokens.len();
    for (i, d) in deps.iter().enumerate() {
        if d.head >= n || d.dependent >= n {
            return Err(Error::Input(format!(
                "dependency edge {i} ({} -> {}) out of range for {n} tokens",
                d.head, d.dependent
            )));
        }
        if d.head == d.dependent {
            return Err(Error::Input(format!(
                "dependency edge {i} is a self-loop at position {}",
                d.head
            )));
        }
    }
    let mut edges: BTreeMap<(usize, usize), EdgeKind> = BTreeMap::new();
    for i in 0..n.saturating_sub(1) {
        edges.insert((i, i + 1), EdgeKind::Next);
        edges.insert((i + 1, i), EdgeKind::Pre);
    }
    for d in deps {
        edges
            .entry((d.head, d.dependent))
            .or_insert_with(|| EdgeKind::Dep(d.label.clone()));
        edges
            .entry((d.dependent, d.head))
            .or_insert_with(|| EdgeKind::DepInv(d.label.clone()));
    }
    let edges = edges
        .into_iter()
        .map(|((src, dst), kind)| Edge { src, dst, kind })
        .collect();
    Ok(DialogueGraph { tokens, edges })
}

impl DialogueGraph {
    pub fn tokens(&self) -> &TokenSeq {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Edges sorted by `(src, dst)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&Edge> {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst)))
            .ok()
            .map(|i| &self.edges[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Predecessor sets `P(t)` for one traversal direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionalView {
    pub direction: Direction,
    /// `predecessors[t]`: source positions of edges entering `t`, ascending.
    pub predecessors: Vec<Vec<usize>>,
}

impl DirectionalView {
    pub fn len(&self) -> usize {
        self.predecessors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predecessors.is_empty()
    }

    /// Positions in the order the encoder visits them.
    pub fn visit_order(&self) -> Vec<usize> {
        match self.direction {
            Direction::Forward => (0..self.len()).collect(),
            Direction::Backward => (0..self.len()).rev().collect(),
        }
    }

    pub fn max_in_degree(&self) -> usize {
        self.predecessors.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Forward view keeps edges with `src < dst`, backward view those with `src > dst`.
pub fn split_directional(g: &DialogueGraph) -> (DirectionalView, DirectionalView) {
    let n = g.len();
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for e in &g.edges {
        if e.src < e.dst {
            fwd[e.dst].push(e.src);
        } else {
            bwd[e.dst].push(e.src);
        }
    }
    for p in fwd.iter_mut().chain(bwd.iter_mut()) {
        p.sort_unstable();
    }
    (
        DirectionalView {
            direction: Direction::Forward,
            predecessors: fwd,
        },
        DirectionalView {
            direction: Direction::Backward,
            predecessors: bwd,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Hidden state of the token at this position.
    Node(usize),
    /// Zero-state predecessor standing in at a sequence boundary.
    Virtual,
    Pad,
}

/// Fixed-width predecessor table with a real/pad mask per slot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedView {
    pub direction: Direction,
    pub k_max: usize,
    pub slots: Vec<Vec<Slot>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedView {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn visit_order(&self) -> Vec<usize> {
        match self.direction {
            Direction::Forward => (0..self.len()).collect(),
            Direction::Backward => (0..self.len()).rev().collect(),
        }
    }
}

/// Pads every predecessor list to `k_max` slots.
///
/// Empty lists get one virtual zero-state predecessor. Lists longer than
/// `k_max` keep the `k_max` positions nearest to `t`.
pub fn pad_predecessors(view: &DirectionalView, k_max: usize) -> Result<PaddedView> {
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let mut slots = Vec::with_capacity(view.len());
    let mut mask = Vec::with_capacity(view.len());
    for (t, preds) in view.predecessors.iter().enumerate() {
        let mut row = Vec::with_capacity(k_max);
        if preds.is_empty() {
            row.push(Slot::Virtual);
        } else {
            let mut kept = preds.clone();
            if kept.len() > k_max {
                kept.sort_by_key(|&p| (p.abs_diff(t), p));
                kept.truncate(k_max);
                kept.sort_unstable();
            }
            row.extend(kept.into_iter().map(Slot::Node));
        }
        let real = row.len();
        row.resize(k_max, Slot::Pad);
        let mut m = vec![false; k_max];
        m[..real].iter_mut().for_each(|v| *v = true);
        slots.push(row);
        mask.push(m);
    }
    Ok(PaddedView {
        direction: view.direction,
        k_max,
        slots,
        mask,
    })
}

/// Shares of edge path distances `|i - j|` in the buckets
/// `=1`, `2..=9`, `10..=14` and `>=15`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDistanceReport {
    pub counts: [usize; 4],
    pub total: usize,
    pub percentages: [f64; 4],
}

pub const DISTANCE_BUCKETS: [&str; 4] = ["=1", "2-9", "10-14", ">=15"];

pub fn distance_bucket(distance: usize) -> usize {
    match distance {
        0 | 1 => 0,
        2..=9 => 1,
        10..=14 => 2,
        _ => 3,
    }
}

/// Edge path distance distribution; each undirected edge counts once.
pub fn edge_distance_distribution<'a, I>(graphs: I) -> Result<EdgeDistanceReport>
where
    I: IntoIterator<Item = &'a DialogueGraph>,
{
    let mut counts = [0usize; 4];
    for g in graphs {
        for e in g.edges.iter().filter(|e| e.src < e.dst) {
            counts[distance_bucket(e.dst - e.src)] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("corpus has no edges".into()));
    }
    let percentages = counts.map(|c| 100.0 * c as f64 / total as f64);
    Ok(EdgeDistanceReport {
        counts,
        total,
        percentages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn supermarket() -> DialogueGraph {
        let toks = TokenSeq::plain(&["there", "is", "a", "supermarket"]).unwrap();
        build_graph(toks, &[DepEdge::new(1, 3, "nsubj")]).unwrap()
    }

    #[test]
    fn two_tokens_without_deps() {
        let g = build_graph(TokenSeq::plain(&["a", "b"]).unwrap(), &[]).unwrap();
        assert_eq!(
            g.edges(),
            &[
                Edge { src: 0, dst: 1, kind: EdgeKind::Next },
                Edge { src: 1, dst: 0, kind: EdgeKind::Pre },
            ]
        );
    }

    #[test]
    fn dependency_edges_are_mirrored() {
        let g = supermarket();
        assert_eq!(g.edge(1, 3).unwrap().kind, EdgeKind::Dep("nsubj".into()));
        assert_eq!(g.edge(3, 1).unwrap().kind, EdgeKind::DepInv("nsubj".into()));
        let next = g.edges().iter().filter(|e| e.kind == EdgeKind::Next).count();
        let pre = g.edges().iter().filter(|e| e.kind == EdgeKind::Pre).count();
        assert_eq!((next, pre, g.edges().len()), (3, 3, 8));
    }

    #[test]
    fn bad_dependency_edges() {
        let toks = TokenSeq::plain(&["a", "b", "c"]).unwrap();
        let err = build_graph(toks.clone(), &[DepEdge::new(0, 1, "x"), DepEdge::new(2, 2, "y")])
            .unwrap_err();
        assert!(err.to_string().contains("edge 1"), "{err}");
        let err = build_graph(toks, &[DepEdge::new(0, 7, "x")]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn adjacent_dependency_collapses_into_sequential_edge() {
        let toks = TokenSeq::plain(&["there", "is"]).unwrap();
        let g = build_graph(toks, &[DepEdge::new(1, 0, "expl"), DepEdge::new(1, 0, "expl")]).unwrap();
        assert_eq!(g.edges().len(), 2);
    }

    #[test]
    fn chain_views() {
        let g = build_graph(TokenSeq::plain(&["a", "b", "c"]).unwrap(), &[]).unwrap();
        let (f, b) = split_directional(&g);
        assert_eq!(f.predecessors, vec![vec![], vec![0], vec![1]]);
        assert_eq!(b.predecessors, vec![vec![1], vec![2], vec![]]);
        assert_eq!(b.visit_order(), vec![2, 1, 0]);
    }

    #[test]
    fn dependency_joins_forward_predecessors() {
        let (f, b) = split_directional(&supermarket());
        assert_eq!(f.predecessors[3], vec![1, 2]);
        assert_eq!(b.predecessors[1], vec![2, 3]);
    }

    #[test]
    fn padding_and_boundary() {
        let view = DirectionalView {
            direction: Direction::Forward,
            predecessors: vec![vec![], vec![0], vec![0, 1]],
        };
        let p = pad_predecessors(&view, 4).unwrap();
        assert_eq!(p.slots[2], vec![Slot::Node(0), Slot::Node(1), Slot::Pad, Slot::Pad]);
        assert_eq!(p.mask[2], vec![true, true, false, false]);
        assert_eq!(p.slots[0], vec![Slot::Virtual, Slot::Pad, Slot::Pad, Slot::Pad]);
        assert_eq!(p.mask[0], vec![true, false, false, false]);
    }

    #[test]
    fn truncation_keeps_nearest() {
        let mut preds = vec![Vec::new(); 10];
        preds[9] = vec![0, 2, 5, 7, 8];
        let view = DirectionalView {
            direction: Direction::Forward,
            predecessors: preds,
        };
        let p = pad_predecessors(&view, 4).unwrap();
        assert_eq!(
            p.slots[9],
            vec![Slot::Node(2), Slot::Node(5), Slot::Node(7), Slot::Node(8)]
        );
        let worst_kept = 9 - 2;
        assert!(view.predecessors[9]
            .iter()
            .filter(|p| !matches!(p, 2 | 5 | 7 | 8))
            .all(|&dropped| 9 - dropped > worst_kept));
    }

    #[test]
    fn edge_distances() {
        let g = supermarket();
        assert_eq!(g.edge(0, 1).map(|e| e.dst - e.src), Some(1));
        assert_eq!(g.edge(1, 3).map(|e| e.dst - e.src), Some(2));
        let r = edge_distance_distribution([&g]).unwrap();
        assert_eq!(r.counts, [3, 1, 0, 0]);
        assert!((r.percentages.iter().sum::<f64>() - 100.0).abs() < 1e-9);

        let chain = build_graph(TokenSeq::plain(&["a"; 12]).unwrap(), &[]).unwrap();
        let r = edge_distance_distribution([&chain]).unwrap();
        assert_eq!(r.percentages, [100.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(
            [1, 2, 9, 10, 14, 15, 40].map(distance_bucket),
            [0, 1, 1, 2, 2, 3, 3]
        );
    }
}
