//! Knowledge graph over KB entities with multi-hop attention reasoning.
//!
//! Each hop `k` reads node vectors from `C^k`, writes its readout through
//! `C^{k+1}` (adjacent weight tying), and updates the query with
//! `q^{k+1} = q^k + o^k`. Before either use, node vectors are refined by one
//! round of neighbor self-attention:
//!
//! ```text
//! e_ij  = LeakyReLU_0.2(Vᵀ [C_i ‖ C_j])    j ∈ N_i (N_i includes i)
//! α_ij  = softmax_j(e_ij)
//! C'_i  = Σ_j α_ij C_j
//! p^k_i = softmax_i(q^kᵀ C^k'_i)
//! o^k   = Σ_i p^k_i C^{k+1}'_i
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{InitScheme, ParamId, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

/// One KB fact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KbTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl KbTriple {
    pub fn new(s: impl Into<String>, r: impl Into<String>, o: impl Into<String>) -> Self {
        Self {
            subject: s.into(),
            relation: r.into(),
            object: o.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgNode {
    /// Surface form of the entity.
    pub token: String,
    /// Node id of the subject of the KB row this node belongs to (itself for subjects).
    pub row: usize,
    /// Relation that introduced this node; `None` for subject nodes.
    pub relation: Option<String>,
}

/// Undirected entity graph with self-loops.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: Vec<KgNode>,
    /// `neighbors[i]`, ascending, always containing `i`.
    neighbors: Vec<Vec<usize>>,
    /// Relation labels per undirected edge `(min, max)`.
    edge_labels: BTreeMap<(usize, usize), BTreeSet<String>>,
}

/// Builds the entity graph from triples.
///
/// Subjects get one node per distinct string. Objects get one node per
/// distinct `(value, subject)` pair, so the same value attached to two
/// subjects yields two nodes. Each triple contributes one undirected edge.
pub fn build_kb_graph(triples: &[KbTriple]) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::default();
    let mut subjects: HashMap<String, usize> = HashMap::new();
    let mut objects: HashMap<(String, usize), usize> = HashMap::new();
    let mut adj: Vec<BTreeSet<usize>> = Vec::new();

    fn push(g: &mut KnowledgeGraph, adj: &mut Vec<BTreeSet<usize>>, node: KgNode) -> usize {
        let id = g.nodes.len();
        g.nodes.push(node);
        adj.push(BTreeSet::from([id]));
        id
    }

    for t in triples {
        let s = match subjects.get(&t.subject) {
            Some(&s) => s,
            None => {
                let id = g.nodes.len();
                push(
                    &mut g,
                    &mut adj,
                    KgNode {
                        token: t.subject.clone(),
                        row: id,
                        relation: None,
                    },
                );
                subjects.insert(t.subject.clone(), id);
                id
            }
        };
        let o = match objects.get(&(t.object.clone(), s)) {
            Some(&o) => o,
            None => {
                let id = push(
                    &mut g,
                    &mut adj,
                    KgNode {
                        token: t.object.clone(),
                        row: s,
                        relation: Some(t.relation.clone()),
                    },
                );
                objects.insert((t.object.clone(), s), id);
                id
            }
        };
        adj[s].insert(o);
        adj[o].insert(s);
        g.edge_labels
            .entry((s.min(o), s.max(o)))
            .or_default()
            .insert(t.relation.clone());
    }
    g.neighbors = adj.into_iter().map(|s| s.into_iter().collect()).collect();
    g
}

impl KnowledgeGraph {
    /// A graph from explicit nodes and undirected edges; self-loops are added.
    pub fn from_parts(nodes: Vec<KgNode>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = nodes.len();
        let mut adj: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Input(format!("edge ({a}, {b}) out of range for {n} nodes")));
            }
            adj[a].insert(b);
            adj[b].insert(a);
        }
        Ok(Self {
            nodes,
            neighbors: adj.into_iter().map(|s| s.into_iter().collect()).collect(),
            edge_labels: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[KgNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &KgNode {
        &self.nodes[id]
    }

    pub fn neighbors(&self, id: usize) -> &[usize] {
        &self.neighbors[id]
    }

    pub fn edge_labels(&self, a: usize, b: usize) -> Option<&BTreeSet<String>> {
        self.edge_labels.get(&(a.min(b), a.max(b)))
    }

    /// Ids of nodes whose surface form is `token`, ascending.
    pub fn nodes_with_token(&self, token: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.token == token)
            .map(|(i, _)| i)
            .collect()
    }

    /// All nodes in the KB row rooted at subject node `row`.
    pub fn row_members(&self, row: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.row == row)
            .map(|(i, _)| i)
            .collect()
    }

    /// Row-major `n×n` neighbor mask.
    pub fn adjacency_mask(&self) -> Vec<bool> {
        let n = self.len();
        let mut m = vec![false; n * n];
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                m[i * n + j] = true;
            }
        }
        m
    }

    /// The graph with node `i` renamed to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input("not a permutation of the node ids".into()));
        }
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = KgNode {
                row: perm[node.row],
                ..node.clone()
            };
        }
        let mut neighbors = vec![Vec::new(); n];
        for (old, ns) in self.neighbors.iter().enumerate() {
            let mut mapped: Vec<usize> = ns.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            neighbors[perm[old]] = mapped;
        }
        let edge_labels = self
            .edge_labels
            .iter()
            .map(|(&(a, b), l)| {
                let (a, b) = (perm[a], perm[b]);
                ((a.min(b), a.max(b)), l.clone())
            })
            .collect();
        Ok(Self {
            nodes,
            neighbors,
            edge_labels,
        })
    }
}

/// Hop embeddings `C^1..C^{K+1}` and attention vectors `V^1..V^{K+1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KgParams {
    pub embeddings: Vec<ParamId>,
    pub attention: Vec<ParamId>,
}

impl KgParams {
    pub fn register(
        store: &mut ParamStore,
        entity_vocab: usize,
        d_e: usize,
        hops: usize,
        seed: u64,
    ) -> Result<Self> {
        if hops < 1 {
            return Err(Error::Config("the number of hops K must be at least 1".into()));
        }
        let mut embeddings = Vec::with_capacity(hops + 1);
        let mut attention = Vec::with_capacity(hops + 1);
        for k in 1..=hops + 1 {
            embeddings.push(store.add_init(
                format!("kg.c{k}"),
                &[entity_vocab, d_e],
                seed,
                InitScheme::FanIn,
            )?);
            attention.push(store.add_init(format!("kg.v{k}"), &[2 * d_e], seed, InitScheme::FanIn)?);
        }
        Ok(Self {
            embeddings,
            attention,
        })
    }

    pub fn hops(&self) -> usize {
        self.embeddings.len() - 1
    }
}

/// `α` as a dense `n×n` matrix, zero outside each neighborhood.
pub fn neighbor_attention(
    tape: &mut Tape,
    nodes: Var,
    attention: Var,
    graph: &KnowledgeGraph,
) -> Result<Var> {
    let d_e = tape.value(nodes).cols();
    if tape.value(attention).len() != 2 * d_e {
        return Err(Error::Dimension(format!(
            "attention vector of length {} for node vectors of size {d_e}",
            tape.value(attention).len()
        )));
    }
    let left = tape.slice(attention, 0, d_e)?;
    let right = tape.slice(attention, d_e, d_e)?;
    let as_src = tape.matvec(nodes, left)?;
    let as_dst = tape.matvec(nodes, right)?;
    let logits = tape.outer_add(as_src, as_dst)?;
    let act = tape.leaky_relu(logits, LEAKY_SLOPE)?;
    tape.masked_softmax_rows(act, &graph.adjacency_mask())
}

/// `C'_i = Σ_j α_ij C_j`.
pub fn node_update(tape: &mut Tape, nodes: Var, alpha: Var) -> Result<Var> {
    tape.mix(alpha, nodes)
}

/// Query attention over updated nodes; returns `(logits, p)`.
pub fn query_attend(tape: &mut Tape, query: Var, updated: Var) -> Result<(Var, Var)> {
    let logits = tape.matvec(updated, query)?;
    let p = tape.softmax(logits)?;
    Ok((logits, p))
}

/// `o = Σ_i p_i C'_i`.
pub fn readout(tape: &mut Tape, p: Var, updated_write: Var) -> Result<Var> {
    tape.weighted_sum(p, updated_write)
}

/// Node vectors of one embedding level after neighbor self-attention.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub raw: Var,
    pub alpha: Var,
    pub updated: Var,
    pub embedding: ParamId,
    pub attention: ParamId,
}

/// Updated node vectors for levels `1..=K+1` of one graph.
///
/// These do not depend on the query, so one set serves every query issued
/// against the same graph (encoder query and each decoder step).
#[derive(Clone, Debug)]
pub struct KgLevels {
    pub levels: Vec<Level>,
}

/// Embeds every node at every level and applies neighbor attention.
///
/// `entity_ids[i]` is the embedding row of node `i`.
pub fn prepare_levels(
    tape: &mut Tape,
    store: &ParamStore,
    params: &KgParams,
    graph: &KnowledgeGraph,
    entity_ids: &[usize],
) -> Result<KgLevels> {
    if graph.is_empty() {
        return Err(Error::Input("knowledge graph is empty".into()));
    }
    if entity_ids.len() != graph.len() {
        return Err(Error::Dimension(format!(
            "{} entity ids for {} nodes",
            entity_ids.len(),
            graph.len()
        )));
    }
    let mut levels = Vec::with_capacity(params.embeddings.len());
    for (&emb, &att) in params.embeddings.iter().zip(&params.attention) {
        let table = tape.param(store, emb);
        let v = tape.param(store, att);
        let raw = tape.gather_rows(table, entity_ids)?;
        let alpha = neighbor_attention(tape, raw, v, graph)?;
        let updated = node_update(tape, raw, alpha)?;
        levels.push(Level {
            raw,
            alpha,
            updated,
            embedding: emb,
            attention: att,
        });
    }
    Ok(KgLevels { levels })
}

/// Tape handles for one hop.
#[derive(Clone, Copy, Debug)]
pub struct Hop {
    pub query: Var,
    pub logits: Var,
    pub p: Var,
    pub readout: Var,
    /// Level indices (0-based) read and written by this hop.
    pub read_level: usize,
    pub write_level: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHop {
    pub hops: Vec<Hop>,
    /// Query after the last update, `q^{K+1}`.
    pub final_query: Var,
}

impl MultiHop {
    /// `o^K`.
    pub fn output(&self) -> Var {
        self.hops.last().expect("at least one hop").readout
    }

    /// `p^K`, the graph distribution used for copying.
    pub fn last_p(&self) -> Var {
        self.hops.last().expect("at least one hop").p
    }

    pub fn last_logits(&self) -> Var {
        self.hops.last().expect("at least one hop").logits
    }
}

/// Runs `K` hops from query `q1`.
pub fn multi_hop(tape: &mut Tape, q1: Var, levels: &KgLevels, hops: usize) -> Result<MultiHop> {
    if hops < 1 {
        return Err(Error::Config("the number of hops K must be at least 1".into()));
    }
    if levels.levels.len() < hops + 1 {
        return Err(Error::Config(format!(
            "{hops} hops need {} embedding levels, have {}",
            hops + 1,
            levels.levels.len()
        )));
    }
    let d_e = tape.value(levels.levels[0].updated).cols();
    if tape.value(q1).len() != d_e {
        return Err(Error::Dimension(format!(
            "query of length {} for node vectors of size {d_e}",
            tape.value(q1).len()
        )));
    }
    let mut q = q1;
    let mut out = Vec::with_capacity(hops);
    for k in 0..hops {
        let (logits, p) = query_attend(tape, q, levels.levels[k].updated)?;
        let o = readout(tape, p, levels.levels[k + 1].updated)?;
        out.push(Hop {
            query: q,
            logits,
            p,
            readout: o,
            read_level: k,
            write_level: k + 1,
        });
        q = tape.add(q, o)?;
    }
    Ok(MultiHop {
        hops: out,
        final_query: q,
    })
}

/// Values of one hop, for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub query: Vec<f64>,
    pub p: Vec<f64>,
    pub readout: Vec<f64>,
    /// Neighbor coefficients of the level read at this hop, row-major `n×n`.
    pub alpha: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    pub hops: Vec<HopRecord>,
    pub final_query: Vec<f64>,
}

impl HopTrace {
    pub fn capture(tape: &Tape, run: &MultiHop, levels: &KgLevels) -> Self {
        Self {
            hops: run
                .hops
                .iter()
                .map(|h| HopRecord {
                    query: tape.value(h.query).data().to_vec(),
                    p: tape.value(h.p).data().to_vec(),
                    readout: tape.value(h.readout).data().to_vec(),
                    alpha: tape.value(levels.levels[h.read_level].alpha).data().to_vec(),
                })
                .collect(),
            final_query: tape.value(run.final_query).data().to_vec(),
        }
    }
}
