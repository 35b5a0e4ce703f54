//! Random instances and a plain-loop reference cell shared by the test targets.
#![allow(dead_code)]

use dialkg::autodiff::sigmoid;
use dialkg::dialogue_graph::{build_graph, DepEdge, DialogueGraph, TokenSeq};
use dialkg::encoder::CellParams;
use dialkg::kg::{KgNode, KnowledgeGraph};
use dialkg::params::{seeded_init, InitScheme};
use dialkg::{ParamStore, Tensor};
use rand::Rng;

pub fn vector(n: usize, seed: u64) -> Tensor {
    seeded_init(&[n], seed, InitScheme::UniformRange(1.0))
}

/// Random token sequence with `n_deps` random non-self-loop arcs.
pub fn random_graph<R: Rng>(rng: &mut R, len: usize, n_deps: usize) -> DialogueGraph {
    let tokens: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
    let mut deps = Vec::new();
    if len > 1 {
        for _ in 0..n_deps {
            let h = rng.gen_range(0..len);
            let mut d = rng.gen_range(0..len);
            while d == h {
                d = rng.gen_range(0..len);
            }
            deps.push(DepEdge::new(h, d, "dep"));
        }
    }
    build_graph(TokenSeq::plain(&tokens).unwrap(), &deps).unwrap()
}

/// Random entity graph with `n` nodes and random undirected edges.
pub fn random_kg<R: Rng>(rng: &mut R, n: usize) -> KnowledgeGraph {
    let nodes = (0..n)
        .map(|i| KgNode {
            token: format!("e{i}"),
            row: i,
            relation: None,
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.4) {
                edges.push((a, b));
            }
        }
    }
    KnowledgeGraph::from_parts(nodes, &edges).unwrap()
}

/// Random permutation of `0..n`.
pub fn permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn row_dot(m: &Tensor, row: usize, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (w, v) in m.row(row).iter().zip(x) {
        acc += w * v;
    }
    acc
}

fn apply(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| row_dot(m, i, x)).collect()
}

/// Single-predecessor recurrence over a chain, written out with plain loops.
///
/// Position `t` reads the state of its neighbour in visiting order; the first
/// visited position reads a zero state.
pub fn reference_chain(store: &ParamStore, cell: &CellParams, inputs: &[Vec<f64>], reverse: bool) -> Vec<Vec<f64>> {
    let p = |id| store.get(id).value();
    let (w_r, u_r, w_n, u_n, w_z, u_z) = (p(cell.w_r), p(cell.u_r), p(cell.w_n), p(cell.u_n), p(cell.w_z), p(cell.u_z));
    let v = p(cell.v).data();
    let d = v.len();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    if reverse {
        order.reverse();
    }
    let mut out = vec![Vec::new(); inputs.len()];
    let mut h = vec![0.0; d];
    for t in order {
        let x = &inputs[t];
        let wr = apply(w_r, x);
        let ur = apply(u_r, &h);
        let r: Vec<f64> = (0..d).map(|i| sigmoid(ur[i] + wr[i])).collect();
        let wn = apply(w_n, x);
        let un = apply(u_n, &h);
        let cand: Vec<f64> = (0..d).map(|i| (wn[i] + r[i] * un[i]).tanh()).collect();
        let q = apply(w_z, x);
        let key = apply(u_z, &h);
        let score = |k: &[f64]| {
            let act: Vec<f64> = (0..d).map(|i| (k[i] + q[i]).tanh()).collect();
            let mut acc = 0.0;
            for i in 0..d {
                acc += act[i] * v[i];
            }
            acc
        };
        let (e0, e1) = (score(&key), score(&cand));
        let m = e0.max(e1);
        let (x0, x1) = ((e0 - m).exp(), (e1 - m).exp());
        let z = x0 + x1;
        let (a0, a1) = (x0 / z, x1 / z);
        h = (0..d).map(|i| a0 * key[i] + a1 * cand[i]).collect();
        out[t] = h.clone();
    }
    out
}
