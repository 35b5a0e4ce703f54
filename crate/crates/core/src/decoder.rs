//! GRU sketch decoder with a graph copy head.
//!
//! ```text
//! h_0     = [h^e ‖ o^K]
//! z       = σ(W_z x + U_z h + b_z)
//! r       = σ(W_r x + U_r h + b_r)
//! ñ       = tanh(W_n x + U_n (r ⊙ h) + b_n)
//! h_t     = (1 − z) ⊙ h_{t−1} + z ⊙ ñ
//! P_vocab = softmax(W_o h_t)
//! P_graph = p^K of a multi-hop pass queried with W_q h_t
//! ```

use crate::autodiff::{Tape, Var};
use crate::corpus::{is_tag, Vocabulary};
use crate::error::{Error, Result};
use crate::kg::{multi_hop, KgLevels, KnowledgeGraph, MultiHop};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    /// Output projection `W_o : hidden → |V|`.
    pub w_o: ParamId,
    /// Query projection `W_q : hidden → d_e`.
    pub w_q: ParamId,
}

impl DecoderParams {
    pub fn register(
        store: &mut ParamStore,
        d_in: usize,
        hidden: usize,
        vocab: usize,
        d_e: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut m = |name: &str, shape: &[usize], scheme| {
            store.add_init(format!("dec.{name}"), shape, seed, scheme)
        };
        Ok(Self {
            w_z: m("w_z", &[hidden, d_in], InitScheme::FanIn)?,
            u_z: m("u_z", &[hidden, hidden], InitScheme::FanIn)?,
            b_z: m("b_z", &[hidden], InitScheme::Zeros)?,
            w_r: m("w_r", &[hidden, d_in], InitScheme::FanIn)?,
            u_r: m("u_r", &[hidden, hidden], InitScheme::FanIn)?,
            b_r: m("b_r", &[hidden], InitScheme::Zeros)?,
            w_n: m("w_n", &[hidden, d_in], InitScheme::FanIn)?,
            u_n: m("u_n", &[hidden, hidden], InitScheme::FanIn)?,
            b_n: m("b_n", &[hidden], InitScheme::Zeros)?,
            w_o: m("w_o", &[vocab, hidden], InitScheme::FanIn)?,
            w_q: m("w_q", &[d_e, hidden], InitScheme::FanIn)?,
        })
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> DecoderVars {
        let mut p = |id| tape.param(store, id);
        DecoderVars {
            w_z: p(self.w_z),
            u_z: p(self.u_z),
            b_z: p(self.b_z),
            w_r: p(self.w_r),
            u_r: p(self.u_r),
            b_r: p(self.b_r),
            w_n: p(self.w_n),
            u_n: p(self.u_n),
            b_n: p(self.b_n),
            w_o: p(self.w_o),
            w_q: p(self.w_q),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_n: Var,
    pub u_n: Var,
    pub b_n: Var,
    pub w_o: Var,
    pub w_q: Var,
}

/// `h_0 = [h^e ‖ o^K]`.
pub fn init_hidden(tape: &mut Tape, h_e: Var, o_k: Var) -> Result<Var> {
    tape.concat(&[h_e, o_k])
}

fn gate(tape: &mut Tape, w: Var, u: Var, b: Var, x: Var, h: Var) -> Result<Var> {
    let wx = tape.matvec(w, x)?;
    let uh = tape.matvec(u, h)?;
    let s = tape.add(wx, uh)?;
    tape.add(s, b)
}

pub fn gru_step(tape: &mut Tape, dv: &DecoderVars, x: Var, h_prev: Var) -> Result<Var> {
    let z_pre = gate(tape, dv.w_z, dv.u_z, dv.b_z, x, h_prev)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, dv.w_r, dv.u_r, dv.b_r, x, h_prev)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h_prev)?;
    let n_pre = gate(tape, dv.w_n, dv.u_n, dv.b_n, x, rh)?;
    let n = tape.tanh(n_pre)?;
    let ones = Tensor::filled(tape.value(z).shape(), 1.0);
    let ones = tape.constant(ones);
    let keep = tape.sub(ones, z)?;
    let kept = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, n)?;
    tape.add(kept, new)
}

pub fn vocab_logits(tape: &mut Tape, dv: &DecoderVars, h: Var) -> Result<Var> {
    tape.matvec(dv.w_o, h)
}

pub fn vocab_dist(tape: &mut Tape, dv: &DecoderVars, h: Var) -> Result<Var> {
    let logits = vocab_logits(tape, dv, h)?;
    tape.softmax(logits)
}

/// Multi-hop pass queried by `W_q h`; `None` when there is no graph.
pub fn graph_dist(
    tape: &mut Tape,
    dv: &DecoderVars,
    h: Var,
    levels: Option<&KgLevels>,
    hops: usize,
) -> Result<Option<MultiHop>> {
    let Some(levels) = levels else {
        return Ok(None);
    };
    let q = tape.matvec(dv.w_q, h)?;
    multi_hop(tape, q, levels, hops).map(Some)
}

/// What one decoding step emits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Choice {
    /// Argmax of `P_vocab`; fed back as the next input.
    pub sketch_id: usize,
    /// Token placed in the surface response.
    pub surface: String,
    /// Node copied when the sketch token is a tag.
    pub copied: Option<usize>,
    /// A tag was predicted with no graph to copy from.
    pub copy_failed: bool,
}

/// Generates the argmax word, or copies the argmax node when that word is a tag.
pub fn copy_or_generate(
    p_vocab: &[f64],
    p_graph: Option<&[f64]>,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
) -> Choice {
    let sketch_id = argmax(p_vocab).expect("vocabulary distribution is non-empty");
    let word = vocab.token(sketch_id);
    if !is_tag(word) {
        return Choice {
            sketch_id,
            surface: word.to_string(),
            copied: None,
            copy_failed: false,
        };
    }
    match p_graph.and_then(argmax) {
        Some(node) => Choice {
            sketch_id,
            surface: graph.node(node).token.clone(),
            copied: Some(node),
            copy_failed: false,
        },
        None => Choice {
            sketch_id,
            surface: word.to_string(),
            copied: None,
            copy_failed: true,
        },
    }
}

/// Per-step cross-entropy terms collected over any number of sequences.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub vocab: Vec<Var>,
    pub graph: Vec<Var>,
}

impl LossTerms {
    /// Adds the terms of one real timestep.
    ///
    /// The graph term is skipped when `label` is `None` or the graph is empty;
    /// a label outside the graph is a data error naming the timestep.
    pub fn push_step(
        &mut self,
        tape: &mut Tape,
        step: usize,
        vocab_logits: Var,
        target: usize,
        graph_logits: Option<Var>,
        label: Option<usize>,
    ) -> Result<()> {
        let n_vocab = tape.value(vocab_logits).len();
        if target >= n_vocab {
            return Err(Error::Data(format!(
                "timestep {step}: target id {target} outside vocabulary of {n_vocab}"
            )));
        }
        self.vocab.push(tape.cross_entropy(vocab_logits, target)?);
        if let Some(label) = label {
            let Some(gl) = graph_logits else {
                return Err(Error::Data(format!(
                    "timestep {step}: graph label {label} but the knowledge graph is empty"
                )));
            };
            let n = tape.value(gl).len();
            if label >= n {
                return Err(Error::Data(format!(
                    "timestep {step}: graph label {label} outside {n} nodes"
                )));
            }
            self.graph.push(tape.cross_entropy(gl, label)?);
        }
        Ok(())
    }

    pub fn extend(&mut self, other: LossTerms) {
        self.vocab.extend(other.vocab);
        self.graph.extend(other.graph);
    }
}

/// Mean vocabulary cross-entropy plus mean graph cross-entropy over labeled steps.
pub fn joint_loss(tape: &mut Tape, terms: &LossTerms) -> Result<Var> {
    if terms.vocab.is_empty() {
        return Err(Error::Input("no decoder timesteps to score".into()));
    }
    let vs = tape.sum_scalars(&terms.vocab)?;
    let vocab = tape.scale(vs, 1.0 / terms.vocab.len() as f64)?;
    if terms.graph.is_empty() {
        return Ok(vocab);
    }
    let gs = tape.sum_scalars(&terms.graph)?;
    let graph = tape.scale(gs, 1.0 / terms.graph.len() as f64)?;
    tape.add(vocab, graph)
}

/// One greedy step as recorded for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedStep {
    pub choice: Choice,
    pub p_graph: Option<Vec<f64>>,
}

/// Greedy decoding with sketch-token feedback.
///
/// `embed` is the word-embedding table; decoding starts from `start_id` and
/// stops after emitting `end_id` (not included) or after `max_len` steps.
#[allow(clippy::too_many_arguments)]
pub fn greedy_decode(
    tape: &mut Tape,
    dv: &DecoderVars,
    embed: Var,
    h0: Var,
    levels: Option<&KgLevels>,
    hops: usize,
    vocab: &Vocabulary,
    graph: &KnowledgeGraph,
    start_id: usize,
    end_id: usize,
    max_len: usize,
) -> Result<Vec<DecodedStep>> {
    let mut steps = Vec::new();
    let mut h = h0;
    let mut prev = start_id;
    for _ in 0..max_len {
        let x = tape.row(embed, prev)?;
        h = gru_step(tape, dv, x, h)?;
        let pv = vocab_dist(tape, dv, h)?;
        let run = graph_dist(tape, dv, h, levels, hops)?;
        let p_graph = run.map(|r| tape.value(r.last_p()).data().to_vec());
        let choice = copy_or_generate(tape.value(pv).data(), p_graph.as_deref(), vocab, graph);
        if choice.sketch_id == end_id {
            break;
        }
        prev = choice.sketch_id;
        steps.push(DecodedStep { choice, p_graph });
    }
    Ok(steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use crate::kg::{build_kb_graph, prepare_levels, KbTriple, KgParams};

    fn zeroed(store: &mut ParamStore) {
        for p in store.iter_mut() {
            p.value_mut().fill(0.0);
        }
    }

    #[test]
    fn init_hidden_concatenates() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let h = init_hidden(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, 2, 3, 5, 2, 1).unwrap();
        zeroed(&mut store);
        let mut tape = Tape::new();
        let dv = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::vector(vec![0.7, -0.2]));
        let h = tape.constant(Tensor::vector(vec![1.0, -2.0, 4.0]));
        let out = gru_step(&mut tape, &dv, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -1.0, 2.0]);
        let zero = tape.constant(Tensor::zeros(&[3]));
        let out = gru_step(&mut tape, &dv, x, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let pv = vocab_dist(&mut tape, &dv, h).unwrap();
        assert!(tape.value(pv).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn gru_matches_scalar_evaluation() {
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, 2, 2, 3, 2, 9).unwrap();
        for (i, par) in store.iter_mut().enumerate() {
            let n = par.value().len();
            let vals: Vec<f64> = (0..n).map(|j| ((i * 7 + j * 3) % 11) as f64 / 10.0 - 0.5).collect();
            par.value_mut().data_mut().copy_from_slice(&vals);
        }
        let get = |id: ParamId| store.get(id).value().data().to_vec();
        let (xv, hv) = ([0.3, -0.8], [0.6, 0.1]);
        let lin = |w: &[f64], u: &[f64], b: &[f64], x: &[f64], h: &[f64], i: usize| {
            w[i * 2] * x[0] + w[i * 2 + 1] * x[1] + u[i * 2] * h[0] + u[i * 2 + 1] * h[1] + b[i]
        };
        let (wz, uz, bz) = (get(p.w_z), get(p.u_z), get(p.b_z));
        let (wr, ur, br) = (get(p.w_r), get(p.u_r), get(p.b_r));
        let (wn, un, bn) = (get(p.w_n), get(p.u_n), get(p.b_n));
        let r: Vec<f64> = (0..2).map(|i| sigmoid(lin(&wr, &ur, &br, &xv, &hv, i))).collect();
        let rh = [r[0] * hv[0], r[1] * hv[1]];
        let expect: Vec<f64> = (0..2)
            .map(|i| {
                let z = sigmoid(lin(&wz, &uz, &bz, &xv, &hv, i));
                let n = lin(&wn, &un, &bn, &xv, &rh, i).tanh();
                (1.0 - z) * hv[i] + z * n
            })
            .collect();
        let mut tape = Tape::new();
        let dv = p.bind(&mut tape, &store);
        let x = tape.constant(Tensor::vector(xv.to_vec()));
        let h = tape.constant(Tensor::vector(hv.to_vec()));
        let out = gru_step(&mut tape, &dv, x, h).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_softmax_of_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![0.0, 2f64.ln(), 4f64.ln()]));
        let p = tape.softmax(l).unwrap();
        for (a, b) in tape.value(p).data().iter().zip([1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn small_vocab() -> Vocabulary {
        Vocabulary::from_words(
            ["<pad>", "<sos>", "<eos>", "<unk>", "@poi", "is", "away"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn copy_rule() {
        let v = small_vocab();
        let g = build_kb_graph(&[KbTriple::new("palo_alto_garage", "distance", "1_miles")]);
        let pv = [0.0, 0.0, 0.1, 0.0, 0.6, 0.2, 0.1];
        let c = copy_or_generate(&pv, Some(&[0.7, 0.3]), &v, &g);
        assert_eq!(c.surface, "palo_alto_garage");
        assert_eq!(c.copied, Some(0));
        let pv2 = [0.0, 0.0, 0.1, 0.0, 0.2, 0.6, 0.1];
        let c = copy_or_generate(&pv2, Some(&[0.7, 0.3]), &v, &g);
        assert_eq!((c.surface.as_str(), c.copied), ("is", None));
        let empty = KnowledgeGraph::default();
        let c = copy_or_generate(&pv, None, &v, &empty);
        assert_eq!(c.surface, "@poi");
        assert!(c.copy_failed);
        let tie = [0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0];
        assert_eq!(copy_or_generate(&tie, Some(&[0.5, 0.5]), &v, &g).copied, Some(0));
    }

    #[test]
    fn uniform_vocab_loss_is_log_four() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[4]));
        let mut terms = LossTerms::default();
        terms.push_step(&mut tape, 0, l, 2, None, None).unwrap();
        let loss = joint_loss(&mut tape, &terms).unwrap();
        assert!((tape.scalar(loss) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_predictions_give_near_zero_loss() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![-800.0, 0.0, -800.0]));
        let g = tape.constant(Tensor::vector(vec![0.0, -800.0]));
        let mut terms = LossTerms::default();
        terms.push_step(&mut tape, 0, l, 1, Some(g), Some(0)).unwrap();
        let loss = joint_loss(&mut tape, &terms).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn loss_matches_resummation_and_checks_labels() {
        let mut tape = Tape::new();
        let rows = [vec![0.2, -0.4, 1.0], vec![0.5, 0.5, -1.0], vec![-0.3, 0.9, 0.1]];
        let glog = [vec![1.0, 0.0], vec![0.3, -0.2], vec![0.0, 0.0]];
        let targets = [2, 0, 1];
        let labels = [Some(0), None, Some(1)];
        let mut terms = LossTerms::default();
        for t in 0..3 {
            let l = tape.constant(Tensor::vector(rows[t].clone()));
            let g = tape.constant(Tensor::vector(glog[t].clone()));
            terms.push_step(&mut tape, t, l, targets[t], Some(g), labels[t]).unwrap();
        }
        let loss = joint_loss(&mut tape, &terms).unwrap();
        let loss = tape.scalar(loss);
        let nll = |row: &[f64], y: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[y].exp() / z).ln()
        };
        let v: f64 = (0..3).map(|t| nll(&rows[t], targets[t])).sum::<f64>() / 3.0;
        let g = (nll(&glog[0], 0) + nll(&glog[2], 1)) / 2.0;
        assert!((loss - (v + g)).abs() < 1e-12);

        let l = tape.constant(Tensor::zeros(&[3]));
        let g = tape.constant(Tensor::zeros(&[2]));
        let err = terms.push_step(&mut tape, 7, l, 0, Some(g), Some(5)).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("timestep 7")));
    }

    #[test]
    fn graph_dist_consistent_with_multi_hop() {
        let mut store = ParamStore::new();
        let dp = DecoderParams::register(&mut store, 3, 6, 7, 4, 2).unwrap();
        let kp = KgParams::register(&mut store, 5, 4, 2, 3).unwrap();
        let g = build_kb_graph(&[
            KbTriple::new("a", "r", "b"),
            KbTriple::new("a", "s", "c"),
            KbTriple::new("d", "r", "b"),
        ]);
        let mut tape = Tape::new();
        let dv = dp.bind(&mut tape, &store);
        let levels = prepare_levels(&mut tape, &store, &kp, &g, &[1, 2, 3, 4, 2]).unwrap();
        let h = tape.constant(Tensor::vector(vec![0.1, -0.3, 0.5, 0.2, 0.0, -0.7]));
        let run = graph_dist(&mut tape, &dv, h, Some(&levels), 2).unwrap().unwrap();
        let q = tape.matvec(dv.w_q, h).unwrap();
        let p_run = tape.value(run.last_p()).clone();
        let direct = multi_hop(&mut tape, q, &levels, 2).unwrap();
        assert_eq!(&p_run, tape.value(direct.last_p()));
        assert!(graph_dist(&mut tape, &dv, h, None, 2).unwrap().is_none());
    }

    #[test]
    fn greedy_decode_limits() {
        let mut store = ParamStore::new();
        let dp = DecoderParams::register(&mut store, 3, 4, 7, 2, 5).unwrap();
        let emb = store.add("embed", crate::params::seeded_init(&[7, 3], 1, InitScheme::FanIn)).unwrap();
        let v = small_vocab();
        let g = KnowledgeGraph::default();
        let run = |max_len| {
            let mut tape = Tape::new();
            let dv = dp.bind(&mut tape, &store);
            let e = tape.param(&store, emb);
            let h0 = tape.constant(Tensor::vector(vec![0.2, -0.1, 0.4, 0.3]));
            greedy_decode(&mut tape, &dv, e, h0, None, 1, &v, &g, 1, 2, max_len).unwrap()
        };
        assert!(run(0).is_empty());
        assert_eq!(run(6), run(6));
        assert!(run(6).len() <= 6);
    }
}
