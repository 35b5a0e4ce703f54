//! The full encoder / knowledge-graph / decoder model.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::corpus::vocab::{EOS_ID, PAD_ID, SOS_ID};
use crate::corpus::{TrainingExample, Vocabulary};
use crate::decoder::{
    graph_dist, greedy_decode, gru_step, init_hidden, vocab_logits, DecodedStep, DecoderParams,
    DecoderVars, LossTerms,
};
use crate::dialogue_graph::{build_graph, pad_predecessors, split_directional, PaddedView};
use crate::encoder::{encode_bidirectional, CellParams, CellVars, DirectionOutput};
use crate::error::{Error, Result};
use crate::kg::{multi_hop, prepare_levels, HopTrace, KgLevels, KgParams, KnowledgeGraph};
use crate::params::{InitScheme, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Model-independent inputs of one example, ready for the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input_ids: Vec<usize>,
    pub forward: PaddedView,
    pub backward: PaddedView,
    pub graph: KnowledgeGraph,
    /// Entity-embedding row of each node.
    pub node_entities: Vec<usize>,
}

/// Metadata stored alongside parameters in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub entities: Vocabulary,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub entities: Vocabulary,
    pub store: ParamStore,
    pub embed: ParamId,
    pub enc_forward: CellParams,
    pub enc_backward: CellParams,
    pub enc_query: Option<ParamId>,
    pub kg: KgParams,
    pub dec: DecoderParams,
}

/// Tape handles for every parameter group.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub embed: Var,
    pub forward: CellVars,
    pub backward: CellVars,
    pub query: Option<Var>,
    pub dec: DecoderVars,
}

/// Encoder and knowledge-graph results for one example.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub h_e: Var,
    pub forward: DirectionOutput,
    pub backward: DirectionOutput,
    pub levels: Option<KgLevels>,
    pub kg_trace: Option<HopTrace>,
    pub h0: Var,
}

/// Greedy output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub steps: Vec<DecodedStep>,
}

impl Decoded {
    pub fn sketch<'a>(&self, vocab: &'a Vocabulary) -> Vec<&'a str> {
        self.steps.iter().map(|s| vocab.token(s.choice.sketch_id)).collect()
    }

    pub fn surface(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.choice.surface.clone()).collect()
    }
}

impl Model {
    /// Registers all parameters in a fixed order and initializes them from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, entities: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let (d, d_e) = (config.hidden, config.entity_dim);
        let mut store = ParamStore::new();
        let embed = store.add_init("embed.word", &[vocab.len(), d], seed, InitScheme::FanIn)?;
        let enc_forward = CellParams::register(&mut store, "enc.fwd", d, d, config.cell_bias, seed)?;
        let enc_backward = if config.tie_directions {
            enc_forward.clone()
        } else {
            CellParams::register(&mut store, "enc.bwd", d, d, config.cell_bias, seed)?
        };
        let enc_query = if config.query_projection {
            Some(store.add_init("enc.query", &[d_e, 2 * d], seed, InitScheme::FanIn)?)
        } else {
            None
        };
        let kg = KgParams::register(&mut store, entities.len(), d_e, config.hops, seed)?;
        let dec = DecoderParams::register(&mut store, d, config.decoder_hidden(), vocab.len(), d_e, seed)?;
        Ok(Self {
            config,
            seed,
            vocab,
            entities,
            store,
            embed,
            enc_forward,
            enc_backward,
            enc_query,
            kg,
            dec,
        })
    }

    pub fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            seed: self.seed,
            vocab: self.vocab.clone(),
            entities: self.entities.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_string(&self.meta()).expect("metadata serializes");
        Checkpoint::from_store(&self.store, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_str(&ck.metadata)
            .map_err(|e| Error::Checkpoint(format!("unreadable model metadata: {e}")))?;
        let mut m = Self::new(meta.config, meta.vocab, meta.entities, meta.seed)?;
        ck.load_into(&mut m.store)?;
        Ok(m)
    }

    /// Builds the directional views and entity ids for an example.
    pub fn prepare(&self, ex: &TrainingExample) -> Result<Prepared> {
        let deps = if self.config.sequential_only { &[][..] } else { &ex.deps[..] };
        let g = build_graph(ex.history.clone(), deps)?;
        let (f, b) = split_directional(&g);
        Ok(Prepared {
            input_ids: self.vocab.encode(ex.history.tokens()),
            forward: pad_predecessors(&f, self.config.k_max)?,
            backward: pad_predecessors(&b, self.config.k_max)?,
            node_entities: ex.graph.nodes().iter().map(|n| self.entities.id(&n.token)).collect(),
            graph: ex.graph.clone(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            embed: tape.param(&self.store, self.embed),
            forward: self.enc_forward.bind(tape, &self.store),
            backward: self.enc_backward.bind(tape, &self.store),
            query: self.enc_query.map(|id| tape.param(&self.store, id)),
            dec: self.dec.bind(tape, &self.store),
        }
    }

    fn embed_token(
        &self,
        tape: &mut Tape,
        b: &Bound,
        id: usize,
        dropout: &mut Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let x = tape.row(b.embed, id)?;
        match dropout {
            Some((rate, rng)) => tape.dropout(x, *rate, &mut **rng),
            None => Ok(x),
        }
    }

    /// Encoder pass, graph reasoning from the encoder query, and `h_0`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        b: &Bound,
        p: &Prepared,
        dropout: &mut Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Encoding> {
        let inputs = p
            .input_ids
            .iter()
            .map(|&id| self.embed_token(tape, b, id, dropout))
            .collect::<Result<Vec<_>>>()?;
        let (h_e, forward, backward) =
            encode_bidirectional(tape, &b.forward, &b.backward, &p.forward, &p.backward, &inputs)?;
        let (levels, o_k, kg_trace) = if p.graph.is_empty() {
            let zero = tape.constant(Tensor::zeros(&[self.config.entity_dim]));
            (None, zero, None)
        } else {
            let levels = prepare_levels(tape, &self.store, &self.kg, &p.graph, &p.node_entities)?;
            let q0 = match b.query {
                Some(w) => tape.matvec(w, h_e)?,
                None => h_e,
            };
            let run = multi_hop(tape, q0, &levels, self.config.hops)?;
            let trace = HopTrace::capture(tape, &run, &levels);
            (Some(levels), run.output(), Some(trace))
        };
        let h0 = init_hidden(tape, h_e, o_k)?;
        Ok(Encoding {
            h_e,
            forward,
            backward,
            levels,
            kg_trace,
            h0,
        })
    }

    /// Teacher-forced loss terms for the real (masked-in) steps of one example.
    #[allow(clippy::too_many_arguments)]
    pub fn example_terms(
        &self,
        tape: &mut Tape,
        b: &Bound,
        p: &Prepared,
        targets: &[usize],
        labels: &[Option<usize>],
        mask: &[bool],
        dropout: &mut Option<(f64, &mut dyn RngCore)>,
    ) -> Result<LossTerms> {
        if targets.len() != labels.len() || targets.len() != mask.len() {
            return Err(Error::Dimension(format!(
                "{} targets, {} labels, {} mask entries",
                targets.len(),
                labels.len(),
                mask.len()
            )));
        }
        let enc = self.encode(tape, b, p, dropout)?;
        let mut terms = LossTerms::default();
        let mut h = enc.h0;
        let mut prev = SOS_ID;
        for (t, ((&y, &label), &real)) in targets.iter().zip(labels).zip(mask).enumerate() {
            if !real {
                continue;
            }
            if y == PAD_ID {
                return Err(Error::Data(format!("timestep {t}: padding token marked as real")));
            }
            let x = self.embed_token(tape, b, prev, dropout)?;
            h = gru_step(tape, &b.dec, x, h)?;
            let logits = vocab_logits(tape, &b.dec, h)?;
            let graph_logits = match label {
                Some(_) => graph_dist(tape, &b.dec, h, enc.levels.as_ref(), self.config.hops)?
                    .map(|r| r.last_logits()),
                None => None,
            };
            terms.push_step(tape, t, logits, y, graph_logits, label)?;
            prev = y;
        }
        Ok(terms)
    }

    /// Greedy decoding of one example.
    pub fn decode(&self, p: &Prepared, max_len: usize) -> Result<(Decoded, Option<HopTrace>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let enc = self.encode(&mut tape, &b, p, &mut None)?;
        let steps = greedy_decode(
            &mut tape,
            &b.dec,
            b.embed,
            enc.h0,
            enc.levels.as_ref(),
            self.config.hops,
            &self.vocab,
            &p.graph,
            SOS_ID,
            EOS_ID,
            max_len,
        )?;
        Ok((Decoded { steps }, enc.kg_trace))
    }
}
