//! Dataset loading, the training loop and greedy evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{DataConfig, DataFormat, RunConfig};
use crate::corpus::jsonl::{attach_turn_graphs, load_dialogues, load_turn_graphs};
use crate::corpus::synthetic::toy_corpus;
use crate::corpus::{
    build_entity_vocab, build_vocab, is_tag, make_batches, smd, Batch, Dialogue,
    EntityLexicon, Ontology, TrainingExample,
};
use crate::decoder::{joint_loss, LossTerms};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, ResponseRecord};
use crate::model::{Model, Prepared};
use crate::optim::{AdamConfig, AdamState};
use crate::params::mix_seed;

/// Streams of the run seed used for each random consumer.
const SHUFFLE_STREAM: u64 = 0x5348_0000;
const DROPOUT_STREAM: u64 = 0x4452_0000;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub ontology: Ontology,
    pub train: Vec<Dialogue>,
    pub val: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" | "dev" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Dialogue] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("data.{what} is required for this format")))
        };
        let mut ds = match cfg.format {
            DataFormat::Toy => {
                let (train, ontology) = toy_corpus(cfg.toy_seed);
                let (val, _) = toy_corpus(cfg.toy_seed);
                let (test, _) = crate::corpus::synthetic::toy_dialogues(cfg.toy_seed + 1, 5);
                Self { ontology, train, val, test }
            }
            DataFormat::Jsonl => {
                let text = std::fs::read_to_string(need(&cfg.ontology, "ontology")?)
                    .map_err(|e| Error::Data(format!("ontology: {e}")))?;
                Self {
                    ontology: Ontology::from_json(&text)?,
                    train: load_dialogues(&need(&cfg.train, "train")?)?,
                    val: load_dialogues(&need(&cfg.val, "val")?)?,
                    test: load_dialogues(&need(&cfg.test, "test")?)?,
                }
            }
            DataFormat::Smd => {
                let paths = smd::SmdPaths::in_dir(&need(&cfg.smd_dir, "smd_dir")?);
                let ontology = smd::load_entities(&paths.entities)?;
                Self {
                    train: smd::load_split(&paths.train, &ontology)?,
                    val: smd::load_split(&paths.dev, &ontology)?,
                    test: smd::load_split(&paths.test, &ontology)?,
                    ontology,
                }
            }
        };
        for (deps, dialogues) in [
            (&cfg.train_deps, &mut ds.train),
            (&cfg.val_deps, &mut ds.val),
            (&cfg.test_deps, &mut ds.test),
        ] {
            if let Some(path) = deps {
                attach_turn_graphs(dialogues, &load_turn_graphs(path)?)?;
            }
        }
        Ok(ds)
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_bleu: Option<f64>,
    pub val_entity_f1: Option<f64>,
    pub best: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_bleu: f64,
    pub log: Vec<EpochLog>,
}

/// Builds vocabularies from the training split and initializes a model.
pub fn init_model(cfg: &RunConfig, train: &[TrainingExample], ontology: &Ontology) -> Result<Model> {
    cfg.validate()?;
    let vocab = build_vocab(train, ontology);
    let entities = build_entity_vocab(train);
    Model::new(cfg.model.clone(), vocab, entities, cfg.seed)
}

pub fn prepare_all(model: &Model, examples: &[TrainingExample]) -> Result<Vec<Prepared>> {
    examples.iter().map(|e| model.prepare(e)).collect()
}

/// Loss of one batch on a fresh tape; returns the tape and the loss node.
pub fn batch_loss(
    model: &Model,
    batch: &Batch,
    prepared: &[Prepared],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<(Tape, crate::autodiff::Var)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let mut terms = LossTerms::default();
    let mut drop: Option<(f64, &mut dyn rand::RngCore)> = dropout.map(|(r, g)| (r, g as &mut dyn rand::RngCore));
    for (row, &i) in batch.indices.iter().enumerate() {
        let t = model.example_terms(
            &mut tape,
            &b,
            &prepared[i],
            &batch.targets[row],
            &batch.labels[row],
            &batch.mask[row],
            &mut drop,
        )?;
        terms.extend(t);
    }
    let loss = joint_loss(&mut tape, &terms)?;
    Ok((tape, loss))
}

/// Greedy decoding plus scoring of every example.
pub fn evaluate(
    model: &Model,
    examples: &[TrainingExample],
    ontology: &Ontology,
    max_len: usize,
) -> Result<(EvalReport, Vec<ResponseRecord>)> {
    let mut records = Vec::with_capacity(examples.len());
    for ex in examples {
        let p = model.prepare(ex)?;
        let (decoded, _) = model.decode(&p, max_len)?;
        records.push(score_response(model, ex, &decoded, ontology));
    }
    let report = EvalReport::from_records(&records, None)?;
    Ok((report, records))
}

pub fn score_response(
    model: &Model,
    ex: &TrainingExample,
    decoded: &crate::model::Decoded,
    ontology: &Ontology,
) -> ResponseRecord {
    let lexicon = EntityLexicon::new(ontology, &ex.kb);
    let entities = |tokens: &[String]| -> Vec<String> {
        lexicon.entities(tokens).into_iter().map(str::to_string).collect()
    };
    let hypothesis = decoded.surface();
    ResponseRecord {
        domain: ex.domain.clone(),
        predicted_entities: entities(&hypothesis),
        gold_entities: entities(&ex.response),
        predicted_sketch: decoded.sketch(&model.vocab).iter().map(|s| s.to_string()).collect(),
        gold_sketch: ex.sketch.clone(),
        tag_steps: decoded
            .steps
            .iter()
            .filter(|s| is_tag(model.vocab.token(s.choice.sketch_id)))
            .count(),
        copy_failures: decoded.steps.iter().filter(|s| s.choice.copy_failed).count(),
        reference: ex.response.clone(),
        hypothesis,
    }
}

/// Runs the epoch loop, keeping the parameters with the best validation BLEU.
///
/// Epoch 0 is the initialized model, so `epochs = 0` returns it unchanged.
pub fn train(
    cfg: &RunConfig,
    train: &[TrainingExample],
    val: &[TrainingExample],
    ontology: &Ontology,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    let mut model = init_model(cfg, train, ontology)?;
    let prepared = prepare_all(&model, train)?;
    let mut adam = AdamState::new(
        &model.store,
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    );
    let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, DROPOUT_STREAM));
    if val.is_empty() {
        return Err(Error::Data("validation split has no examples".into()));
    }
    let validate = |m: &Model| evaluate(m, val, ontology, cfg.train.max_decode_len).map(|r| r.0);
    let r0 = validate(&model)?;
    let mut best = model.clone();
    let mut best_bleu = r0.bleu;
    let mut best_epoch = 0;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_bleu: Some(r0.bleu),
        val_entity_f1: Some(r0.entity_f1),
        best: true,
        seconds: 0.0,
    }];
    on_epoch(&log[0]);
    for epoch in 1..=cfg.train.epochs {
        let start = Instant::now();
        let batches = make_batches(
            train,
            &model.vocab,
            cfg.train.batch_size,
            true,
            mix_seed(cfg.seed, SHUFFLE_STREAM + epoch as u64),
        )?;
        let mut total = 0.0;
        for batch in &batches {
            let drop = (cfg.train.dropout > 0.0).then_some((cfg.train.dropout, &mut drop_rng));
            let (tape, loss) = batch_loss(&model, batch, &prepared, drop)?;
            total += tape.scalar(loss);
            tape.backward(loss, &mut model.store)?;
            adam.step(&mut model.store)?;
        }
        let mut entry = EpochLog {
            epoch,
            train_loss: Some(total / batches.len().max(1) as f64),
            val_bleu: None,
            val_entity_f1: None,
            best: false,
            seconds: 0.0,
        };
        if epoch % cfg.train.eval_every == 0 || epoch == cfg.train.epochs {
            let r = validate(&model)?;
            entry.val_bleu = Some(r.bleu);
            entry.val_entity_f1 = Some(r.entity_f1);
            if r.bleu > best_bleu {
                best_bleu = r.bleu;
                best_epoch = epoch;
                best = model.clone();
                entry.best = true;
            }
        }
        entry.seconds = start.elapsed().as_secs_f64();
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_bleu,
        log,
    })
}
