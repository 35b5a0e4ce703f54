//! Command-line front end: training, evaluation, inference and inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dialkg::checkpoint::Checkpoint;
use dialkg::config::RunConfig;
use dialkg::corpus::jsonl::write_dialogues;
use dialkg::corpus::synthetic::{toy_corpus, toy_dialogues};
use dialkg::corpus::{make_examples, turn_graphs, TrainingExample};
use dialkg::dialogue_graph::{edge_distance_distribution, DISTANCE_BUCKETS};
use dialkg::inspect::inspect;
use dialkg::model::Model;
use dialkg::train::{evaluate, train, Dataset, Split};

#[derive(Parser)]
#[command(name = "dialkg", version, about = "Graph-structured task-oriented dialogue models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory that relative data paths resolve against.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of hops K.
    #[arg(long)]
    hops: Option<usize>,
    /// Encoder hidden size d; entity_dim follows as 2d unless query projection is on.
    #[arg(long)]
    hidden: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and keep the checkpoint with the best validation BLEU.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a split and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write generated responses with per-step graph weights as JSON lines.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-step attention table for one dialogue.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        dialogue: String,
        /// System turn to inspect; defaults to every turn of the dialogue.
        #[arg(long)]
        turn: Option<usize>,
        /// Also write the dump as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edge path distance distribution of a split.
    GraphStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one config per point of a hyperparameter grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        hops: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        hidden: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        dropout: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        lr: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the generated toy corpus in the JSON-lines format.
    GenerateToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    code_version: String,
    config: Option<&'a RunConfig>,
}

/// Writes `{command}.manifest.json` (and the resolved config, if any) into `dir`.
fn write_manifest(dir: &Path, command: &str, seed: u64, cfg: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let m = Manifest {
        command,
        args: std::env::args().collect(),
        seed,
        code_version: format!("dialkg {}", env!("CARGO_PKG_VERSION")),
        config: cfg,
    };
    fs::write(dir.join(format!("{command}.manifest.json")), serde_json::to_string_pretty(&m)?)?;
    if let Some(cfg) = cfg {
        fs::write(dir.join(format!("{command}.config.toml")), cfg.to_toml())?;
    }
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config, c.dataset.as_deref())
        .with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(k) = c.hops {
        cfg.model.hops = k;
    }
    if let Some(d) = c.hidden {
        cfg.model.hidden = d;
        if !cfg.model.query_projection {
            cfg.model.entity_dim = 2 * d;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn examples(ds: &Dataset, split: Split) -> Result<Vec<TrainingExample>> {
    Ok(make_examples(ds.split(split), &ds.ontology)?)
}

fn load_model(path: &Path) -> Result<Model> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let ck = Checkpoint::read_from(std::io::BufReader::new(file))?;
    Ok(Model::from_checkpoint(&ck)?)
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    model.to_checkpoint().write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg.data)?;
            write_manifest(&out, "train", cfg.seed, Some(&cfg))?;
            let tr = examples(&ds, Split::Train)?;
            let val = examples(&ds, Split::Val)?;
            let mut log = fs::File::create(out.join("train.log.jsonl"))?;
            let outcome = train(&cfg, &tr, &val, &ds.ontology, |e| {
                let line = serde_json::to_string(e).expect("log entry serializes");
                let _ = writeln!(log, "{line}");
                eprintln!(
                    "epoch {:>4}  loss {}  val BLEU {}  val F1 {}{}",
                    e.epoch,
                    e.train_loss.map_or("-".into(), |l| format!("{l:.4}")),
                    e.val_bleu.map_or("-".into(), |b| format!("{b:.2}")),
                    e.val_entity_f1.map_or("-".into(), |f| format!("{f:.4}")),
                    if e.best { "  *" } else { "" }
                );
            })?;
            save_model(&outcome.best, &out.join("model.ckpt"))?;
            println!(
                "best epoch {} (val BLEU {:.2}); checkpoint {}",
                outcome.best_epoch,
                outcome.best_bleu,
                out.join("model.ckpt").display()
            );
        }
        Command::Eval { common, checkpoint, split, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg.data)?;
            let model = load_model(&checkpoint)?;
            write_manifest(&out, "eval", cfg.seed, Some(&cfg))?;
            let ex = examples(&ds, split)?;
            let (report, records) = evaluate(&model, &ex, &ds.ontology, cfg.train.max_decode_len)?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            fs::write(out.join("report.txt"), report.to_text())?;
            let mut f = fs::File::create(out.join("responses.jsonl"))?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
            print!("{}", report.to_text());
        }
        Command::Infer { common, checkpoint, split, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg.data)?;
            let model = load_model(&checkpoint)?;
            write_manifest(&parent_dir(&out), "infer", cfg.seed, Some(&cfg))?;
            let mut f = std::io::BufWriter::new(fs::File::create(&out)?);
            for ex in examples(&ds, split)? {
                let dump = inspect(&model, &ex, cfg.train.max_decode_len)?;
                #[derive(Serialize)]
                struct Line<'a> {
                    dialogue: &'a str,
                    turn: usize,
                    sketch: Vec<&'a str>,
                    response: Vec<&'a str>,
                    steps: Vec<(Option<usize>, Option<&'a [f64]>)>,
                }
                let line = Line {
                    dialogue: &dump.dialogue,
                    turn: dump.turn,
                    sketch: dump.steps.iter().map(|s| s.sketch_token.as_str()).collect(),
                    response: dump.steps.iter().map(|s| s.emitted.as_str()).collect(),
                    steps: dump
                        .steps
                        .iter()
                        .map(|s| (s.graph_argmax, s.p_graph.as_deref()))
                        .collect(),
                };
                writeln!(f, "{}", serde_json::to_string(&line)?)?;
            }
            f.flush()?;
        }
        Command::Inspect { common, checkpoint, split, dialogue, turn, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg.data)?;
            let model = load_model(&checkpoint)?;
            let chosen: Vec<TrainingExample> = examples(&ds, split)?
                .into_iter()
                .filter(|e| e.dialogue_id == dialogue && turn.is_none_or(|t| t == e.turn))
                .collect();
            if chosen.is_empty() {
                bail!("dialogue `{dialogue}` not found in the {split:?} split");
            }
            let mut dumps = Vec::new();
            for ex in &chosen {
                let d = inspect(&model, ex, cfg.train.max_decode_len)?;
                println!("{}", d.to_table());
                dumps.push(d);
            }
            if let Some(out) = out {
                write_manifest(&parent_dir(&out), "inspect", cfg.seed, Some(&cfg))?;
                fs::write(out, serde_json::to_string_pretty(&dumps)?)?;
            }
        }
        Command::GraphStats { common, split, out } => {
            let cfg = load_config(&common)?;
            let ds = Dataset::load(&cfg.data)?;
            let graphs = turn_graphs(ds.split(split))?;
            let report = edge_distance_distribution(&graphs)?;
            for (name, (c, p)) in DISTANCE_BUCKETS.iter().zip(report.counts.iter().zip(report.percentages)) {
                println!("{name:>6}  {c:>8}  {p:6.2}%");
            }
            println!("{:>6}  {:>8}", "total", report.total);
            if let Some(out) = out {
                write_manifest(&parent_dir(&out), "graph-stats", cfg.seed, Some(&cfg))?;
                fs::write(out, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Grid { config, hops, hidden, dropout, lr, out } => {
            let mut base = RunConfig::load(&config, None)?;
            for p in [
                &mut base.data.train,
                &mut base.data.val,
                &mut base.data.test,
                &mut base.data.ontology,
                &mut base.data.train_deps,
                &mut base.data.val_deps,
                &mut base.data.test_deps,
                &mut base.data.smd_dir,
            ]
            .into_iter()
            .flatten()
            {
                *p = std::path::absolute(&*p)?;
            }
            write_manifest(&out, "grid", base.seed, Some(&base))?;
            let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
            let orf = |v: Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v };
            let mut n = 0;
            for &k in &or(hops, base.model.hops) {
                for &d in &or(hidden.clone(), base.model.hidden) {
                    for &p in &orf(dropout.clone(), base.train.dropout) {
                        for &l in &orf(lr.clone(), base.train.lr) {
                            let mut c = base.clone();
                            c.model.hops = k;
                            c.model.hidden = d;
                            if !c.model.query_projection {
                                c.model.entity_dim = 2 * d;
                            }
                            c.train.dropout = p;
                            c.train.lr = l;
                            c.validate()?;
                            let path = out.join(format!("grid-{n:03}-k{k}-d{d}-p{p}-lr{l}.toml"));
                            fs::write(&path, c.to_toml())?;
                            println!("{}", path.display());
                            n += 1;
                        }
                    }
                }
            }
        }
        Command::GenerateToy { seed, out } => {
            write_manifest(&out, "generate-toy", seed, None)?;
            let (train, ontology) = toy_corpus(seed);
            let (test, _) = toy_dialogues(seed + 1, 5);
            write_dialogues(fs::File::create(out.join("train.jsonl"))?, &train)?;
            write_dialogues(fs::File::create(out.join("test.jsonl"))?, &test)?;
            fs::write(out.join("ontology.json"), ontology.to_json() + "\n")?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
