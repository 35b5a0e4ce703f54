//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! format = "jsonl"          # "jsonl", "smd" or "toy"
//! train = "data/toy/train.jsonl"
//! val = "data/toy/train.jsonl"
//! test = "data/toy/test.jsonl"
//! ontology = "data/toy/ontology.json"
//!
//! [model]
//! hidden = 16               # d
//! entity_dim = 32           # d_e
//! hops = 3                  # K
//! k_max = 4
//!
//! [train]
//! dropout = 0.1
//! lr = 0.005
//! batch_size = 8
//! epochs = 100
//! ```
//!
//! Relative data paths resolve against an explicit data directory, else
//! `DIALKG_DATA_DIR`, else the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATA_DIR_ENV: &str = "DIALKG_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Smd,
    /// Generated toy corpus; paths are ignored.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub ontology: Option<PathBuf>,
    /// Per-turn dependency files, one per split.
    #[serde(default)]
    pub train_deps: Option<PathBuf>,
    #[serde(default)]
    pub val_deps: Option<PathBuf>,
    #[serde(default)]
    pub test_deps: Option<PathBuf>,
    /// Directory holding the SMD release files.
    #[serde(default)]
    pub smd_dir: Option<PathBuf>,
    /// Seed of the generated toy corpus.
    #[serde(default)]
    pub toy_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder hidden size `d`; word embeddings have the same size.
    pub hidden: usize,
    /// Knowledge-graph embedding size `d_e`.
    pub entity_dim: usize,
    /// Number of hops `K`.
    pub hops: usize,
    /// Predecessor slots per node.
    pub k_max: usize,
    /// Share one cell between both directions.
    #[serde(default)]
    pub tie_directions: bool,
    /// Ignore dependency arcs.
    #[serde(default)]
    pub sequential_only: bool,
    /// Project the encoder output to the query space instead of using it directly.
    #[serde(default)]
    pub query_projection: bool,
    /// Bias terms in the encoder's reset and candidate transforms.
    #[serde(default)]
    pub cell_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dropout: f64,
    /// Accept a dropout rate outside `[0.1, 0.5]`.
    #[serde(default)]
    pub dropout_override: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_max_len")]
    pub max_decode_len: usize,
    /// Validate every this many epochs (and after the last one).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_max_len() -> usize {
    40
}

fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.entity_dim == 0 {
            return Err(Error::Config("hidden and entity_dim must be positive".into()));
        }
        if self.hops < 1 {
            return Err(Error::Config("hops must be at least 1".into()));
        }
        if self.k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if !self.query_projection && self.entity_dim != 2 * self.hidden {
            return Err(Error::Config(format!(
                "entity_dim ({}) must equal 2 * hidden ({}) unless query_projection is enabled",
                self.entity_dim,
                2 * self.hidden
            )));
        }
        Ok(())
    }

    /// Decoder state size `2d + d_e`.
    pub fn decoder_hidden(&self) -> usize {
        2 * self.hidden + self.entity_dim
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !self.dropout_override && !(0.1..=0.5).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0.1, 0.5]; set dropout_override = true to allow it",
                self.dropout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config file and resolves its relative data paths.
    ///
    /// The base directory is `data_dir` if given, else `DIALKG_DATA_DIR`,
    /// else the config file's directory.
    pub fn load(path: &Path, data_dir: Option<&Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = match (data_dir, std::env::var_os(DATA_DIR_ENV)) {
            (Some(dir), _) => dir.to_path_buf(),
            (None, Some(dir)) => PathBuf::from(dir),
            (None, None) => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        if c.data.format == DataFormat::Smd && c.data.smd_dir.is_none() {
            c.data.smd_dir = Some(PathBuf::from("."));
        }
        c.data.resolve(&base);
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

impl DataConfig {
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.train,
            &mut self.val,
            &mut self.test,
            &mut self.ontology,
            &mut self.train_deps,
            &mut self.val_deps,
            &mut self.test_deps,
            &mut self.smd_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}
