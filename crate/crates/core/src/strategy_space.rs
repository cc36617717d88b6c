//! Strategy arms and persona augmentation.
//!
//! A pool file is JSON Lines: one object per line with the keys `id`,
//! `category`, `description` and `origin`. Blank lines and lines starting
//! with `#` are skipped. Arm index is the order of records in the file.
//!
//! ```text
//! # comment
//! {"id":"grit","category":"Reciprocation","description":"In your response, ...","origin":"base"}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Separator placed between the base persona and the strategy description.
pub const PERSONA_SEPARATOR: &str = "\n\n";

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("cannot read pool file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed pool record on line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("duplicate strategy id `{0}`")]
    DuplicateId(String),
    #[error("strategy `{0}` has an empty description")]
    EmptyDescription(String),
    #[error("pool contains no strategies")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Cooperative,
    Competitive,
    Strategic,
    Rational,
    Reciprocation,
    Exploratory,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Cooperative,
        Category::Competitive,
        Category::Strategic,
        Category::Rational,
        Category::Reciprocation,
        Category::Exploratory,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Base,
    Paraphrase,
}

/// One arm: a behavioral instruction appended to a persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: String,
    pub category: Category,
    pub description: String,
    pub origin: Origin,
}

impl Strategy {
    pub fn new(id: impl Into<String>, category: Category, description: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category,
            description: description.into(),
            origin: Origin::Base,
        }
    }
}

/// Ordered, id-unique set of strategies. Arm `k` is `strategies()[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyPool {
    strategies: Vec<Strategy>,
}

impl StrategyPool {
    pub fn new(strategies: Vec<Strategy>) -> Result<Self, PoolError> {
        if strategies.is_empty() {
            return Err(PoolError::Empty);
        }
        let mut seen = HashSet::new();
        for s in &strategies {
            if s.description.trim().is_empty() {
                return Err(PoolError::EmptyDescription(s.id.clone()));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(PoolError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self { strategies })
    }

    pub fn parse(text: &str) -> Result<Self, PoolError> {
        let mut strategies = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let s: Strategy = serde_json::from_str(line).map_err(|e| PoolError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })?;
            strategies.push(s);
        }
        Self::new(strategies)
    }

    /// Number of arms `K`.
    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn strategies(&self) -> &[Strategy] {
        &self.strategies
    }

    pub fn get(&self, arm: usize) -> Option<&Strategy> {
        self.strategies.get(arm)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.strategies.iter().position(|s| s.id == id)
    }

    /// Returns a new pool with `s` appended as the last arm.
    pub fn append_strategy(&self, s: Strategy) -> Result<Self, PoolError> {
        if self.index_of(&s.id).is_some() {
            return Err(PoolError::DuplicateId(s.id));
        }
        let mut strategies = self.strategies.clone();
        strategies.push(s);
        Self::new(strategies)
    }

    /// Serializes back to the pool file format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.strategies {
            out.push_str(&serde_json::to_string(s).expect("strategy serializes"));
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 over the pool contents in arm order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_jsonl().as_bytes());
        hex::encode(h.finalize())
    }
}

pub fn load_pool(path: impl AsRef<Path>) -> Result<StrategyPool, PoolError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PoolError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    StrategyPool::parse(&text)
}

/// The 12-strategy pool shipped in `data/strategies.jsonl`.
pub fn default_pool() -> StrategyPool {
    StrategyPool::parse(DEFAULT_POOL).expect("bundled pool is valid")
}

pub const DEFAULT_POOL: &str = include_str!("../../../data/strategies.jsonl");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub agent_id: String,
    pub text: String,
}

impl Persona {
    pub fn new(agent_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPersona {
    pub base: Persona,
    pub strategy_id: String,
    pub text: String,
}

impl fmt::Display for AugmentedPersona {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// `base.text`, the separator, then the strategy description.
pub fn augment_persona(base: &Persona, s: &Strategy) -> AugmentedPersona {
    let mut text = String::with_capacity(base.text.len() + PERSONA_SEPARATOR.len() + s.description.len());
    text.push_str(&base.text);
    text.push_str(PERSONA_SEPARATOR);
    text.push_str(&s.description);
    AugmentedPersona {
        base: base.clone(),
        strategy_id: s.id.clone(),
        text,
    }
}
