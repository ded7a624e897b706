use serde::{Deserialize, Serialize};

use crate::encoder::CompressionSpec;
use crate::error::{Error, Result};

/// Reserved token ids shared by every vocabulary.
pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const PAD: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;
pub const NUM_RESERVED: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub vocab_size: usize,
    /// Longest token sequence the decoder accepts (positional table rows).
    pub max_len: usize,
    pub dropout: f64,
    /// Width of the encoder tokens the decoder cross-attends to.
    pub encoder_dim: usize,
    /// Number of positional tables; above one, each task selects its own.
    pub position_tables: usize,
    pub tie_embeddings: bool,
    pub compression: CompressionSpec,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            model_dim: 32,
            heads: 4,
            mlp_dim: 64,
            vocab_size: 64,
            max_len: 16,
            dropout: 0.1,
            encoder_dim: 32,
            position_tables: 1,
            tie_embeddings: false,
            compression: CompressionSpec::None,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("decoder depth must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return fail(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.vocab_size < NUM_RESERVED {
            return fail(format!(
                "vocab_size {} is smaller than the {NUM_RESERVED} reserved tokens",
                self.vocab_size
            ));
        }
        if self.mlp_dim == 0 || self.encoder_dim == 0 || self.position_tables == 0 {
            return fail("mlp_dim, encoder_dim and position_tables must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.compression.uses_map_pool() && self.encoder_dim % self.heads != 0 {
            return fail(format!(
                "encoder_dim {} is not divisible by {} pooling heads",
                self.encoder_dim, self.heads
            ));
        }
        self.compression.validate(self.encoder_dim)
    }

    /// Flat `key = value` manifest stored next to checkpoints.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pairs() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "manifest line {}: expected key = value",
                    lineno + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("depth", self.depth.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_dim", self.mlp_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("encoder_dim", self.encoder_dim.to_string()),
            ("position_tables", self.position_tables.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("compression", self.compression.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("decoder.{key}: cannot parse {v:?}")))
        }
        match key {
            "depth" => self.depth = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_dim" => self.mlp_dim = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "encoder_dim" => self.encoder_dim = num(key, value)?,
            "position_tables" => self.position_tables = num(key, value)?,
            "tie_embeddings" => self.tie_embeddings = num(key, value)?,
            "compression" => self.compression = value.parse()?,
            _ => return Err(Error::config(format!("unknown decoder key {key:?}"))),
        }
        Ok(())
    }
}
