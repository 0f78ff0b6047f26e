// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint and probe-corpus files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SNRF" | u32 version = 1 | u64 header_len | header JSON (UTF-8) | payload
//! ```
//!
//! The header is `{"config":{n_layers,d_model,d_inter,vocab},"tensors":[{name,rows,cols,offset}]}`
//! with tensors sorted by name and `offset` counted in bytes from the start
//! of the payload. The payload is the row-major `f32` data of every tensor,
//! concatenated in header order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::manifest::write_atomic;
use crate::model::{ModelConfig, Projection, TokenId};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"SNRF";
pub const FORMAT_VERSION: u32 = 1;

pub const EMBED: &str = "embed.weight";
pub const UNEMBED: &str = "unembed.weight";

/// All tensors of one checkpoint, keyed by canonical name.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    config: ModelConfig,
    tensors: BTreeMap<String, Matrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

/// Canonical tensor names and shapes for a config, sorted by name.
pub fn canonical_shapes(cfg: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    out.insert(EMBED.to_string(), (cfg.vocab, cfg.d_model));
    out.insert(UNEMBED.to_string(), (cfg.d_model, cfg.vocab));
    for layer in 0..cfg.n_layers {
        for p in Projection::ALL {
            out.insert(p.tensor_name(layer), p.shape(cfg));
        }
    }
    out
}

impl WeightMap {
    /// Validates that `tensors` is exactly the canonical set with the
    /// config-derived shapes.
    pub fn new(config: ModelConfig, tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = canonical_shapes(&config);
        for (name, m) in &tensors {
            let Some(&expected) = shapes.get(name) else {
                return Err(CheckpointError::UnexpectedTensor(name.clone()).into());
            };
            if m.shape() != expected {
                return Err(CheckpointError::ShapeMismatch { name: name.clone(), expected, found: m.shape() }.into());
            }
        }
        if let Some(missing) = shapes.keys().find(|n| !tensors.contains_key(*n)) {
            return Err(CheckpointError::MissingTensor(missing.clone()).into());
        }
        Ok(Self { config, tensors })
    }

    /// All-zero weights.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let tensors = canonical_shapes(&config).into_iter().map(|(n, (r, c))| (n, Matrix::zeros(r, c))).collect();
        Self::new(config, tensors)
    }

    /// Seeded random weights: embeddings uniform in [-1, 1], every other
    /// tensor uniform in ±1/√fan_in.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = canonical_shapes(&config)
            .into_iter()
            .map(|(name, (r, c))| {
                let bound = if name == EMBED { 1.0 } else { 1.0 / (r as f32).sqrt() };
                let m = Matrix::from_fn(r, c, |_, _| rng.gen_range(-bound..=bound));
                (name, m)
            })
            .collect();
        Self::new(config, tensors)
    }

    /// Copy with every entry shifted by seeded uniform noise of relative
    /// size `noise` (scaled by the tensor's ±1/√fan_in bound).
    pub fn perturbed(&self, noise: f32, seed: u64) -> Result<Self> {
        if !noise.is_finite() || noise < 0.0 {
            return Err(Error::Param(format!("noise must be finite and >= 0, got {noise}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let bound = if name == EMBED { 1.0 } else { 1.0 / (m.rows() as f32).sqrt() };
                let out = Matrix::from_fn(m.rows(), m.cols(), |r, c| {
                    m.get(r, c) + noise * bound * rng.gen_range(-1.0f32..=1.0)
                });
                (name.clone(), out)
            })
            .collect();
        Self::new(self.config, tensors)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors.get(name).ok_or_else(|| Error::Param(format!("no tensor named {name}")))
    }

    pub fn projection(&self, layer: usize, p: Projection) -> &Matrix {
        self.tensors.get(&p.tensor_name(layer)).expect("WeightMap invariant: canonical tensor present")
    }

    pub fn embed(&self) -> &Matrix {
        &self.tensors[EMBED]
    }

    pub fn unembed(&self) -> &Matrix {
        &self.tensors[UNEMBED]
    }

    /// Replaces one tensor, keeping the shape invariant.
    pub fn set_tensor(&mut self, name: &str, m: Matrix) -> Result<()> {
        let slot = self.tensors.get_mut(name).ok_or_else(|| CheckpointError::UnexpectedTensor(name.to_string()))?;
        if slot.shape() != m.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.shape(),
                found: m.shape(),
            }
            .into());
        }
        *slot = m;
        Ok(())
    }

    pub(crate) fn tensor_mut(&mut self, name: &str) -> &mut Matrix {
        self.tensors.get_mut(name).expect("WeightMap invariant: canonical tensor present")
    }

    /// Bitwise equality of every tensor.
    pub fn bit_eq(&self, other: &WeightMap) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((a, x), (b, y))| a == b && x.bit_eq(y))
    }

    /// Errors unless both checkpoints share a config, i.e. their neurons are
    /// in one-to-one correspondence.
    pub fn check_correspondence(&self, other: &WeightMap) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Correspondence(format!("{:?} vs {:?}", self.config, other.config)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|(name, m)| {
                let e = TensorEntry { name: name.clone(), rows: m.rows(), cols: m.cols(), offset };
                offset += (m.rows() * m.cols() * 4) as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header { config: self.config, tensors: entries }).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.tensors.values() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic { found: bytes[..bytes.len().min(4)].to_vec() }.into());
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Header("file ends inside the fixed preamble".into()).into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version }.into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| CheckpointError::Header(format!("header length {header_len} exceeds file size")))?
            as usize;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        header.config.validate()?;
        let payload = &bytes[header_end..];
        let shapes = canonical_shapes(&header.config);

        let mut tensors = BTreeMap::new();
        let mut spans = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let Some(&expected) = shapes.get(&e.name) else {
                return Err(CheckpointError::UnexpectedTensor(e.name.clone()).into());
            };
            if (e.rows, e.cols) != expected {
                return Err(
                    CheckpointError::ShapeMismatch { name: e.name.clone(), expected, found: (e.rows, e.cols) }.into()
                );
            }
            let len = (e.rows * e.cols * 4) as u64;
            let end = e.offset.saturating_add(len);
            if end > payload.len() as u64 {
                return Err(CheckpointError::Truncated {
                    name: e.name.clone(),
                    start: e.offset,
                    end,
                    available: payload.len() as u64,
                }
                .into());
            }
            let raw = &payload[e.offset as usize..end as usize];
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(CheckpointError::NonFinite { name: e.name.clone(), index }.into());
            }
            let m = Matrix::from_vec(e.rows, e.cols, data)?;
            if tensors.insert(e.name.clone(), m).is_some() {
                return Err(CheckpointError::Header(format!("duplicate tensor {}", e.name)).into());
            }
            spans.push((e.offset, end, e.name.as_str()));
        }
        if let Some(missing) = shapes.keys().find(|n| !tensors.contains_key(*n)) {
            return Err(CheckpointError::MissingTensor(missing.clone()).into());
        }
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(CheckpointError::Header(format!("tensors {} and {} overlap", w[0].2, w[1].2)).into());
            }
        }
        let covered: u64 = spans.iter().map(|(s, e, _)| e - s).sum();
        if covered < payload.len() as u64 {
            return Err(CheckpointError::TrailingBytes(payload.len() as u64 - covered).into());
        }
        Self::new(header.config, tensors)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<WeightMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightMap::from_bytes(&bytes)
}

pub fn save_checkpoint(w: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &w.to_bytes())
}

/// Probe contexts, one token sequence per line of the corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCorpus {
    pub contexts: Vec<Vec<TokenId>>,
    pub vocab_names: Option<BTreeMap<TokenId, String>>,
}

impl ProbeCorpus {
    /// Parses space-separated token ids, validating each against `vocab`.
    pub fn parse(text: &str, vocab: usize, source: &str) -> Result<Self> {
        let mut contexts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                return Err(Error::format(source, line_no, "empty context"));
            }
            let mut ctx = Vec::new();
            for (pos, tok) in line.split_whitespace().enumerate() {
                let id: TokenId = tok.parse().map_err(|_| {
                    Error::format(source, line_no, format!("token {}: not a token id: {tok:?}", pos + 1))
                })?;
                if id as usize >= vocab {
                    return Err(Error::format(
                        source,
                        line_no,
                        format!("token {}: id {id} out of vocabulary (size {vocab})", pos + 1),
                    ));
                }
                ctx.push(id);
            }
            contexts.push(ctx);
        }
        if contexts.is_empty() {
            return Err(Error::format(source, 0, "corpus has no contexts"));
        }
        Ok(Self { contexts, vocab_names: None })
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    /// True when every context has the same length.
    pub fn uniform_length(&self) -> bool {
        self.contexts.windows(2).all(|w| w[0].len() == w[1].len())
    }
}

pub fn load_corpus(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ProbeCorpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ProbeCorpus::parse(&text, cfg.vocab, &path.display().to_string())
}

/// Parses a vocab sidecar of `id<TAB>string` lines.
pub fn parse_vocab(text: &str, source: &str) -> Result<BTreeMap<TokenId, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| Error::format(source, i + 1, "expected id<TAB>string"))?;
        let id: TokenId =
            id.trim().parse().map_err(|_| Error::format(source, i + 1, format!("bad token id {id:?}")))?;
        if out.insert(id, name.to_string()).is_some() {
            return Err(Error::format(source, i + 1, format!("duplicate token id {id}")));
        }
    }
    Ok(out)
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<BTreeMap<TokenId, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocab(&text, &path.display().to_string())
}
