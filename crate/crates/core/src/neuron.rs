// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron addressing: `(layer, kind, index)` and ordered neuron sets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// The five neuron families. Declaration order is the canonical sort order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NeuronKind {
    #[serde(rename = "attn.q")]
    AttnQ,
    #[serde(rename = "attn.k")]
    AttnK,
    #[serde(rename = "attn.v")]
    AttnV,
    #[serde(rename = "fwd.up")]
    FwdUp,
    #[serde(rename = "fwd.down")]
    FwdDown,
}

impl NeuronKind {
    pub const ALL: [NeuronKind; 5] =
        [NeuronKind::AttnQ, NeuronKind::AttnK, NeuronKind::AttnV, NeuronKind::FwdUp, NeuronKind::FwdDown];

    pub fn as_str(self) -> &'static str {
        match self {
            NeuronKind::AttnQ => "attn.q",
            NeuronKind::AttnK => "attn.k",
            NeuronKind::AttnV => "attn.v",
            NeuronKind::FwdUp => "fwd.up",
            NeuronKind::FwdDown => "fwd.down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, NeuronKind::AttnQ | NeuronKind::AttnK | NeuronKind::AttnV)
    }
}

impl fmt::Display for NeuronKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeuronKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Accept the underscore spelling some tools emit (fwd_up).
        match s.replace('_', ".").as_str() {
            "attn.q" => Ok(NeuronKind::AttnQ),
            "attn.k" => Ok(NeuronKind::AttnK),
            "attn.v" => Ok(NeuronKind::AttnV),
            "fwd.up" => Ok(NeuronKind::FwdUp),
            "fwd.down" => Ok(NeuronKind::FwdDown),
            _ => Err(Error::Param(format!("unknown neuron kind {s:?}"))),
        }
    }
}

/// One neuron. Ordering is by layer, then kind, then index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NeuronId {
    pub layer: usize,
    pub kind: NeuronKind,
    pub index: usize,
}

impl NeuronId {
    pub const fn new(layer: usize, kind: NeuronKind, index: usize) -> Self {
        Self { layer, kind, index }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::Param(format!("neuron {self}: layer out of range (n_layers {})", cfg.n_layers)));
        }
        let extent = cfg.group_size(self.kind);
        if self.index >= extent {
            return Err(Error::Param(format!("neuron {self}: index out of range (extent {extent})")));
        }
        Ok(())
    }
}

/// `L:KIND:IDX`, e.g. `14:fwd.up:12953`.
impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.kind, self.index)
    }
}

impl FromStr for NeuronId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [layer, kind, index] = parts.as_slice() else {
            return Err(Error::Param(format!("neuron {s:?} is not L:KIND:IDX")));
        };
        let layer = layer.parse().map_err(|_| Error::Param(format!("bad layer in neuron {s:?}")))?;
        let index = index.parse().map_err(|_| Error::Param(format!("bad index in neuron {s:?}")))?;
        Ok(Self { layer, kind: kind.parse()?, index })
    }
}

/// Sorted, de-duplicated set of neurons.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct NeuronSet {
    members: Vec<NeuronId>,
}

impl FromIterator<NeuronId> for NeuronSet {
    fn from_iter<I: IntoIterator<Item = NeuronId>>(iter: I) -> Self {
        let mut members: Vec<NeuronId> = iter.into_iter().collect();
        members.sort_unstable();
        members.dedup();
        Self { members }
    }
}

impl<'a> IntoIterator for &'a NeuronSet {
    type Item = &'a NeuronId;
    type IntoIter = std::slice::Iter<'a, NeuronId>;

    fn into_iter(self) -> Self::IntoIter {
        self.members.iter()
    }
}

impl NeuronSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every addressable neuron of a config, in canonical order.
    pub fn all(cfg: &ModelConfig) -> Self {
        cfg.neurons().collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, NeuronId> {
        self.members.iter()
    }

    pub fn as_slice(&self) -> &[NeuronId] {
        &self.members
    }

    pub fn contains(&self, n: &NeuronId) -> bool {
        self.members.binary_search(n).is_ok()
    }

    pub fn intersection(&self, other: &NeuronSet) -> NeuronSet {
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.members.len() && j < other.members.len() {
            match self.members[i].cmp(&other.members[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(self.members[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        NeuronSet { members: out }
    }

    pub fn union(&self, other: &NeuronSet) -> NeuronSet {
        self.members.iter().chain(&other.members).copied().collect()
    }

    pub fn difference(&self, other: &NeuronSet) -> NeuronSet {
        NeuronSet { members: self.members.iter().filter(|n| !other.contains(n)).copied().collect() }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.members.iter().try_for_each(|n| n.validate(cfg))
    }

    /// Indices grouped by `(layer, kind)`, ascending within each group.
    pub fn groups(&self) -> BTreeMap<(usize, NeuronKind), Vec<usize>> {
        let mut out: BTreeMap<(usize, NeuronKind), Vec<usize>> = BTreeMap::new();
        for n in &self.members {
            out.entry((n.layer, n.kind)).or_default().push(n.index);
        }
        out
    }

    pub fn indices(&self, layer: usize, kind: NeuronKind) -> Vec<usize> {
        self.members.iter().filter(|n| n.layer == layer && n.kind == kind).map(|n| n.index).collect()
    }

    /// One `layer<TAB>kind<TAB>index` line per neuron.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for n in &self.members {
            s.push_str(&format!("{}\t{}\t{}\n", n.layer, n.kind, n.index));
        }
        s
    }

    /// Parses the tab-separated set format. Blank lines are skipped; input
    /// order does not matter.
    pub fn parse_tsv(text: &str, source: &str) -> Result<Self> {
        let mut members = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [layer, kind, index] = fields.as_slice() else {
                return Err(Error::format(source, i + 1, "expected layer<TAB>kind<TAB>index"));
            };
            let layer =
                layer.trim().parse().map_err(|_| Error::format(source, i + 1, format!("bad layer {layer:?}")))?;
            let kind: NeuronKind =
                kind.trim().parse().map_err(|e: Error| Error::format(source, i + 1, e.to_string()))?;
            let index =
                index.trim().parse().map_err(|_| Error::format(source, i + 1, format!("bad index {index:?}")))?;
            members.push(NeuronId { layer, kind, index });
        }
        Ok(members.into_iter().collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::manifest::write_atomic(path.as_ref(), self.to_tsv().as_bytes())
    }
}
