// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron impact profiling, activated/context/shared neuron selection and
//! overlap statistics.
//!
//! Two impact modes exist:
//!
//! * **layer-local**: squared Frobenius change of the sublayer output that
//!   contains the neuron when its activation column is zeroed. All impacts
//!   come from a single traced forward pass.
//! * **full**: Euclidean norm of the change in the final hidden states (all
//!   positions, flattened) when the neuron's parameters are zeroed. One
//!   extra forward per neuron.
//!
//! The two modes produce numbers on different scales (squared vs. plain
//! norm), so reports from different modes are never combined.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ProbeCorpus, WeightMap};
use crate::error::{Error, Result};
use crate::model::{
    ablate_weights, attention_scores, causal_softmax, forward, LayerTrace, ModelConfig, Projection, TokenId,
};
use crate::neuron::{NeuronId, NeuronKind, NeuronSet};
use crate::tensor::Matrix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImpactMode {
    #[serde(rename = "layer-local")]
    LayerLocal,
    #[serde(rename = "full")]
    FullModel,
}

impl ImpactMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ImpactMode::LayerLocal => "layer-local",
            ImpactMode::FullModel => "full",
        }
    }
}

impl fmt::Display for ImpactMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImpactMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer-local" => Ok(ImpactMode::LayerLocal),
            "full" | "full-model" => Ok(ImpactMode::FullModel),
            _ => Err(Error::Param(format!("unknown impact mode {s:?} (layer-local|full)"))),
        }
    }
}

/// Per-neuron impacts for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactReport {
    pub context_id: usize,
    pub mode: ImpactMode,
    pub impacts: BTreeMap<NeuronId, f64>,
}

fn check_index(
    trace: &[LayerTrace],
    layer: usize,
    k: usize,
    extent: impl Fn(&LayerTrace) -> usize,
) -> Result<&LayerTrace> {
    let t = trace
        .get(layer)
        .ok_or_else(|| Error::Param(format!("layer {layer} out of range ({} layers traced)", trace.len())))?;
    if k >= extent(t) {
        return Err(Error::Param(format!("neuron index {k} out of range (extent {})", extent(t))));
    }
    Ok(t)
}

/// `‖H[:,k]‖² · ‖W_down[k,:]‖²`, the squared norm of the rank-one MLP output
/// change when intermediate neuron `k` is removed. Shared by fwd.up and
/// fwd.down neurons of the same index.
pub fn impact_ffn(trace: &[LayerTrace], w: &WeightMap, layer: usize, k: usize) -> Result<f64> {
    let t = check_index(trace, layer, k, |t| t.h_act.cols())?;
    let h: f64 = t.h_act.column(k).iter().map(|x| x * x).sum();
    let down = w.projection(layer, Projection::MlpDown);
    let d: f64 = down.row(k).iter().map(|&x| f64::from(x) * f64::from(x)).sum();
    Ok(h * d)
}

/// `‖A · V[:,k]‖²`.
pub fn impact_value(trace: &[LayerTrace], layer: usize, k: usize) -> Result<f64> {
    let t = check_index(trace, layer, k, |t| t.v.cols())?;
    let l = t.attn.rows();
    let mut total = 0.0;
    for i in 0..l {
        let y: f64 = (0..=i).map(|j| t.attn.get(i, j) * t.v.get(j, k)).sum();
        total += y * y;
    }
    Ok(total)
}

/// `‖(A − A′) V‖²_F` with `A′ = softmax(S − Q[:,k] K[:,k]ᵀ / √d)`.
pub fn impact_query(trace: &[LayerTrace], layer: usize, k: usize) -> Result<f64> {
    let t = check_index(trace, layer, k, |t| t.q.cols())?;
    Ok(score_removal_impact(t, k))
}

/// Identical to [`impact_query`]: removing key dimension `k` subtracts the
/// same rank-one term from the scores.
pub fn impact_key(trace: &[LayerTrace], layer: usize, k: usize) -> Result<f64> {
    let t = check_index(trace, layer, k, |t| t.k.cols())?;
    Ok(score_removal_impact(t, k))
}

fn score_removal_impact(t: &LayerTrace, k: usize) -> f64 {
    let qk = t.q.column(k);
    let kk = t.k.column(k);
    if qk.iter().all(|&x| x == 0.0) || kk.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let scale = 1.0 / (t.q.cols() as f64).sqrt();
    let mut scores = attention_scores(&t.q, &t.k);
    let l = scores.rows();
    for i in 0..l {
        for j in 0..l {
            let s = scores.get(i, j) - qk[i] * kk[j] * scale;
            scores.set(i, j, s);
        }
    }
    let shifted = causal_softmax(&scores);
    let diff = t.attn.sub(&shifted).expect("same shape");
    diff.matmul(&t.v).expect("l×l · l×d").frobenius_norm_sq()
}

/// Layer-local impact of any neuron from a trace.
pub fn layer_local_impact(trace: &[LayerTrace], w: &WeightMap, n: &NeuronId) -> Result<f64> {
    match n.kind {
        NeuronKind::AttnQ => impact_query(trace, n.layer, n.index),
        NeuronKind::AttnK => impact_key(trace, n.layer, n.index),
        NeuronKind::AttnV => impact_value(trace, n.layer, n.index),
        NeuronKind::FwdUp | NeuronKind::FwdDown => impact_ffn(trace, w, n.layer, n.index),
    }
}

fn flat_distance(a: &Matrix64, b: &Matrix64) -> f64 {
    a.sub(b).expect("hidden states share a shape").frobenius_norm()
}

/// `‖Model(x) − Model_⊖N(x)‖₂` over the final hidden states of every
/// position, with the neuron's parameters zeroed.
pub fn full_model_impact(w: &WeightMap, tokens: &[TokenId], n: &NeuronId) -> Result<f64> {
    output_delta(w, tokens, &[*n].into_iter().collect())
}

/// Final-hidden-state change when every neuron in `set` is ablated at once.
pub fn output_delta(w: &WeightMap, tokens: &[TokenId], set: &NeuronSet) -> Result<f64> {
    let base = forward(w, tokens, &[])?;
    output_delta_from(&base.hidden, w, tokens, set)
}

fn output_delta_from(base: &Matrix64, w: &WeightMap, tokens: &[TokenId], set: &NeuronSet) -> Result<f64> {
    let ablated = ablate_weights(w, set)?;
    let out = forward(&ablated, tokens, &[])?;
    Ok(flat_distance(base, &out.hidden))
}

/// One impact per addressable neuron for a single context.
pub fn profile_context(w: &WeightMap, tokens: &[TokenId], mode: ImpactMode, context_id: usize) -> Result<ImpactReport> {
    let neurons: Vec<NeuronId> = w.config().neurons().collect();
    let base = forward(w, tokens, &[])?;
    let values: Vec<f64> = match mode {
        ImpactMode::LayerLocal => {
            neurons.par_iter().map(|n| layer_local_impact(&base.trace, w, n)).collect::<Result<_>>()?
        }
        ImpactMode::FullModel => neurons
            .par_iter()
            .map(|n| output_delta_from(&base.hidden, w, tokens, &[*n].into_iter().collect()))
            .collect::<Result<_>>()?,
    };
    Ok(ImpactReport { context_id, mode, impacts: neurons.into_iter().zip(values).collect() })
}

/// Profiles every context of a corpus.
pub fn profile_corpus(w: &WeightMap, corpus: &ProbeCorpus, mode: ImpactMode) -> Result<Vec<ImpactReport>> {
    corpus.contexts.par_iter().enumerate().map(|(i, ctx)| profile_context(w, ctx, mode, i)).collect()
}

/// How an activated neuron is chosen from an impact report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selector {
    /// Keep impacts `>= sigma`.
    Absolute(f64),
    /// Keep the `⌈p · n⌉` largest impacts within each (layer, kind) group.
    TopFraction(f64),
}

pub const DEFAULT_TOP_FRACTION: f64 = 0.005;

impl Default for Selector {
    fn default() -> Self {
        Selector::TopFraction(DEFAULT_TOP_FRACTION)
    }
}

impl Selector {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Selector::Absolute(s) if s.is_nan() => Err(Error::Param("threshold is NaN".into())),
            Selector::TopFraction(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Param(format!("top fraction must be in [0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Absolute(s) => write!(f, "abs:{s}"),
            Selector::TopFraction(p) => write!(f, "top:{p}"),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) =
            s.split_once(':').ok_or_else(|| Error::Param(format!("selector {s:?} is not top:P or abs:SIGMA")))?;
        let v: f64 = value.parse().map_err(|_| Error::Param(format!("bad selector value {value:?}")))?;
        let sel = match kind {
            "top" => Selector::TopFraction(v),
            "abs" => Selector::Absolute(v),
            _ => return Err(Error::Param(format!("selector {s:?} is not top:P or abs:SIGMA"))),
        };
        sel.validate()?;
        Ok(sel)
    }
}

/// Number of neurons kept from a group of `count` at fraction `p`.
pub fn top_count(p: f64, count: usize) -> usize {
    // Absorb representation error so that e.g. 0.3 · 10 keeps 3, not 4.
    (((p * count as f64) - 1e-9).ceil().max(0.0) as usize).min(count)
}

pub fn activated_neurons(report: &ImpactReport, selector: Selector) -> Result<NeuronSet> {
    selector.validate()?;
    match selector {
        Selector::Absolute(sigma) => Ok(report.impacts.iter().filter(|(_, &v)| v >= sigma).map(|(n, _)| *n).collect()),
        Selector::TopFraction(p) => {
            let mut groups: BTreeMap<(usize, NeuronKind), Vec<(usize, f64)>> = BTreeMap::new();
            for (n, &v) in &report.impacts {
                groups.entry((n.layer, n.kind)).or_default().push((n.index, v));
            }
            let mut out = Vec::new();
            for ((layer, kind), mut members) in groups {
                let keep = top_count(p, members.len());
                members.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                out.extend(members.into_iter().take(keep).map(|(i, _)| NeuronId::new(layer, kind, i)));
            }
            Ok(out.into_iter().collect())
        }
    }
}

/// Neurons activated in every report (intersection over contexts).
pub fn context_neurons_from_reports(reports: &[ImpactReport], selector: Selector) -> Result<NeuronSet> {
    let Some(first) = reports.first() else {
        return Err(Error::Param("no impact reports to intersect".into()));
    };
    if reports.iter().any(|r| r.mode != first.mode) {
        return Err(Error::Param("cannot intersect impact reports from different modes".into()));
    }
    let mut acc = activated_neurons(first, selector)?;
    for r in &reports[1..] {
        acc = acc.intersection(&activated_neurons(r, selector)?);
    }
    Ok(acc)
}

pub fn context_neurons(w: &WeightMap, corpus: &ProbeCorpus, selector: Selector, mode: ImpactMode) -> Result<NeuronSet> {
    context_neurons_from_reports(&profile_corpus(w, corpus, mode)?, selector)
}

/// Intersection of two models' context-neuron sets.
pub fn shared_neurons(a: &NeuronSet, b: &NeuronSet) -> NeuronSet {
    a.intersection(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub shared: usize,
    pub only_a: usize,
    pub only_b: usize,
    pub union: usize,
    pub shared_pct: f64,
    pub only_a_pct: f64,
    pub only_b_pct: f64,
}

impl OverlapStats {
    /// Percentages are of the union; an empty union yields all zeros.
    pub fn from_counts(shared: usize, only_a: usize, only_b: usize) -> Self {
        let union = shared + only_a + only_b;
        let pct = |x: usize| if union == 0 { 0.0 } else { 100.0 * x as f64 / union as f64 };
        Self {
            shared,
            only_a,
            only_b,
            union,
            shared_pct: pct(shared),
            only_a_pct: pct(only_a),
            only_b_pct: pct(only_b),
        }
    }
}

pub fn overlap_stats(a: &NeuronSet, b: &NeuronSet) -> OverlapStats {
    let shared = a.intersection(b).len();
    OverlapStats::from_counts(shared, a.len() - shared, b.len() - shared)
}

/// Count of set members per (layer, kind) for every group of the config,
/// including empty ones.
pub fn layer_module_histogram(s: &NeuronSet, cfg: &ModelConfig) -> BTreeMap<(usize, NeuronKind), usize> {
    let mut out: BTreeMap<(usize, NeuronKind), usize> =
        (0..cfg.n_layers).flat_map(|l| NeuronKind::ALL.map(|k| ((l, k), 0))).collect();
    for n in s {
        *out.entry((n.layer, n.kind)).or_insert(0) += 1;
    }
    out
}

pub fn histogram_csv(hist: &BTreeMap<(usize, NeuronKind), usize>) -> String {
    let mut s = String::from("layer,kind,count\n");
    for ((layer, kind), count) in hist {
        s.push_str(&format!("{layer},{kind},{count}\n"));
    }
    s
}

/// Per-group sizes of a set, usable as a random-sampling budget.
pub fn budget_of(s: &NeuronSet) -> BTreeMap<(usize, NeuronKind), usize> {
    s.groups().into_iter().map(|(g, v)| (g, v.len())).collect()
}

/// Uniform sample without replacement inside each (layer, kind) group,
/// matching `budget` exactly. Groups are drawn in sorted order from one
/// seeded stream.
pub fn random_neuron_set(
    budget: &BTreeMap<(usize, NeuronKind), usize>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<NeuronSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (&(layer, kind), &count) in budget {
        if layer >= cfg.n_layers {
            return Err(Error::Param(format!("budget layer {layer} out of range")));
        }
        let size = cfg.group_size(kind);
        if count > size {
            return Err(Error::Param(format!("budget {count} exceeds group size {size} for layer {layer} {kind}")));
        }
        out.extend(sample(&mut rng, size, count).into_iter().map(|i| NeuronId::new(layer, kind, i)));
    }
    Ok(out.into_iter().collect())
}

pub const IMPACT_CSV_HEADER: [&str; 6] = ["context_id", "layer", "kind", "index", "impact", "mode"];

impl ImpactReport {
    /// `context_id,layer,kind,index,impact,mode`; impacts are written in the
    /// shortest form that parses back to the same `f64`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(IMPACT_CSV_HEADER).expect("in-memory write");
        for (n, v) in &self.impacts {
            w.write_record([
                self.context_id.to_string(),
                n.layer.to_string(),
                n.kind.to_string(),
                n.index.to_string(),
                format!("{v:?}"),
                self.mode.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn parse_csv(text: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| Error::format(source, 1, e.to_string()))?.clone();
        if header.iter().ne(IMPACT_CSV_HEADER) {
            return Err(Error::format(source, 1, "unexpected header"));
        }
        let mut ctx = None;
        let mut mode = None;
        let mut impacts = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::format(source, line, e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("");
            let bad = |what: &str| Error::format(source, line, format!("bad {what}"));
            let c: usize = field(0).parse().map_err(|_| bad("context_id"))?;
            let layer: usize = field(1).parse().map_err(|_| bad("layer"))?;
            let kind: NeuronKind = field(2).parse().map_err(|_| bad("kind"))?;
            let index: usize = field(3).parse().map_err(|_| bad("index"))?;
            let v: f64 = field(4).parse().map_err(|_| bad("impact"))?;
            let m: ImpactMode = field(5).parse().map_err(|_| bad("mode"))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(bad("impact (must be finite and >= 0)"));
            }
            if *ctx.get_or_insert(c) != c || *mode.get_or_insert(m) != m {
                return Err(Error::format(source, line, "mixed contexts or modes in one report"));
            }
            impacts.insert(NeuronId::new(layer, kind, index), v);
        }
        let (Some(context_id), Some(mode)) = (ctx, mode) else {
            return Err(Error::format(source, 1, "empty impact report"));
        };
        Ok(Self { context_id, mode, impacts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text, &path.display().to_string())
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(self.to_csv().as_bytes())
    }
}
