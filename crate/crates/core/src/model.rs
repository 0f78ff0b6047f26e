// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-head decoder-only transformer with activation-site interventions.
//!
//! Per layer, with residual stream `X` (l × d):
//!
//! ```text
//! Q = X W_Q,  K = X W_K,  V = X W_V
//! A = softmax(Q Kᵀ / √d  + causal mask)        (row-wise)
//! X' = X + A V
//! H = SiLU(X' W_gate) ⊙ (X' W_up)
//! X_out = X' + H W_down
//! ```
//!
//! There is no layer norm and no positional encoding. Logits are
//! `X_final · unembed`. Everything after the embedding lookup runs in 64-bit.

use serde::{Deserialize, Serialize};

use crate::checkpoint::WeightMap;
use crate::error::{Error, Result};
use crate::neuron::{NeuronId, NeuronKind, NeuronSet};
use crate::tensor::{Axis, Matrix64};

pub type TokenId = u32;

pub const EOS: TokenId = 0;
pub const INST: TokenId = 1;
pub const SEP: TokenId = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inter: usize,
    pub vocab: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_inter == 0 {
            return Err(Error::Param(format!("config dimensions must be >= 1: {self:?}")));
        }
        if self.vocab < 3 {
            return Err(Error::Param(format!("vocab must be >= 3 (reserved ids 0..=2), got {}", self.vocab)));
        }
        Ok(())
    }

    /// Number of neurons of `kind` in one layer.
    pub fn group_size(&self, kind: NeuronKind) -> usize {
        if kind.is_attention() {
            self.d_model
        } else {
            self.d_inter
        }
    }

    /// Every addressable neuron in canonical order.
    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        (0..self.n_layers).flat_map(move |layer| {
            NeuronKind::ALL
                .into_iter()
                .flat_map(move |kind| (0..self.group_size(kind)).map(move |i| NeuronId::new(layer, kind, i)))
        })
    }

    pub fn neuron_count(&self) -> usize {
        self.n_layers * (3 * self.d_model + 2 * self.d_inter)
    }
}

/// Per-layer weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    AttnQ,
    AttnK,
    AttnV,
    MlpGate,
    MlpUp,
    MlpDown,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::AttnQ,
        Projection::AttnK,
        Projection::AttnV,
        Projection::MlpGate,
        Projection::MlpUp,
        Projection::MlpDown,
    ];

    pub fn tensor_name(self, layer: usize) -> String {
        let part = match self {
            Projection::AttnQ => "attn.q",
            Projection::AttnK => "attn.k",
            Projection::AttnV => "attn.v",
            Projection::MlpGate => "mlp.gate",
            Projection::MlpUp => "mlp.up",
            Projection::MlpDown => "mlp.down",
        };
        format!("layers.{layer}.{part}.weight")
    }

    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Projection::AttnQ | Projection::AttnK | Projection::AttnV => (cfg.d_model, cfg.d_model),
            Projection::MlpGate | Projection::MlpUp => (cfg.d_model, cfg.d_inter),
            Projection::MlpDown => (cfg.d_inter, cfg.d_model),
        }
    }

    /// The neuron kind that addresses this matrix and the axis its neurons
    /// occupy. Gate and up share the fwd.up columns; fwd.down neurons are
    /// rows of the down projection.
    pub fn neuron_axis(self) -> (NeuronKind, Axis) {
        match self {
            Projection::AttnQ => (NeuronKind::AttnQ, Axis::Cols),
            Projection::AttnK => (NeuronKind::AttnK, Axis::Cols),
            Projection::AttnV => (NeuronKind::AttnV, Axis::Cols),
            Projection::MlpGate | Projection::MlpUp => (NeuronKind::FwdUp, Axis::Cols),
            Projection::MlpDown => (NeuronKind::FwdDown, Axis::Rows),
        }
    }

    /// Projections whose rows/columns a neuron of `kind` occupies.
    pub fn for_kind(kind: NeuronKind) -> &'static [Projection] {
        match kind {
            NeuronKind::AttnQ => &[Projection::AttnQ],
            NeuronKind::AttnK => &[Projection::AttnK],
            NeuronKind::AttnV => &[Projection::AttnV],
            NeuronKind::FwdUp => &[Projection::MlpGate, Projection::MlpUp],
            NeuronKind::FwdDown => &[Projection::MlpDown],
        }
    }
}

/// A change applied at activation sites during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Intervention {
    /// Zero the activation column of every listed neuron.
    Deactivate(NeuronSet),
    /// Scale one neuron's activation column by `lambda` (> 0).
    Amplify { neuron: NeuronId, lambda: f64 },
}

impl Intervention {
    pub fn amplify(neuron: NeuronId, lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Param(format!("amplification factor must be finite and > 0, got {lambda}")));
        }
        Ok(Intervention::Amplify { neuron, lambda })
    }
}

/// Internal activations of one layer for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual stream entering the layer (l × d).
    pub x_in: Matrix64,
    /// Query/key/value activations after interventions (l × d).
    pub q: Matrix64,
    pub k: Matrix64,
    pub v: Matrix64,
    /// Causal attention weights (l × l); rows sum to 1.
    pub attn: Matrix64,
    /// Attention output `A V` (l × d).
    pub y_attn: Matrix64,
    /// Gated intermediate activation after interventions (l × d_inter).
    pub h_act: Matrix64,
    /// MLP output `H W_down` (l × d).
    pub y_mlp: Matrix64,
}

impl LayerTrace {
    /// Input to the MLP sublayer, `X + A V`.
    pub fn mlp_input(&self) -> Matrix64 {
        self.x_in.add(&self.y_attn).expect("trace shapes agree")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Final residual stream (l × d).
    pub hidden: Matrix64,
    /// l × vocab.
    pub logits: Matrix64,
    pub trace: Vec<LayerTrace>,
}

/// Column multipliers per layer and activation site.
struct SiteScales {
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

impl SiteScales {
    fn build(cfg: &ModelConfig, interventions: &[Intervention]) -> Result<Self> {
        let attn = vec![vec![1.0; cfg.d_model]; cfg.n_layers];
        let mut s =
            SiteScales { q: attn.clone(), k: attn.clone(), v: attn, h: vec![vec![1.0; cfg.d_inter]; cfg.n_layers] };
        for iv in interventions {
            match iv {
                Intervention::Deactivate(set) => {
                    for n in set {
                        n.validate(cfg)?;
                        *s.slot(n) = 0.0;
                    }
                }
                Intervention::Amplify { neuron, lambda } => {
                    neuron.validate(cfg)?;
                    if !(lambda.is_finite() && *lambda > 0.0) {
                        return Err(Error::Param(format!("amplification factor must be finite and > 0, got {lambda}")));
                    }
                    *s.slot(neuron) *= lambda;
                }
            }
        }
        Ok(s)
    }

    fn slot(&mut self, n: &NeuronId) -> &mut f64 {
        let site = match n.kind {
            NeuronKind::AttnQ => &mut self.q,
            NeuronKind::AttnK => &mut self.k,
            NeuronKind::AttnV => &mut self.v,
            NeuronKind::FwdUp | NeuronKind::FwdDown => &mut self.h,
        };
        &mut site[n.layer][n.index]
    }
}

fn scale_columns(m: &mut Matrix64, scales: &[f64]) {
    if scales.iter().all(|&s| s == 1.0) {
        return;
    }
    let cols = m.cols();
    for (i, x) in m.data_mut().iter_mut().enumerate() {
        *x *= scales[i % cols];
    }
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Raw attention scores `Q Kᵀ / √d` (no mask applied).
pub(crate) fn attention_scores(q: &Matrix64, k: &Matrix64) -> Matrix64 {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    q.matmul(&k.transpose()).expect("q/k shapes agree").scale(scale)
}

/// Row-wise softmax over positions `j <= i`; masked entries are exactly 0.
pub(crate) fn causal_softmax(scores: &Matrix64) -> Matrix64 {
    let l = scores.rows();
    let mut out = Matrix64::zeros(l, scores.cols());
    for i in 0..l {
        let visible = &scores.row(i)[..=i];
        let max = visible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = visible.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

fn validate_tokens(cfg: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Param("empty token sequence".into()));
    }
    if let Some((pos, t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab) {
        return Err(Error::Param(format!("token {t} at position {pos} out of vocabulary (size {})", cfg.vocab)));
    }
    Ok(())
}

/// Runs the model over `tokens`, applying `interventions` at activation sites.
pub fn forward(w: &WeightMap, tokens: &[TokenId], interventions: &[Intervention]) -> Result<ForwardOutput> {
    let cfg = *w.config();
    validate_tokens(&cfg, tokens)?;
    let scales = SiteScales::build(&cfg, interventions)?;

    let embed = w.embed();
    let mut x = Matrix64::from_fn(tokens.len(), cfg.d_model, |i, c| f64::from(embed.get(tokens[i] as usize, c)));
    let mut trace = Vec::with_capacity(cfg.n_layers);
    for layer in 0..cfg.n_layers {
        let mut q = x.matmul(w.projection(layer, Projection::AttnQ))?;
        let mut k = x.matmul(w.projection(layer, Projection::AttnK))?;
        let mut v = x.matmul(w.projection(layer, Projection::AttnV))?;
        scale_columns(&mut q, &scales.q[layer]);
        scale_columns(&mut k, &scales.k[layer]);
        scale_columns(&mut v, &scales.v[layer]);
        let attn = causal_softmax(&attention_scores(&q, &k));
        let y_attn = attn.matmul(&v)?;
        let mid = x.add(&y_attn)?;

        let gate = mid.matmul(w.projection(layer, Projection::MlpGate))?;
        let up = mid.matmul(w.projection(layer, Projection::MlpUp))?;
        let mut h_act = Matrix64::from_fn(gate.rows(), gate.cols(), |r, c| silu(gate.get(r, c)) * up.get(r, c));
        scale_columns(&mut h_act, &scales.h[layer]);
        let y_mlp = h_act.matmul(w.projection(layer, Projection::MlpDown))?;
        let out = mid.add(&y_mlp)?;

        trace.push(LayerTrace { x_in: x, q, k, v, attn, y_attn, h_act, y_mlp });
        x = out;
    }
    let logits = x.matmul(w.unembed())?;
    Ok(ForwardOutput { hidden: x, logits, trace })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: appends the last-position argmax until `max_new` tokens
/// have been generated or EOS is produced (the EOS is kept). Returns the
/// prompt followed by the generated tokens.
pub fn greedy_decode(
    w: &WeightMap,
    prompt: &[TokenId],
    max_new: usize,
    interventions: &[Intervention],
) -> Result<Vec<TokenId>> {
    validate_tokens(w.config(), prompt)?;
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        let out = forward(w, &seq, interventions)?;
        let next = argmax(out.logits.row(seq.len() - 1)) as TokenId;
        seq.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(seq)
}

/// Copy of `w` with the parameters producing or consuming each neuron
/// zeroed: W_Q/W_K/W_V column for attention neurons, W_up and W_gate column
/// for fwd.up, W_down row for fwd.down.
pub fn ablate_weights(w: &WeightMap, s: &NeuronSet) -> Result<WeightMap> {
    s.validate(w.config())?;
    let mut out = w.clone();
    for n in s {
        for &p in Projection::for_kind(n.kind) {
            let (_, axis) = p.neuron_axis();
            let m = out.tensor_mut(&p.tensor_name(n.layer));
            let cols = m.cols();
            let data = m.data_mut();
            match axis {
                Axis::Cols => {
                    for r in 0..data.len() / cols {
                        data[r * cols + n.index] = 0.0;
                    }
                }
                Axis::Rows => data[n.index * cols..(n.index + 1) * cols].fill(0.0),
            }
        }
    }
    Ok(out)
}
