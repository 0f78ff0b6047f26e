// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared-neuron low-rank fusion and the linear / drop-and-rescale
//! baselines.
//!
//! For every layer and projection with a non-empty shared index set:
//!
//! ```text
//! Δ      = W_src − W_tgt
//! Δ_r    = rank-r truncated SVD of Δ
//! W_new  = W_tgt + β · mask(Δ_r)
//! ```
//!
//! where `mask` keeps the shared columns (attn.q/k/v, and fwd.up on both the
//! up and gate matrices) or shared rows (fwd.down) and zeroes the rest.
//! Projections with no shared neurons, and the embedding matrices, are
//! copied from the target unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::WeightMap;
use crate::error::{Error, Result};
use crate::model::Projection;
use crate::neuron::NeuronSet;
use crate::tensor::{svd_labeled, truncate_rank, Axis, Matrix, Matrix64};

/// Whether the SVD sees the full delta (then the result is masked) or the
/// already-masked delta.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SvdOrder {
    #[default]
    #[serde(rename = "full-then-mask")]
    FullThenMask,
    #[serde(rename = "mask-then-svd")]
    MaskThenSvd,
}

impl fmt::Display for SvdOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SvdOrder::FullThenMask => "full-then-mask",
            SvdOrder::MaskThenSvd => "mask-then-svd",
        })
    }
}

impl FromStr for SvdOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full-then-mask" => Ok(SvdOrder::FullThenMask),
            "mask-then-svd" => Ok(SvdOrder::MaskThenSvd),
            _ => Err(Error::Param(format!("unknown svd order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    Snrf,
    Linear,
    Dare,
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMethod::Snrf => "snrf",
            MergeMethod::Linear => "linear",
            MergeMethod::Dare => "dare",
        })
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snrf" => Ok(MergeMethod::Snrf),
            "linear" => Ok(MergeMethod::Linear),
            "dare" => Ok(MergeMethod::Dare),
            _ => Err(Error::Param(format!("unknown merge method {s:?} (snrf|linear|dare)"))),
        }
    }
}

pub const DEFAULT_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MergeConfig {
    pub rank: usize,
    pub beta: f64,
    pub shared: NeuronSet,
    pub method: MergeMethod,
    pub dare_drop_prob: f64,
    pub seed: u64,
    pub svd_order: SvdOrder,
    /// Permit β outside [0, 1].
    pub allow_beta_override: bool,
}

impl MergeConfig {
    pub fn snrf(shared: NeuronSet, rank: usize, beta: f64) -> Self {
        Self {
            rank,
            beta,
            shared,
            method: MergeMethod::Snrf,
            dare_drop_prob: 0.0,
            seed: 0,
            svd_order: SvdOrder::FullThenMask,
            allow_beta_override: false,
        }
    }
}

pub(crate) fn check_beta(beta: f64, allow_override: bool) -> Result<()> {
    if !beta.is_finite() {
        return Err(Error::Param(format!("beta must be finite, got {beta}")));
    }
    if !allow_override && !(0.0..=1.0).contains(&beta) {
        return Err(Error::Param(format!("beta {beta} outside [0, 1] (pass the override flag to allow)")));
    }
    Ok(())
}

/// `W_src − W_tgt` for every canonical tensor, in 32-bit.
pub fn delta(src: &WeightMap, tgt: &WeightMap) -> Result<BTreeMap<String, Matrix>> {
    src.check_correspondence(tgt)?;
    Ok(src
        .tensors()
        .iter()
        .zip(tgt.tensors().values())
        .map(|((name, a), b)| {
            let d = Matrix::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) - b.get(r, c));
            (name.clone(), d)
        })
        .collect())
}

/// The masked rank-`rank` update for one tensor delta.
pub fn masked_low_rank(
    delta: &Matrix64,
    indices: &[usize],
    axis: Axis,
    rank: usize,
    order: SvdOrder,
    label: &str,
) -> Result<Matrix64> {
    let k = delta.rows().min(delta.cols());
    if rank == 0 || rank > k {
        return Err(Error::Param(format!("rank {rank} outside 1..={k} for {label}")));
    }
    let input = match order {
        SvdOrder::FullThenMask => delta.clone(),
        SvdOrder::MaskThenSvd => delta.mask_to_neurons(indices, axis)?,
    };
    let factors = svd_labeled(&input, label)?;
    truncate_rank(&factors, rank)?.mask_to_neurons(indices, axis)
}

/// Writes `tgt + β · update` at every position the mask keeps; all other
/// entries stay bit-identical to `tgt`.
fn apply_masked(
    tgt: &Matrix,
    update: &Matrix64,
    indices: &[usize],
    axis: Axis,
    beta: f64,
    label: &str,
) -> Result<Matrix> {
    let mut out = tgt.clone();
    let cols = tgt.cols();
    let data = out.data_mut();
    let positions: Vec<(usize, usize)> = match axis {
        Axis::Rows => indices.iter().flat_map(|&i| (0..cols).map(move |c| (i, c))).collect(),
        Axis::Cols => indices.iter().flat_map(|&i| (0..tgt.rows()).map(move |r| (r, i))).collect(),
    };
    for (r, c) in positions {
        let i = r * cols + c;
        let v = (f64::from(data[i]) + beta * update.get(r, c)) as f32;
        if !v.is_finite() {
            return Err(Error::Param(format!("merged value at {label}[{r},{c}] overflows f32")));
        }
        data[i] = v;
    }
    Ok(out)
}

/// Shared-neuron low-rank fusion of `src` into `tgt`.
pub fn snrf_merge(src: &WeightMap, tgt: &WeightMap, cfg: &MergeConfig) -> Result<WeightMap> {
    src.check_correspondence(tgt)?;
    check_beta(cfg.beta, cfg.allow_beta_override)?;
    let mc = tgt.config();
    let max_rank = mc.d_model.min(mc.d_inter);
    if cfg.rank == 0 || cfg.rank > max_rank {
        return Err(Error::Param(format!("rank {} outside 1..={max_rank}", cfg.rank)));
    }
    cfg.shared.validate(mc)?;
    if cfg.beta == 0.0 {
        return Ok(tgt.clone());
    }

    let jobs: Vec<(String, usize, Projection)> =
        (0..mc.n_layers).flat_map(|l| Projection::ALL.map(|p| (p.tensor_name(l), l, p))).collect();
    let updated: Vec<Option<(String, Matrix)>> = jobs
        .par_iter()
        .map(|(name, layer, p)| {
            let (kind, axis) = p.neuron_axis();
            let indices = cfg.shared.indices(*layer, kind);
            if indices.is_empty() {
                return Ok(None);
            }
            let t = tgt.projection(*layer, *p);
            let d = src.projection(*layer, *p).sub(t)?;
            let update = masked_low_rank(&d, &indices, axis, cfg.rank, cfg.svd_order, name)?;
            Ok(Some((name.clone(), apply_masked(t, &update, &indices, axis, cfg.beta, name)?)))
        })
        .collect::<Result<_>>()?;

    let mut out = tgt.clone();
    for (name, m) in updated.into_iter().flatten() {
        out.set_tensor(&name, m)?;
    }
    Ok(out)
}

fn finite(like: &Matrix, data: Vec<f32>, name: &str) -> Result<Matrix> {
    Matrix::from_vec(like.rows(), like.cols(), data)
        .map_err(|e| Error::Param(format!("merged {name} overflows f32: {e}")))
}

/// `tgt + β (src − tgt)` on every tensor, embeddings included.
pub fn linear_merge(src: &WeightMap, tgt: &WeightMap, beta: f64) -> Result<WeightMap> {
    src.check_correspondence(tgt)?;
    check_beta(beta, true)?;
    if beta == 0.0 {
        return Ok(tgt.clone());
    }
    let mut out = tgt.clone();
    for (name, s) in src.tensors() {
        let t = tgt.tensor(name)?;
        let data = t
            .as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(&tv, &sv)| (f64::from(tv) + beta * (f64::from(sv) - f64::from(tv))) as f32)
            .collect();
        out.set_tensor(name, finite(t, data, name)?)?;
    }
    Ok(out)
}

/// Zeroes each entry independently with probability `p` and scales the
/// survivors by `1 / (1 − p)`.
pub fn drop_and_rescale<R: Rng + ?Sized>(delta: &Matrix64, p: f64, rng: &mut R) -> Result<Matrix64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("drop probability must be in [0, 1), got {p}")));
    }
    let keep_scale = 1.0 / (1.0 - p);
    Ok(delta.map(|v| if rng.gen::<f64>() < p { 0.0 } else { v * keep_scale }))
}

/// Drop-and-rescale merge: `tgt + β · DARE(src − tgt)` on every tensor.
/// Random draws follow tensor-name order, row-major within a tensor.
pub fn dare_merge(src: &WeightMap, tgt: &WeightMap, beta: f64, drop_prob: f64, seed: u64) -> Result<WeightMap> {
    src.check_correspondence(tgt)?;
    check_beta(beta, true)?;
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::Param(format!("drop probability must be in [0, 1), got {drop_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = tgt.clone();
    for (name, s) in src.tensors() {
        let t = tgt.tensor(name)?;
        let d = s.sub(t)?;
        let dropped = drop_and_rescale(&d, drop_prob, &mut rng)?;
        let data =
            t.as_slice().iter().zip(dropped.as_slice()).map(|(&tv, &d)| (f64::from(tv) + beta * d) as f32).collect();
        out.set_tensor(name, finite(t, data, name)?)?;
    }
    Ok(out)
}

/// Dispatches on `cfg.method`.
pub fn merge(src: &WeightMap, tgt: &WeightMap, cfg: &MergeConfig) -> Result<WeightMap> {
    match cfg.method {
        MergeMethod::Snrf => snrf_merge(src, tgt, cfg),
        MergeMethod::Linear => {
            check_beta(cfg.beta, cfg.allow_beta_override)?;
            linear_merge(src, tgt, cfg.beta)
        }
        MergeMethod::Dare => {
            check_beta(cfg.beta, cfg.allow_beta_override)?;
            dare_merge(src, tgt, cfg.beta, cfg.dare_drop_prob, cfg.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::neuron::{NeuronId, NeuronKind};

    fn pair() -> (WeightMap, WeightMap) {
        let cfg = ModelConfig { n_layers: 2, d_model: 4, d_inter: 6, vocab: 5 };
        (WeightMap::random(cfg, 1).unwrap(), WeightMap::random(cfg, 2).unwrap())
    }

    #[test]
    fn delta_of_self_is_zero() {
        let (a, _) = pair();
        assert!(delta(&a, &a).unwrap().values().all(|m| m.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn config_mismatch_is_correspondence_error() {
        let (a, _) = pair();
        let other = WeightMap::random(ModelConfig { n_layers: 1, d_model: 4, d_inter: 6, vocab: 5 }, 3).unwrap();
        assert!(matches!(delta(&a, &other), Err(Error::Correspondence(_))));
        let cfg = MergeConfig::snrf(NeuronSet::new(), 1, 0.5);
        assert!(matches!(snrf_merge(&a, &other, &cfg), Err(Error::Correspondence(_))));
    }

    #[test]
    fn beta_and_rank_validation() {
        let (a, b) = pair();
        let set: NeuronSet = [NeuronId::new(0, NeuronKind::AttnQ, 1)].into_iter().collect();
        assert!(snrf_merge(&a, &b, &MergeConfig::snrf(set.clone(), 1, 1.5)).is_err());
        let mut cfg = MergeConfig::snrf(set.clone(), 1, 1.5);
        cfg.allow_beta_override = true;
        assert!(snrf_merge(&a, &b, &cfg).is_ok());
        assert!(snrf_merge(&a, &b, &MergeConfig::snrf(set.clone(), 0, 0.5)).is_err());
        assert!(snrf_merge(&a, &b, &MergeConfig::snrf(set, 5, 0.5)).is_err());
    }

    #[test]
    fn dare_rejects_bad_probability() {
        let (a, b) = pair();
        assert!(dare_merge(&a, &b, 0.5, 1.0, 0).is_err());
        assert!(dare_merge(&a, &b, 0.5, -0.1, 0).is_err());
    }

    #[test]
    fn parse_enums() {
        assert_eq!("mask-then-svd".parse::<SvdOrder>().unwrap(), SvdOrder::MaskThenSvd);
        assert_eq!("dare".parse::<MergeMethod>().unwrap(), MergeMethod::Dare);
        assert!("frank".parse::<MergeMethod>().is_err());
    }
}
