// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic quadratic-loss scenarios comparing a masked low-rank update
//! against the full linear update.
//!
//! The loss around the target weights is exactly quadratic,
//! `L(W₀ + D) − L(W₀) = ⟨g, D⟩ + ½⟨D, H D⟩`, with curvature
//! `H = μ_S P_S + μ_⊥ P_⊥` where `P_S` keeps the first `s_size` rows of a
//! matrix and `P_⊥` keeps the rest. Because there is no higher-order term,
//! every loss change below is exact up to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{random_rank_r_error, svd, truncate_rank, Matrix64};

/// Absolute slack on every inequality check.
pub const CHECK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScenarioParams {
    pub rows: usize,
    pub cols: usize,
    /// S is rows `0..s_size`.
    pub s_size: usize,
    /// Gradient concentration bound: `‖P_⊥ g‖ ≤ ε ‖P_S g‖`.
    pub epsilon: f64,
    /// Alignment bound: `⟨P_⊥ g, Δ_⊥⟩ ≥ −η ‖P_⊥ g‖ ‖Δ_⊥‖`.
    pub eta: f64,
    pub mu_s: f64,
    pub mu_perp: f64,
    pub seed: u64,
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Param("scenario dimensions must be >= 1".into()));
        }
        if self.s_size == 0 || self.s_size > self.rows {
            return Err(Error::Param(format!("s_size must be in 1..={}, got {}", self.rows, self.s_size)));
        }
        for (name, v) in [("epsilon", self.epsilon), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.mu_s.is_finite() && self.mu_perp.is_finite() && 0.0 < self.mu_s && self.mu_s <= self.mu_perp) {
            return Err(Error::Param(format!(
                "curvatures must satisfy 0 < mu_s <= mu_perp, got {} and {}",
                self.mu_s, self.mu_perp
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticScenario {
    pub params: ScenarioParams,
    /// Gradient at the target weights.
    pub g: Matrix64,
    /// Source minus target.
    pub delta: Matrix64,
}

impl QuadraticScenario {
    fn split(&self, m: &Matrix64) -> (Matrix64, Matrix64) {
        let s: Vec<usize> = (0..self.params.s_size).collect();
        let perp: Vec<usize> = (self.params.s_size..self.params.rows).collect();
        (
            m.mask_to_neurons(&s, crate::tensor::Axis::Rows).expect("in range"),
            m.mask_to_neurons(&perp, crate::tensor::Axis::Rows).expect("in range"),
        )
    }

    /// `P_S m`.
    pub fn project_s(&self, m: &Matrix64) -> Matrix64 {
        self.split(m).0
    }

    /// `P_⊥ m`.
    pub fn project_perp(&self, m: &Matrix64) -> Matrix64 {
        self.split(m).1
    }

    /// `⟨D, H D⟩`.
    pub fn curvature(&self, d: &Matrix64) -> f64 {
        let (s, p) = self.split(d);
        self.params.mu_s * s.frobenius_norm_sq() + self.params.mu_perp * p.frobenius_norm_sq()
    }
}

fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..=1.0))
}

/// Seeded scenario satisfying the gradient-concentration and alignment
/// assumptions by construction. The out-of-S gradient is shrunk onto the
/// concentration boundary when it exceeds it, and `Δ_⊥` is reflected across
/// the hyperplane orthogonal to `P_⊥ g` when the alignment bound fails.
pub fn make_scenario(params: ScenarioParams) -> Result<QuadraticScenario> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let s = params.s_size;
    let raw_g = uniform(params.rows, params.cols, &mut rng);
    let raw_delta = uniform(params.rows, params.cols, &mut rng);
    let in_s = |r: usize| r < s;

    let gs_norm = (0..s).flat_map(|r| raw_g.row(r).to_vec()).map(|x| x * x).sum::<f64>().sqrt();
    let gp_norm = (s..params.rows).flat_map(|r| raw_g.row(r).to_vec()).map(|x| x * x).sum::<f64>().sqrt();
    let bound = params.epsilon * gs_norm;
    let perp_scale = if gp_norm > bound {
        if gp_norm > 0.0 {
            bound / gp_norm
        } else {
            0.0
        }
    } else {
        1.0
    };
    let g = Matrix64::from_fn(params.rows, params.cols, |r, c| {
        if in_s(r) {
            raw_g.get(r, c)
        } else {
            raw_g.get(r, c) * perp_scale
        }
    });

    let gp_norm = gp_norm * perp_scale;
    let dp_norm = (s..params.rows).flat_map(|r| raw_delta.row(r).to_vec()).map(|x| x * x).sum::<f64>().sqrt();
    let inner: f64 = (s..params.rows)
        .flat_map(|r| (0..params.cols).map(move |c| (r, c)))
        .map(|(r, c)| g.get(r, c) * raw_delta.get(r, c))
        .sum();
    let reflect = gp_norm > 0.0 && inner < -params.eta * gp_norm * dp_norm;
    let delta = Matrix64::from_fn(params.rows, params.cols, |r, c| {
        let d = raw_delta.get(r, c);
        if reflect && !in_s(r) {
            d - 2.0 * inner / (gp_norm * gp_norm) * g.get(r, c)
        } else {
            d
        }
    });
    Ok(QuadraticScenario { params, g, delta })
}

/// `β⟨g, D⟩ + (β²/2)(μ_S ‖P_S D‖² + μ_⊥ ‖P_⊥ D‖²)`.
pub fn exact_loss_delta(sc: &QuadraticScenario, d: &Matrix64, beta: f64) -> Result<f64> {
    let first = sc.g.dot(d)?;
    Ok(beta * first + 0.5 * beta * beta * sc.curvature(d))
}

/// Rank-`r` truncated SVD of the masked delta `P_S Δ`.
pub fn snrf_update(sc: &QuadraticScenario, r: usize) -> Result<Matrix64> {
    let ds = sc.project_s(&sc.delta);
    truncate_rank(&svd(&ds)?, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundCheck {
    pub beta: f64,
    pub rank: usize,
    pub loss_lin: f64,
    pub loss_snrf: f64,
    /// `ΔL_lin − ΔL_snrf`.
    pub gap: f64,
    /// Curvature-outside-S term minus truncation and leakage terms.
    pub rhs: f64,
    pub gap_holds: bool,
    pub condition_holds: bool,
    pub improvement_holds: bool,
}

/// Exact loss gap between the linear and masked low-rank updates, the
/// claimed lower bound on it, and the sufficient condition for improvement.
pub fn check_gap(sc: &QuadraticScenario, r: usize, beta: f64) -> Result<BoundCheck> {
    if !beta.is_finite() {
        return Err(Error::Param(format!("beta must be finite, got {beta}")));
    }
    let p = &sc.params;
    let snrf = snrf_update(sc, r)?;
    let loss_lin = exact_loss_delta(sc, &sc.delta, beta)?;
    let loss_snrf = exact_loss_delta(sc, &snrf, beta)?;
    let gap = loss_lin - loss_snrf;

    let (ds, dp) = sc.split(&sc.delta);
    let perp_sq = dp.frobenius_norm_sq();
    let trunc_sq = ds.sub(&snrf)?.frobenius_norm_sq();
    let c = p.epsilon * (1.0 + p.eta);
    let leak = c * sc.project_s(&sc.g).frobenius_norm() * sc.delta.frobenius_norm();
    let half_b2 = 0.5 * beta * beta;
    let rhs = half_b2 * p.mu_perp * perp_sq - half_b2 * p.mu_s * trunc_sq - beta * leak;

    let condition_holds = beta > 0.0 && p.mu_perp * perp_sq > p.mu_s * trunc_sq + leak / beta;
    Ok(BoundCheck {
        beta,
        rank: r,
        loss_lin,
        loss_snrf,
        gap,
        rhs,
        gap_holds: gap >= rhs - CHECK_TOLERANCE,
        condition_holds,
        improvement_holds: loss_snrf < loss_lin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssumptionFlags {
    /// Gradient concentrates in S.
    pub a1: bool,
    /// Curvature gap `0 < μ_S ≤ μ_⊥`.
    pub a2: bool,
    /// First-order signal outside S is aligned.
    pub a3: bool,
    /// The truncated SVD beats every sampled rank-r candidate.
    pub a4: bool,
}

impl AssumptionFlags {
    pub fn all(&self) -> bool {
        self.a1 && self.a2 && self.a3 && self.a4
    }
}

pub const A4_TRIALS: usize = 200;

/// Checks the four assumptions numerically; the last one against
/// [`A4_TRIALS`] random least-squares rank-`r` candidates.
pub fn verify_assumptions(sc: &QuadraticScenario, r: usize) -> Result<AssumptionFlags> {
    let p = &sc.params;
    let (gs, gp) = sc.split(&sc.g);
    let (_, dp) = sc.split(&sc.delta);
    let a1 = gp.frobenius_norm() <= p.epsilon * gs.frobenius_norm() + CHECK_TOLERANCE;
    let a2 = 0.0 < p.mu_s && p.mu_s <= p.mu_perp;
    let a3 = gp.dot(&dp)? >= -p.eta * gp.frobenius_norm() * dp.frobenius_norm() - CHECK_TOLERANCE;

    let ds = sc.project_s(&sc.delta);
    let best = ds.sub(&snrf_update(sc, r)?)?.frobenius_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0xA4A4_A4A4);
    let mut a4 = true;
    for _ in 0..A4_TRIALS {
        match random_rank_r_error(&ds, r, &mut rng) {
            Ok(e) if e < best - CHECK_TOLERANCE => {
                a4 = false;
                break;
            }
            Ok(_) => {}
            // A degenerate random factor is not a valid candidate.
            Err(Error::Param(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(AssumptionFlags { a1, a2, a3, a4 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scenarios: usize,
    pub rows: usize,
    pub cols: usize,
    pub s_size: usize,
    pub epsilon: f64,
    pub eta: f64,
    pub mu_s: f64,
    pub mu_perp: f64,
    pub rank: usize,
    pub betas: Vec<f64>,
    /// Scenario `i` uses seed `seed + i`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub params: ScenarioParams,
    pub check: BoundCheck,
}

/// Runs every (scenario, β) pair. Rows come back in (scenario, β) order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.betas.is_empty() {
        return Err(Error::Param("no beta values given".into()));
    }
    if cfg.rank == 0 || cfg.rank > cfg.rows.min(cfg.cols) {
        return Err(Error::Param(format!("rank {} outside 1..={}", cfg.rank, cfg.rows.min(cfg.cols))));
    }
    let per_scenario: Vec<Vec<SweepRow>> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|i| {
            let params = ScenarioParams {
                rows: cfg.rows,
                cols: cfg.cols,
                s_size: cfg.s_size,
                epsilon: cfg.epsilon,
                eta: cfg.eta,
                mu_s: cfg.mu_s,
                mu_perp: cfg.mu_perp,
                seed: cfg.seed.wrapping_add(i as u64),
            };
            let sc = make_scenario(params)?;
            cfg.betas
                .iter()
                .map(|&b| Ok(SweepRow { params, check: check_gap(&sc, cfg.rank, b)? }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_scenario.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepSummary {
    pub rows: usize,
    pub gap_holds: usize,
    pub condition_holds: usize,
    pub improvement_holds: usize,
    /// Rows where the condition holds but the improvement does not.
    pub implication_violations: usize,
}

pub fn summarize(rows: &[SweepRow]) -> SweepSummary {
    let count = |f: &dyn Fn(&BoundCheck) -> bool| rows.iter().filter(|r| f(&r.check)).count();
    SweepSummary {
        rows: rows.len(),
        gap_holds: count(&|c| c.gap_holds),
        condition_holds: count(&|c| c.condition_holds),
        improvement_holds: count(&|c| c.improvement_holds),
        implication_violations: count(&|c| c.condition_holds && !c.improvement_holds),
    }
}

pub const SWEEP_CSV_HEADER: [&str; 14] = [
    "seed",
    "dims",
    "s_size",
    "epsilon",
    "eta",
    "mu_s",
    "mu_perp",
    "rank",
    "beta",
    "gap",
    "rhs",
    "gap_holds",
    "condition_holds",
    "improvement_holds",
];

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SWEEP_CSV_HEADER).expect("in-memory write");
    for r in rows {
        let (p, c) = (&r.params, &r.check);
        w.write_record([
            p.seed.to_string(),
            format!("{}x{}", p.rows, p.cols),
            p.s_size.to_string(),
            format!("{:?}", p.epsilon),
            format!("{:?}", p.eta),
            format!("{:?}", p.mu_s),
            format!("{:?}", p.mu_perp),
            c.rank.to_string(),
            format!("{:?}", c.beta),
            format!("{:?}", c.gap),
            format!("{:?}", c.rhs),
            c.gap_holds.to_string(),
            c.condition_holds.to_string(),
            c.improvement_holds.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
