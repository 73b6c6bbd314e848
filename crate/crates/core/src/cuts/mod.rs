//! Valid linear cuts over chi: secant disjunctions, the cut-generating LP,
//! the RLT feasibility residual, and the penalized objective baseline.

pub mod cglp;
pub mod secant;

pub use cglp::{build_and_solve_cglp, CglpConfig, CglpSolution};
pub use secant::{
    disjunct_constraints, equal_partition, secant_area, SecantDisjunction, DEGENERATE_TOL,
};

use crate::error::{Error, Result};
use crate::lifted::{build_sdp_program, build_sdp_program_with_objective, devectorize, LiftedIndex, LiftedSolution};
use crate::network::{InputBox, Network};
use crate::solver::{solve_conic, AffineRow, Rel, SolveResult, SolverConfig};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

/// Where a cut came from: the direction that spawned its disjunction, the
/// verifier iteration, and the CGLP objective at emission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutProvenance {
    pub phi_hash: u64,
    pub iteration: usize,
    pub cglp_value: f64,
}

/// A valid inequality alpha . chi >= beta, stored with sup-norm-one alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCut {
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub provenance: CutProvenance,
}

impl LinearCut {
    pub fn new(
        alpha: Vec<f64>,
        beta: f64,
        phi_hash: u64,
        iteration: usize,
        cglp_value: f64,
    ) -> Result<Self> {
        if !beta.is_finite() || alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("cut coefficients".into()));
        }
        if alpha.iter().all(|a| a.abs() < 1e-12) {
            return Err(Error::InvalidArgument("cut with zero alpha".into()));
        }
        Ok(LinearCut {
            alpha,
            beta,
            provenance: CutProvenance { phi_hash, iteration, cglp_value },
        })
    }

    /// The cut as a >= row over chi.
    pub fn to_row(&self, chi_len: usize) -> Result<AffineRow> {
        if self.alpha.len() != chi_len {
            return Err(Error::Dimension(format!(
                "cut over {} variables, chi has {}",
                self.alpha.len(),
                chi_len
            )));
        }
        let coeffs = self
            .alpha
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(i, &a)| (i, a))
            .collect();
        Ok(AffineRow::new(coeffs, Rel::Ge, self.beta))
    }

    /// beta - alpha . chi; positive when chi is cut off.
    pub fn violation_at(&self, chi: &[f64]) -> f64 {
        let dot: f64 = self.alpha.iter().zip(chi).map(|(a, x)| a * x).sum();
        self.beta - dot
    }
}

/// Hash of a direction's bit pattern, used to tie cuts to directions.
pub fn phi_hash(phi: &DVector<f64>) -> u64 {
    let mut h = DefaultHasher::new();
    for v in phi.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Pool of accepted cuts with near-duplicate rejection.
#[derive(Debug, Clone)]
pub struct CutPool {
    cuts: Vec<LinearCut>,
    pub cos_tol: f64,
    pub beta_tol: f64,
}

impl Default for CutPool {
    fn default() -> Self {
        CutPool { cuts: Vec::new(), cos_tol: 0.999, beta_tol: 1e-6 }
    }
}

#[derive(Serialize, Deserialize)]
struct CutRecord {
    chi_len: usize,
    alpha: Vec<(usize, f64)>,
    beta: f64,
    provenance: CutProvenance,
}

impl CutPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cuts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cuts.is_empty()
    }

    pub fn cuts(&self) -> &[LinearCut] {
        &self.cuts
    }

    /// Admit `cut` unless an existing cut is a near duplicate (cosine of the
    /// alphas above `cos_tol` and betas within `beta_tol`).
    pub fn push(&mut self, cut: LinearCut) -> bool {
        let norm = |v: &[f64]| -> f64 { v.iter().map(|x| x * x).sum::<f64>().sqrt() };
        let nc = norm(&cut.alpha);
        for have in &self.cuts {
            if have.alpha.len() != cut.alpha.len() {
                continue;
            }
            let dot: f64 = have.alpha.iter().zip(&cut.alpha).map(|(a, b)| a * b).sum();
            let cos = dot / (norm(&have.alpha) * nc).max(1e-300);
            if cos > self.cos_tol && (have.beta - cut.beta).abs() <= self.beta_tol {
                return false;
            }
        }
        self.cuts.push(cut);
        true
    }

    /// One JSON record per line, alpha stored sparsely.
    pub fn export<W: Write>(&self, mut w: W) -> Result<()> {
        for cut in &self.cuts {
            let rec = CutRecord {
                chi_len: cut.alpha.len(),
                alpha: cut
                    .alpha
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| **a != 0.0)
                    .map(|(i, &a)| (i, a))
                    .collect(),
                beta: cut.beta,
                provenance: cut.provenance,
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn import<R: BufRead>(r: R) -> Result<CutPool> {
        let mut pool = CutPool::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CutRecord = serde_json::from_str(&line)?;
            let mut alpha = vec![0.0; rec.chi_len];
            for (i, a) in rec.alpha {
                if i >= rec.chi_len {
                    return Err(Error::Parse(format!("cut index {i} out of range")));
                }
                alpha[i] = a;
            }
            let cut = LinearCut::new(
                alpha,
                rec.beta,
                rec.provenance.phi_hash,
                rec.provenance.iteration,
                rec.provenance.cglp_value,
            )?;
            pool.cuts.push(cut);
        }
        Ok(pool)
    }
}

/// Layer-k RLT residual diag(C - W B - B^T W^T + W A W^T) where A, B, C are
/// the (k-1, k-1), (k-1, k), (k, k) blocks of X-tilde and W maps layer k-1
/// to layer k. Feasible lifted points have a nonnegative residual.
pub fn rlt_residual(net: &Network, sol: &LiftedSolution, k: usize) -> Result<DVector<f64>> {
    if k == 0 || k > net.depth() {
        return Err(Error::InvalidArgument(format!(
            "RLT layer {k} out of range 1..={}",
            net.depth()
        )));
    }
    let idx = LiftedIndex::new(net);
    let w = net.weight(k - 1);
    let prev = idx.layer_range(k - 1);
    let cur = idx.layer_range(k);
    let a = sol.x_mat.view((prev.start, prev.start), (prev.len(), prev.len()));
    let b = sol.x_mat.view((prev.start, cur.start), (prev.len(), cur.len()));
    let c = sol.x_mat.view((cur.start, cur.start), (cur.len(), cur.len()));
    let wb = w * b;
    let waw = w * a * w.transpose();
    Ok(DVector::from_fn(cur.len(), |i, _| {
        c[(i, i)] - 2.0 * wb[(i, i)] + waw[(i, i)]
    }))
}

/// Result of the penalized baseline: the final-round solution, the sound
/// base objective (round 0, a valid upper bound), the achieved quadratic
/// penalty c^T (X - x x^T) c, and per round the true objective c . z with
/// the trace gap of that round's solution.
#[derive(Debug, Clone)]
pub struct PenaltyOutcome {
    pub result: SolveResult,
    pub base_objective: f64,
    pub penalty: f64,
    pub round_objectives: Vec<f64>,
    pub round_trace_gaps: Vec<f64>,
}

/// Iterated linearized penalty on the lifted objective variance. Round 0 is
/// the plain relaxation; round t >= 1 maximizes
///   c.z + w (2 a c.z - a^2 - c^T X_KK c),  a = previous round's c.z,
/// with w = 1 / (2 sqrt(delta)). Later rounds drive X_KK toward rank one but
/// their objectives are not upper bounds; only `base_objective` certifies.
pub fn penalized_solve(
    net: &Network,
    bx: &InputBox,
    bounds: &crate::bounds::LayerBounds,
    c: &DVector<f64>,
    cfg: &SolverConfig,
    rounds: usize,
    delta: f64,
) -> Result<PenaltyOutcome> {
    if delta <= 0.0 {
        return Err(Error::InvalidArgument("delta must be positive".into()));
    }
    let idx = LiftedIndex::new(net);
    let out = idx.layer_range(net.depth());
    if c.len() != out.len() {
        return Err(Error::Dimension(format!(
            "objective length {} vs output width {}",
            c.len(),
            out.len()
        )));
    }
    let prog = build_sdp_program(net, bx, bounds, c, &[])?;
    let base = solve_conic(&prog, cfg)?.into_usable()?;
    let cz = |sol: &LiftedSolution| -> f64 {
        (0..out.len()).map(|i| c[i] * sol.x_tilde[out.start + i]).sum()
    };
    let mut sol = devectorize(&idx, &base.x)?;
    let mut a_prev = cz(&sol);
    let mut rounds_cz = vec![a_prev];
    let mut rounds_gap = vec![crate::lifted::trace_gap(&sol)];
    let w = 1.0 / (2.0 * delta.sqrt());
    let mut res = base.clone();
    for _ in 0..rounds {
        let mut objective = vec![0.0; idx.chi_len()];
        for i in 0..out.len() {
            objective[idx.chi_x(out.start + i)] = c[i] * (1.0 + 2.0 * w * a_prev);
            for j in i..out.len() {
                let scale = if i == j { 1.0 } else { 2.0 };
                objective[idx.chi_xx(out.start + i, out.start + j)] = -w * scale * c[i] * c[j];
            }
        }
        let prog_t = build_sdp_program_with_objective(net, bx, bounds, objective, &[])?;
        res = solve_conic(&prog_t, cfg)?.into_usable()?;
        sol = devectorize(&idx, &res.x)?;
        a_prev = cz(&sol);
        rounds_cz.push(a_prev);
        rounds_gap.push(crate::lifted::trace_gap(&sol));
    }
    let surplus = sol.surplus();
    let mut penalty = 0.0;
    for i in 0..out.len() {
        for j in 0..out.len() {
            penalty += c[i] * c[j] * surplus[(out.start + i, out.start + j)];
        }
    }
    res.objective = a_prev;
    Ok(PenaltyOutcome {
        result: res,
        base_objective: base.objective,
        penalty,
        round_objectives: rounds_cz,
        round_trace_gaps: rounds_gap,
    })
}
