//! Solvers for the two problem classes the rest of the crate emits: linear
//! programs (cut generation) and linear-objective programs with one PSD
//! block (the lifted relaxation).
//!
//! Conventions: [`solve_conic`] maximizes, [`solve_lp`] minimizes. Both are
//! deterministic for a fixed program and config.

mod conic;
mod simplex;

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Relation of an affine row to its right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rel {
    Eq,
    Ge,
    Le,
}

/// One sparse affine row `coeffs . x (rel) rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rel: Rel,
    pub rhs: f64,
}

impl AffineRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rel: Rel, rhs: f64) -> Self {
        Self { coeffs, rel, rhs }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let v = self.eval(&x[..]);
        match self.rel {
            Rel::Eq => (v - self.rhs).abs(),
            Rel::Ge => (self.rhs - v).max(0.0),
            Rel::Le => (v - self.rhs).max(0.0),
        }
    }

    pub fn max_var(&self) -> Option<usize> {
        self.coeffs.iter().map(|&(j, _)| j).max()
    }
}

/// Linear program `min c.x  s.t. rows, x_j >= 0 unless free[j]`.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    pub num_vars: usize,
    pub minimize: Vec<f64>,
    pub rows: Vec<AffineRow>,
    pub free: Vec<bool>,
}

impl LinearProgram {
    pub fn validate(&self) -> Result<()> {
        if self.minimize.len() != self.num_vars || self.free.len() != self.num_vars {
            return Err(Error::Dimension(
                "objective/free length != num_vars".into(),
            ));
        }
        if self.minimize.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LP objective".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.max_var().map_or(false, |j| j >= self.num_vars) {
                return Err(Error::Dimension(format!("row {i} references out-of-range variable")));
            }
            if !row.rhs.is_finite() || row.coeffs.iter().any(|(_, a)| !a.is_finite()) {
                return Err(Error::NonFinite(format!("LP row {i}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    NearOptimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl Status {
    pub fn is_usable(self) -> bool {
        matches!(self, Status::Optimal | Status::NearOptimal)
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Status::Optimal => "optimal",
            Status::NearOptimal => "near_optimal",
            Status::Infeasible => "infeasible",
            Status::Unbounded => "unbounded",
            Status::IterationLimit => "iteration_limit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: Status,
    pub objective: f64,
    pub x: Vec<f64>,
    pub residuals: Residuals,
    pub iterations: usize,
    /// Splitting state for warm restarts; empty for LP results.
    pub(crate) warm: Vec<f64>,
    pub(crate) warm_nv: usize,
}

impl SolveResult {
    /// Errors out unless the result is optimal or near-optimal.
    pub fn into_usable(self) -> Result<Self> {
        match self.status {
            Status::Optimal | Status::NearOptimal => Ok(self),
            Status::Infeasible => Err(Error::Infeasible),
            Status::Unbounded => Err(Error::Unbounded),
            Status::IterationLimit => Err(Error::SolverFailure {
                status: self.status,
                primal: self.residuals.primal,
                dual: self.residuals.dual,
                gap: self.residuals.gap,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Residual level declared `Optimal`.
    pub abs_tol: f64,
    /// Relative component folded into residual denominators.
    pub rel_tol: f64,
    /// Residual level still declared `NearOptimal` at the iteration cap.
    pub accept_tol: f64,
    pub max_iters: usize,
    /// Ruiz-style row equilibration of the affine system.
    pub scaling: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            abs_tol: 1e-7,
            rel_tol: 1e-7,
            accept_tol: 1e-5,
            max_iters: 200_000,
            scaling: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.abs_tol <= self.accept_tol) {
            return Err(Error::InvalidArgument(
                "need 0 < abs_tol <= accept_tol".into(),
            ));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Projects a symmetric matrix onto the PSD cone (Frobenius-nearest):
/// eigendecompose, clamp negative eigenvalues, recompose.
pub fn project_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("project_psd needs a square matrix".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("project_psd input".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 0.0 {
            let v = eig.eigenvectors.column(k);
            out.syger(lam, &v, &v, 1.0);
        }
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..out.nrows() {
        for j in (i + 1)..out.ncols() {
            out[(i, j)] = out[(j, i)];
        }
    }
    Ok(out)
}

/// Solves an LP by two-phase revised simplex; returns a vertex solution.
pub fn solve_lp(lp: &LinearProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    lp.validate()?;
    cfg.validate()?;
    simplex::solve(lp, cfg)
}

/// Solves `max obj.x` over the affine rows and PSD block of a
/// [`crate::lifted::ConicProgram`] by Douglas-Rachford splitting.
pub fn solve_conic(
    prog: &crate::lifted::ConicProgram,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    prog.validate()?;
    cfg.validate()?;
    conic::solve(prog, cfg, None)
}

/// Like [`solve_conic`], seeding the splitting state from a previous result.
/// Intended for re-solves of the same program with rows appended at the end;
/// an incompatible seed is ignored.
pub fn solve_conic_warm(
    prog: &crate::lifted::ConicProgram,
    cfg: &SolverConfig,
    prev: Option<&SolveResult>,
) -> Result<SolveResult> {
    prog.validate()?;
    cfg.validate()?;
    conic::solve(prog, cfg, prev.filter(|r| !r.warm.is_empty()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn project_psd_fixes_psd_input() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = project_psd(&m).unwrap();
        assert!((&p - &m).abs().max() < 1e-12);
    }

    #[test]
    fn project_psd_clamps_negative_eigenvalue() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let p = project_psd(&m).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((&p - &want).abs().max() < 1e-12);
    }

    #[test]
    fn project_psd_beats_random_candidates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 4;
        let raw = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sym = (&raw + raw.transpose()) * 0.5;
        let proj = project_psd(&sym).unwrap();
        let best = (&proj - &sym).norm();
        // Random PSD candidates: B B^T with random B, plus scaled copies.
        for _ in 0..100_000 {
            let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let cand = &b * b.transpose();
            assert!((cand - &sym).norm() >= best - 1e-9);
        }
    }

    #[test]
    fn project_psd_rejects_nan() {
        let m = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(project_psd(&m).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SolverConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.abs_tol = 1e-3;
        cfg.accept_tol = 1e-5;
        assert!(cfg.validate().is_err());
        let mut cfg = SolverConfig::default();
        cfg.max_iters = 0;
        assert!(cfg.validate().is_err());
    }
}
