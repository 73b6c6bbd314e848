//! Gram-side diagnostics for a solved relaxation.
//!
//! Any feasible bordered matrix factors as `Xi = V V^T`, which realizes the
//! lifted solution as actual vectors: row 0 of `V` is a unit direction `e`
//! and row `i + 1` is a vector whose projection onto `e` reproduces the
//! lifted coordinate `x_i`. A rank-1 solution puts every row on the `e`
//! axis; looseness shows up as rows tilting away from it. This module
//! measures those tilts, the pairwise collinearity defects, and the
//! spherical-cap bound on per-neuron relaxation gaps.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Eigenvalues below this count as numerical zeros when ranking Xi.
pub const RANK_TOL: f64 = 1e-7;

/// Pairs drawn per report when sampling instead of enumerating.
pub const SAMPLE_PAIRS: usize = 10_000;

/// Rows with norm at or below this are treated as the zero vector.
const ZERO_ROW: f64 = 1e-12;

/// Row factorization `Xi = V V^T` of a bordered PSD matrix.
#[derive(Debug, Clone)]
pub struct GramFactors {
    /// `(n + 1) x r`; row 0 is `e`, columns ordered by decreasing eigenvalue.
    pub v: DMatrix<f64>,
    /// Count of eigenvalues above the rank threshold.
    pub rank: usize,
    /// All eigenvalues of the input, decreasing. Tail entries may be tiny
    /// negatives within the tolerance; they are clamped out of `v`.
    pub eigenvalues: DVector<f64>,
}

impl GramFactors {
    /// The homogenizing row. Unit norm as long as the corner entry was 1.
    pub fn e(&self) -> DVector<f64> {
        self.v.row(0).transpose()
    }

    /// The row realizing lifted coordinate `i`.
    pub fn x_vec(&self, i: usize) -> DVector<f64> {
        self.v.row(i + 1).transpose()
    }

    /// Number of lifted coordinates (rows of `v` minus the homogenizing one).
    pub fn n(&self) -> usize {
        self.v.nrows() - 1
    }

    /// Frobenius distance between `V V^T` and the matrix it factors. Equal
    /// to the norm of the discarded eigenvalue tail.
    pub fn reconstruction_error(&self, xi: &DMatrix<f64>) -> f64 {
        (&self.v * self.v.transpose() - xi).norm()
    }
}

/// Eigendecomposition-based factorization keeping eigenpairs above `rank_tol`.
///
/// Eigenvectors are scaled by the square root of their eigenvalue, so
/// `V V^T` reproduces the input up to the discarded tail. Rejects matrices
/// that are indefinite beyond the tolerance or whose corner entry is not 1.
pub fn gram_factorize(xi: &DMatrix<f64>, rank_tol: f64) -> Result<GramFactors> {
    if xi.nrows() != xi.ncols() || xi.nrows() < 2 {
        return Err(Error::Dimension(format!(
            "expected a square bordered matrix, got {}x{}",
            xi.nrows(),
            xi.ncols()
        )));
    }
    if !(rank_tol > 0.0) {
        return Err(Error::InvalidArgument("rank_tol must be positive".into()));
    }
    if (xi[(0, 0)] - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "corner entry is {:.6e}, expected 1",
            xi[(0, 0)]
        )));
    }
    let n1 = xi.nrows();
    let mut sym = xi.clone();
    for i in 0..n1 {
        for j in (i + 1)..n1 {
            let m = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = m;
            sym[(j, i)] = m;
        }
    }
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..n1).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let min_eig = eig.eigenvalues[order[n1 - 1]];
    if min_eig < -rank_tol {
        return Err(Error::InvalidArgument(format!(
            "matrix is indefinite beyond tolerance: min eigenvalue {:.3e}",
            min_eig
        )));
    }
    let rank = order
        .iter()
        .filter(|&&k| eig.eigenvalues[k] > rank_tol)
        .count();
    let mut v = DMatrix::zeros(n1, rank);
    for (col, &k) in order.iter().take(rank).enumerate() {
        let s = eig.eigenvalues[k].max(0.0).sqrt();
        for row in 0..n1 {
            v[(row, col)] = s * eig.eigenvectors[(row, k)];
        }
    }
    let eigenvalues = DVector::from_iterator(n1, order.iter().map(|&k| eig.eigenvalues[k]));
    Ok(GramFactors {
        v,
        rank,
        eigenvalues,
    })
}

/// Which row pairs a report covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSelection {
    /// Every pair `(i, j)` with `i < j` over rows of nonzero norm.
    All,
    /// Up to `count` distinct pairs drawn reproducibly from `seed`. Falls
    /// back to full enumeration when fewer pairs exist.
    Sampled { count: usize, seed: u64 },
}

impl Default for PairSelection {
    fn default() -> Self {
        PairSelection::Sampled {
            count: SAMPLE_PAIRS,
            seed: 0,
        }
    }
}

/// Collinearity defect of one row pair.
#[derive(Debug, Clone, Copy)]
pub struct PairDefect {
    pub i: usize,
    pub j: usize,
    pub cos_ij: f64,
    /// `cos(theta_ij) - cos(theta_i) cos(theta_j)`. Nonpositive means the
    /// pair already satisfies the collinearity inequality with no slack.
    pub defect: f64,
}

/// Angles of the lifted rows against `e`, plus pair defects.
#[derive(Debug, Clone)]
pub struct AngleReport {
    /// `theta_i` in `[0, pi]`; 0 for skipped rows.
    pub theta: Vec<f64>,
    /// Rows whose norm vanished. They have no direction and join no pair.
    pub skipped: Vec<bool>,
    pub pairs: Vec<PairDefect>,
    /// The examined pair with the smallest defect.
    pub min_defect: Option<PairDefect>,
    /// Smallest slack `eps` for which some examined pair has
    /// `defect <= eps / n`. Infinite when no pair was examined.
    pub eps_geo: f64,
}

impl AngleReport {
    /// Two-block tab-separated table: per-row angles, then per-pair defects.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "index\ttheta\tskipped");
        for (i, th) in self.theta.iter().enumerate() {
            let _ = writeln!(s, "{}\t{:.9}\t{}", i, th, u8::from(self.skipped[i]));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "i\tj\tcos_ij\tdefect");
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{:.9}\t{:.9}", p.i, p.j, p.cos_ij, p.defect);
        }
        s
    }
}

/// Angles and pairwise defects of the factor rows.
pub fn angles_report(factors: &GramFactors, pairs: PairSelection) -> AngleReport {
    let n = factors.n();
    let e = factors.e();
    let e_norm = e.norm();
    let mut rows = Vec::with_capacity(n);
    let mut theta = vec![0.0; n];
    let mut skipped = vec![false; n];
    let mut cos_e = vec![0.0; n];
    for i in 0..n {
        let x = factors.x_vec(i);
        let nx = x.norm();
        if nx <= ZERO_ROW || e_norm <= ZERO_ROW {
            skipped[i] = true;
        } else {
            let c = (e.dot(&x) / (e_norm * nx)).clamp(-1.0, 1.0);
            cos_e[i] = c;
            theta[i] = c.acos();
        }
        rows.push((x, nx));
    }

    let live: Vec<usize> = (0..n).filter(|&i| !skipped[i]).collect();
    let defect_of = |i: usize, j: usize| -> PairDefect {
        let (xi, ni) = &rows[i];
        let (xj, nj) = &rows[j];
        let cos_ij = (xi.dot(xj) / (ni * nj)).clamp(-1.0, 1.0);
        PairDefect {
            i,
            j,
            cos_ij,
            defect: cos_ij - cos_e[i] * cos_e[j],
        }
    };

    let total = live.len().saturating_mul(live.len().saturating_sub(1)) / 2;
    let mut out = Vec::new();
    match pairs {
        PairSelection::All => {
            for a in 0..live.len() {
                for b in (a + 1)..live.len() {
                    out.push(defect_of(live[a], live[b]));
                }
            }
        }
        PairSelection::Sampled { count, seed: _ } if total <= count => {
            for a in 0..live.len() {
                for b in (a + 1)..live.len() {
                    out.push(defect_of(live[a], live[b]));
                }
            }
        }
        PairSelection::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut seen = HashSet::with_capacity(count);
            // Distinct pairs, insertion-ordered, so equal seeds give equal
            // reports. The attempt cap only matters near full coverage.
            let mut attempts = 0usize;
            while out.len() < count && attempts < 20 * count {
                attempts += 1;
                let a = rng.gen_range(0..live.len());
                let b = rng.gen_range(0..live.len());
                if a == b {
                    continue;
                }
                let (i, j) = (live[a.min(b)], live[a.max(b)]);
                if seen.insert((i, j)) {
                    out.push(defect_of(i, j));
                }
            }
        }
    }

    let min_defect = out
        .iter()
        .min_by(|p, q| p.defect.total_cmp(&q.defect))
        .copied();
    let eps_geo = min_defect
        .map(|p| (p.defect * n as f64).max(0.0))
        .unwrap_or(f64::INFINITY);
    AngleReport {
        theta,
        skipped,
        pairs: out,
        min_defect,
        eps_geo,
    }
}

/// Height of the spherical cap reachable by a post-activation row.
///
/// A row `y` paired with its preactivation `chi` lies on the sphere with
/// diameter `chi`; among points of that sphere at angle `theta` between `e`
/// and `chi`, the projection onto `e` exceeds the exact activation value by
/// at most `(|chi| / 2) (1 - cos theta)`. Zero at `theta = 0`, where the
/// solution is rank-1 and exact.
pub fn spherical_cap_height(chi_norm: f64, theta: f64) -> f64 {
    0.5 * chi_norm * (1.0 - theta.cos())
}
