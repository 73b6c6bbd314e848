//! The lifted relaxation: block indexing over layer activations, building
//! the SDP rows, rank-1 lifts of true trajectories, and the trace-gap
//! diagnostic.
//!
//! Vectorization contract used across the crate: the lifted variable
//! vector chi stacks x-tilde first, then the upper triangle of X-tilde in
//! row-major order (plain entries, no scaling). All cut and program rows
//! index into this layout.

use crate::bounds::LayerBounds;
use crate::cuts::LinearCut;
use crate::error::{Error, Result};
use crate::network::{InputBox, Network};
use crate::solver::{AffineRow, Rel};
use nalgebra::{DMatrix, DVector};
use std::fmt::Write as _;
use std::ops::Range;

/// Index arithmetic for the stacked activation vector and its lift.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LiftedIndex {
    offsets: Vec<usize>,
    dims: Vec<usize>,
}

impl LiftedIndex {
    pub fn new(net: &Network) -> Self {
        let dims = net.dims().to_vec();
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        offsets.push(acc);
        Self { offsets, dims }
    }

    /// Total length of x-tilde.
    pub fn n_tilde(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn layer_dim(&self, k: usize) -> usize {
        self.dims[k]
    }

    /// Slice of x-tilde holding layer k.
    pub fn layer_range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k] + self.dims[k]
    }

    /// Block X[x^(k-1) x^(k-1)^T].
    pub fn a_block(&self, k: usize) -> (Range<usize>, Range<usize>) {
        (self.layer_range(k - 1), self.layer_range(k - 1))
    }

    /// Block X[x^(k-1) x^(k)^T].
    pub fn b_block(&self, k: usize) -> (Range<usize>, Range<usize>) {
        (self.layer_range(k - 1), self.layer_range(k))
    }

    /// Block X[x^(k) x^(k)^T].
    pub fn c_block(&self, k: usize) -> (Range<usize>, Range<usize>) {
        (self.layer_range(k), self.layer_range(k))
    }

    /// chi index of x-tilde entry i.
    pub fn chi_x(&self, i: usize) -> usize {
        debug_assert!(i < self.n_tilde());
        i
    }

    /// chi index of X-tilde entry (i, j), order-insensitive.
    pub fn chi_xx(&self, i: usize, j: usize) -> usize {
        chi_xx_for(self.n_tilde(), i, j)
    }

    /// Length of the full chi vector.
    pub fn chi_len(&self) -> usize {
        chi_len_for(self.n_tilde())
    }
}

/// chi index of X-tilde entry (i, j) for an n-dimensional x-tilde,
/// order-insensitive.
pub fn chi_xx_for(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    debug_assert!(j < n);
    n + i * n - (i * i - i) / 2 + (j - i)
}

/// Length of the chi vector for an n-dimensional x-tilde.
pub fn chi_len_for(n: usize) -> usize {
    n + n * (n + 1) / 2
}

/// A candidate lifted point: the pair (x-tilde, X-tilde) and its bordered
/// PSD certificate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedSolution {
    pub x_tilde: DVector<f64>,
    pub x_mat: DMatrix<f64>,
}

impl LiftedSolution {
    pub fn new(x_tilde: DVector<f64>, x_mat: DMatrix<f64>) -> Result<Self> {
        let n = x_tilde.len();
        if x_mat.nrows() != n || x_mat.ncols() != n {
            return Err(Error::Dimension("X-tilde shape does not match x-tilde".into()));
        }
        Ok(Self { x_tilde, x_mat })
    }

    pub fn dim(&self) -> usize {
        self.x_tilde.len()
    }

    /// The bordered matrix [[1, x^T], [x, X]].
    pub fn xi(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut xi = DMatrix::zeros(n + 1, n + 1);
        xi[(0, 0)] = 1.0;
        for i in 0..n {
            xi[(0, i + 1)] = self.x_tilde[i];
            xi[(i + 1, 0)] = self.x_tilde[i];
        }
        xi.view_mut((1, 1), (n, n)).copy_from(&self.x_mat);
        xi
    }

    /// Output-layer slice of x-tilde.
    pub fn z(&self, index: &LiftedIndex) -> DVector<f64> {
        let r = index.layer_range(index.num_layers());
        DVector::from_iterator(r.len(), self.x_tilde.as_slice()[r].iter().copied())
    }

    /// The moment-surplus matrix X - x x^T whose eigenvectors drive cuts.
    pub fn surplus(&self) -> DMatrix<f64> {
        let mut s = self.x_mat.clone();
        s.syger(-1.0, &self.x_tilde, &self.x_tilde, 1.0);
        for i in 0..s.nrows() {
            for j in (i + 1)..s.ncols() {
                s[(i, j)] = s[(j, i)];
            }
        }
        s
    }
}

/// tr(X) - x.x, zero exactly for rank-1 lifts.
pub fn trace_gap(sol: &LiftedSolution) -> f64 {
    sol.x_mat.trace() - sol.x_tilde.dot(&sol.x_tilde)
}

/// Flattens a solution into the canonical chi layout.
pub fn vectorize(index: &LiftedIndex, sol: &LiftedSolution) -> Vec<f64> {
    let n = index.n_tilde();
    let mut chi = vec![0.0; index.chi_len()];
    chi[..n].copy_from_slice(sol.x_tilde.as_slice());
    for i in 0..n {
        for j in i..n {
            chi[index.chi_xx(i, j)] = sol.x_mat[(i, j)];
        }
    }
    chi
}

/// Inverse of [`vectorize`]; symmetrizes X-tilde from the packed triangle.
pub fn devectorize(index: &LiftedIndex, chi: &[f64]) -> Result<LiftedSolution> {
    if chi.len() != index.chi_len() {
        return Err(Error::Dimension(format!(
            "chi has length {}, expected {}",
            chi.len(),
            index.chi_len()
        )));
    }
    let n = index.n_tilde();
    let x_tilde = DVector::from_column_slice(&chi[..n]);
    let mut x_mat = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = chi[index.chi_xx(i, j)];
            x_mat[(i, j)] = v;
            x_mat[(j, i)] = v;
        }
    }
    LiftedSolution::new(x_tilde, x_mat)
}

/// Linear-objective program over chi with affine rows and one PSD block.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub num_vars: usize,
    /// Maximized.
    pub objective: Vec<f64>,
    pub rows: Vec<AffineRow>,
    /// Side of the bordered PSD block, `n_tilde + 1`; None for plain LPs.
    pub psd_side: Option<usize>,
}

impl ConicProgram {
    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.num_vars {
            return Err(Error::Dimension("objective length != num_vars".into()));
        }
        if let Some(s) = self.psd_side {
            let n = s - 1;
            if self.num_vars != n + n * (n + 1) / 2 {
                return Err(Error::Dimension(
                    "num_vars inconsistent with PSD block side".into(),
                ));
            }
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("program objective".into()));
        }
        for (i, row) in self.rows.iter().enumerate() {
            if row.max_var().map_or(false, |j| j >= self.num_vars) {
                return Err(Error::Dimension(format!(
                    "row {i} references out-of-range variable"
                )));
            }
            if !row.rhs.is_finite() || row.coeffs.iter().any(|(_, a)| !a.is_finite()) {
                return Err(Error::NonFinite(format!("program row {i}")));
            }
        }
        Ok(())
    }

    /// Largest violation of the affine rows at chi.
    pub fn max_violation(&self, chi: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| r.violation(chi))
            .fold(0.0f64, f64::max)
    }

    /// Documented sparse text dump: one line per row
    /// (`obj` / `eq|ge|le rhs` followed by `index:coeff` pairs).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "vars {} psd_side {}",
            self.num_vars,
            self.psd_side.map_or(0, |s| s)
        );
        let mut line = String::from("obj");
        for (j, v) in self.objective.iter().enumerate() {
            if *v != 0.0 {
                let _ = write!(line, " {j}:{v:.17e}");
            }
        }
        out.push_str(&line);
        out.push('\n');
        for row in &self.rows {
            let tag = match row.rel {
                Rel::Eq => "eq",
                Rel::Ge => "ge",
                Rel::Le => "le",
            };
            let _ = write!(out, "{tag} {:.17e}", row.rhs);
            for &(j, a) in &row.coeffs {
                let _ = write!(out, " {j}:{a:.17e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the lifted relaxation rows for `max c.z` over the network's
/// reachable set:
/// box rows on the input slice; per layer the ReLU rows, the diagonal
/// lift equality, and the box-quadratic row on the previous layer's
/// diagonal; the PSD block on the bordered matrix; plus any extra cuts.
pub fn build_sdp_program(
    net: &Network,
    bx: &InputBox,
    bounds: &LayerBounds,
    c: &DVector<f64>,
    extra_cuts: &[LinearCut],
) -> Result<ConicProgram> {
    let index = LiftedIndex::new(net);
    if c.len() != net.output_dim() {
        return Err(Error::Dimension(format!(
            "objective has length {}, output dim is {}",
            c.len(),
            net.output_dim()
        )));
    }
    let mut objective = vec![0.0; index.chi_len()];
    let out_range = index.layer_range(index.num_layers());
    for (i, oi) in out_range.enumerate() {
        objective[oi] = c[i];
    }
    build_sdp_program_with_objective(net, bx, bounds, objective, extra_cuts)
}

/// Same construction with an arbitrary linear objective over chi, used by
/// the auxiliary direction bounds.
pub fn build_sdp_program_with_objective(
    net: &Network,
    bx: &InputBox,
    bounds: &LayerBounds,
    objective: Vec<f64>,
    extra_cuts: &[LinearCut],
) -> Result<ConicProgram> {
    let index = LiftedIndex::new(net);
    bounds.check_against(net)?;
    if bx.dim() != net.input_dim() {
        return Err(Error::Dimension("input box does not match network".into()));
    }
    if objective.len() != index.chi_len() {
        return Err(Error::Dimension("objective over chi has wrong length".into()));
    }
    let mut rows = Vec::new();

    // Input box rows.
    let (l0, u0) = (bx.lower(), bx.upper());
    for i in 0..net.input_dim() {
        rows.push(AffineRow::new(vec![(index.chi_x(i), 1.0)], Rel::Ge, l0[i]));
        rows.push(AffineRow::new(vec![(index.chi_x(i), 1.0)], Rel::Le, u0[i]));
    }

    for k in 1..=index.num_layers() {
        let w = net.weight(k - 1);
        let prev = index.layer_range(k - 1);
        let cur = index.layer_range(k);
        let (lp, up) = (&bounds.lower[k - 1], &bounds.upper[k - 1]);
        for (i, ci) in cur.clone().enumerate() {
            // x^[k] >= 0
            rows.push(AffineRow::new(vec![(index.chi_x(ci), 1.0)], Rel::Ge, 0.0));
            // x^[k] >= W x^[k-1]
            let mut coeffs = vec![(index.chi_x(ci), 1.0)];
            for (j, pj) in prev.clone().enumerate() {
                if w[(i, j)] != 0.0 {
                    coeffs.push((index.chi_x(pj), -w[(i, j)]));
                }
            }
            rows.push(AffineRow::new(coeffs, Rel::Ge, 0.0));
            // diag(X[C_k]) = diag(W X[B_k])
            let mut coeffs = vec![(index.chi_xx(ci, ci), 1.0)];
            for (j, pj) in prev.clone().enumerate() {
                if w[(i, j)] != 0.0 {
                    coeffs.push((index.chi_xx(pj, ci), -w[(i, j)]));
                }
            }
            rows.push(AffineRow::new(coeffs, Rel::Eq, 0.0));
        }
        // diag(X[A_k]) <= (l+u) . x^[k-1] - l . u
        for (j, pj) in prev.clone().enumerate() {
            rows.push(AffineRow::new(
                vec![
                    (index.chi_xx(pj, pj), 1.0),
                    (index.chi_x(pj), -(lp[j] + up[j])),
                ],
                Rel::Le,
                -lp[j] * up[j],
            ));
        }
    }

    for cut in extra_cuts {
        rows.push(cut.to_row(index.chi_len())?);
    }

    let prog = ConicProgram {
        num_vars: index.chi_len(),
        objective,
        rows,
        psd_side: Some(index.n_tilde() + 1),
    };
    prog.validate()?;
    Ok(prog)
}

/// Lifts an exact trajectory to the rank-1 solution (x, x x^T).
pub fn rank1_lift(net: &Network, bx: &InputBox, x: &DVector<f64>) -> Result<LiftedSolution> {
    if !bx.contains(x, 1e-12) {
        return Err(Error::InvalidArgument(
            "point lies outside the input box".into(),
        ));
    }
    let traj = net.trajectory(x)?;
    let n: usize = traj.iter().map(|t| t.len()).sum();
    let mut x_tilde = DVector::zeros(n);
    let mut at = 0;
    for t in &traj {
        x_tilde.rows_mut(at, t.len()).copy_from(t);
        at += t.len();
    }
    let x_mat = &x_tilde * x_tilde.transpose();
    LiftedSolution::new(x_tilde, x_mat)
}
