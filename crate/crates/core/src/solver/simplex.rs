//! Two-phase revised simplex over dense standard-form data.
//!
//! The CGLPs this serves are small (hundreds of rows) but heavily
//! degenerate: many equality rows have zero right-hand side, so the code
//! watches for stalling and falls back to Bland's rule to escape cycles.

use super::{LinearProgram, Rel, Residuals, SolveResult, SolverConfig, Status};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

const PIVOT_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-10;
/// Smallest pivot element considered well-conditioned.
const PIVOT_MIN: f64 = 1e-7;
/// Entering candidates examined before settling for a weak pivot.
const ENTER_TRIES: usize = 12;
const REFACTOR_EVERY: usize = 150;
const STALL_LIMIT: usize = 60;

/// Standard form `min c.x, A x = b >= 0, x >= 0` plus the mapping back to
/// the caller's variables.
struct Standard {
    a: DMatrix<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    /// Per standard column: (original variable, sign), or None for slacks.
    back: Vec<Option<(usize, f64)>>,
    /// The other half of a split free variable. The halves are exact
    /// negations, so both in one basis means a singular basis; exact
    /// arithmetic gives the twin of a basic column reduced cost zero, and
    /// only rounding ever lets it price in.
    twin: Vec<Option<usize>>,
    /// Equilibration scale per column; the solved value is scale * xb.
    col_scale: Vec<f64>,
}

fn to_standard(lp: &LinearProgram) -> Standard {
    let m = lp.rows.len();
    let mut back = Vec::new();
    let mut twin = Vec::new();
    let mut col_of_var = Vec::with_capacity(lp.num_vars);
    for j in 0..lp.num_vars {
        col_of_var.push(back.len());
        back.push(Some((j, 1.0)));
        twin.push(None);
        if lp.free[j] {
            back.push(Some((j, -1.0)));
            let k = back.len();
            twin[k - 2] = Some(k - 1);
            twin.push(Some(k - 2));
        }
    }
    let n_struct = back.len();
    let n_slack = lp
        .rows
        .iter()
        .filter(|r| r.rel != Rel::Eq)
        .count();
    let n = n_struct + n_slack;
    let mut a = DMatrix::zeros(m, n);
    let mut b = vec![0.0; m];
    let mut c = vec![0.0; n];
    for j in 0..lp.num_vars {
        let col = col_of_var[j];
        c[col] = lp.minimize[j];
        if lp.free[j] {
            c[col + 1] = -lp.minimize[j];
        }
    }
    let mut slack = n_struct;
    for (i, row) in lp.rows.iter().enumerate() {
        for &(j, v) in &row.coeffs {
            let col = col_of_var[j];
            a[(i, col)] += v;
            if lp.free[j] {
                a[(i, col + 1)] -= v;
            }
        }
        b[i] = row.rhs;
        match row.rel {
            Rel::Eq => {}
            Rel::Le => {
                a[(i, slack)] = 1.0;
                slack += 1;
            }
            Rel::Ge => {
                a[(i, slack)] = -1.0;
                slack += 1;
            }
        }
        if b[i] < 0.0 {
            b[i] = -b[i];
            for j in 0..n {
                a[(i, j)] = -a[(i, j)];
            }
        }
    }
    back.resize(n, None);

    // Ruiz equilibration: CGLP columns mix magnitudes badly enough to break
    // basis factorizations without it.
    let mut col_scale = vec![1.0; n];
    for _ in 0..5 {
        for i in 0..m {
            let mx = (0..n).map(|j| a[(i, j)].abs()).fold(0.0f64, f64::max);
            if mx > 0.0 {
                let s = 1.0 / mx.sqrt();
                for j in 0..n {
                    a[(i, j)] *= s;
                }
                b[i] *= s;
            }
        }
        for j in 0..n {
            let mx = (0..m).map(|i| a[(i, j)].abs()).fold(0.0f64, f64::max);
            if mx > 0.0 {
                let s = 1.0 / mx.sqrt();
                for i in 0..m {
                    a[(i, j)] *= s;
                }
                col_scale[j] *= s;
            }
        }
    }
    for (cj, s) in c.iter_mut().zip(&col_scale) {
        *cj *= s;
    }
    twin.resize(n, None);
    Standard { a, b, c, back, twin, col_scale }
}

/// Basis state with an explicitly maintained inverse.
struct Tableau {
    a: DMatrix<f64>,
    b: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: DMatrix<f64>,
    xb: Vec<f64>,
    pivots: usize,
}

impl Tableau {
    fn m(&self) -> usize {
        self.a.nrows()
    }

    fn n(&self) -> usize {
        self.a.ncols()
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.m();
        let mut bmat = DMatrix::zeros(m, m);
        for (k, &j) in self.basis.iter().enumerate() {
            bmat.set_column(k, &self.a.column(j));
        }
        let inv = bmat
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular simplex basis".into()))?;
        self.binv = inv;
        let bvec = nalgebra::DVector::from_column_slice(&self.b);
        let xb = &self.binv * bvec;
        self.xb = xb.iter().copied().collect();
        Ok(())
    }

    /// `y = c_B . B^-1` for pricing.
    fn dual_row(&self, c: &[f64]) -> Vec<f64> {
        let m = self.m();
        let mut y = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            let cb = c[j];
            if cb != 0.0 {
                for i in 0..m {
                    y[i] += cb * self.binv[(k, i)];
                }
            }
        }
        y
    }

    fn reduced_cost(&self, c: &[f64], y: &[f64], j: usize) -> f64 {
        let mut v = c[j];
        for i in 0..self.m() {
            let aij = self.a[(i, j)];
            if aij != 0.0 {
                v -= y[i] * aij;
            }
        }
        v
    }

    /// `B^-1 a_j`, the tableau column of variable j.
    fn direction(&self, j: usize) -> Vec<f64> {
        let m = self.m();
        let mut d = vec![0.0; m];
        for i in 0..m {
            let aij = self.a[(i, j)];
            if aij != 0.0 {
                for r in 0..m {
                    d[r] += self.binv[(r, i)] * aij;
                }
            }
        }
        d
    }

    fn pivot(&mut self, enter: usize, leave_pos: usize, d: &[f64]) -> Result<()> {
        let m = self.m();
        let piv = d[leave_pos];
        if piv.abs() < PIVOT_TOL * 1e-3 {
            return Err(Error::NonFinite("vanishing simplex pivot".into()));
        }
        let theta = self.xb[leave_pos] / piv;
        for r in 0..m {
            if r != leave_pos {
                self.xb[r] -= theta * d[r];
            }
        }
        self.xb[leave_pos] = theta;
        // Row update of the explicit inverse.
        let inv_piv = 1.0 / piv;
        for i in 0..m {
            self.binv[(leave_pos, i)] *= inv_piv;
        }
        for r in 0..m {
            if r != leave_pos {
                let f = d[r];
                if f != 0.0 {
                    for i in 0..m {
                        self.binv[(r, i)] -= f * self.binv[(leave_pos, i)];
                    }
                }
            }
        }
        self.in_basis[self.basis[leave_pos]] = false;
        self.in_basis[enter] = true;
        self.basis[leave_pos] = enter;
        self.pivots += 1;
        if self.pivots % REFACTOR_EVERY == 0 {
            self.refactor()?;
        }
        Ok(())
    }

    /// Row r of `B^-1 A`, used to hunt for a pivot in that row.
    fn tableau_row(&self, r: usize) -> Vec<f64> {
        let m = self.m();
        let n = self.n();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut v = 0.0;
            for i in 0..m {
                v += self.binv[(r, i)] * self.a[(i, j)];
            }
            out[j] = v;
        }
        out
    }
}

fn make_in_basis(n: usize, basis: &[usize]) -> Vec<bool> {
    let mut f = vec![false; n];
    for &j in basis {
        f[j] = true;
    }
    f
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
    IterationLimit,
}

/// Runs simplex iterations until optimality on the given cost vector.
/// `allowed` masks columns that may enter the basis.
fn run_phase(
    t: &mut Tableau,
    c: &[f64],
    allowed: &[bool],
    twin: &[Option<usize>],
    max_pivots: usize,
) -> Result<PhaseOutcome> {
    let mut bland = false;
    let mut stall = 0usize;
    for _ in 0..max_pivots {
        let y = t.dual_row(c);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        for j in 0..t.n() {
            if !allowed[j] || t.in_basis[j] {
                continue;
            }
            if twin.get(j).copied().flatten().is_some_and(|tw| t.in_basis[tw]) {
                continue;
            }
            let rc = t.reduced_cost(c, &y, j);
            if rc < -PIVOT_TOL {
                cands.push((rc, j));
            }
        }
        if cands.is_empty() {
            return Ok(PhaseOutcome::Optimal);
        }
        if bland {
            cands.sort_by_key(|&(_, j)| j);
        } else {
            cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        }
        // Try entering columns in order until one offers a sound pivot; a
        // tiny pivot element wrecks the updated inverse, so near-dependent
        // columns are passed over while alternatives exist.
        let mut choice: Option<(usize, usize, Vec<f64>, f64)> = None;
        for &(_, enter) in cands.iter().take(ENTER_TRIES) {
            let d = t.direction(enter);
            // Two-pass ratio test: find the minimum ratio, then the row
            // with the largest pivot among near-ties (lowest basis index
            // under Bland's rule).
            let mut theta = f64::INFINITY;
            for r in 0..t.m() {
                if d[r] > RATIO_TOL {
                    theta = theta.min(t.xb[r].max(0.0) / d[r]);
                }
            }
            if !theta.is_finite() {
                return Ok(PhaseOutcome::Unbounded);
            }
            let mut leave: Option<usize> = None;
            for r in 0..t.m() {
                if d[r] > RATIO_TOL && (t.xb[r].max(0.0)) / d[r] <= theta + RATIO_TOL {
                    let better = leave.map_or(true, |l| {
                        if bland {
                            t.basis[r] < t.basis[l]
                        } else {
                            d[r] > d[l]
                        }
                    });
                    if better {
                        leave = Some(r);
                    }
                }
            }
            let Some(leave) = leave else {
                return Ok(PhaseOutcome::Unbounded);
            };
            let sound = d[leave] >= PIVOT_MIN;
            // Any sound candidate wins; among unsound ones keep the least bad.
            let keep = match &choice {
                None => true,
                Some((_, l, dv, _)) => sound || d[leave] > dv[*l],
            };
            if keep {
                choice = Some((enter, leave, d, theta));
            }
            if sound {
                break;
            }
        }
        let (enter, leave, d, theta) = choice.expect("candidate list was nonempty");
        if d[leave] < PIVOT_TOL {
            // Nothing numerically usable improves the cost.
            return Ok(PhaseOutcome::Optimal);
        }
        if theta < RATIO_TOL {
            stall += 1;
            if stall > STALL_LIMIT {
                bland = true;
            }
        } else {
            stall = 0;
            bland = false;
        }
        t.pivot(enter, leave, &d)?;
    }
    Ok(PhaseOutcome::IterationLimit)
}

pub(super) fn solve(lp: &LinearProgram, cfg: &SolverConfig) -> Result<SolveResult> {
    let std_form = to_standard(lp);
    let m = std_form.a.nrows();
    let n = std_form.a.ncols();
    if m == 0 {
        // No constraints: optimum is 0 iff no variable can improve the cost.
        let unbounded = (0..lp.num_vars)
            .any(|j| lp.minimize[j] < 0.0 || (lp.free[j] && lp.minimize[j] != 0.0));
        return Ok(SolveResult {
            warm: Vec::new(),
            warm_nv: 0,
            status: if unbounded { Status::Unbounded } else { Status::Optimal },
            objective: 0.0,
            x: vec![0.0; lp.num_vars],
            residuals: Residuals { primal: 0.0, dual: 0.0, gap: 0.0 },
            iterations: 0,
        });
    }

    // Phase 1: artificial columns form the initial identity basis.
    let mut a1 = DMatrix::zeros(m, n + m);
    a1.view_mut((0, 0), (m, n)).copy_from(&std_form.a);
    for i in 0..m {
        a1[(i, n + i)] = 1.0;
    }
    let basis1: Vec<usize> = (n..n + m).collect();
    let in_basis1 = make_in_basis(n + m, &basis1);
    let mut t = Tableau {
        a: a1,
        b: std_form.b.clone(),
        basis: basis1,
        in_basis: in_basis1,
        binv: DMatrix::identity(m, m),
        xb: std_form.b.clone(),
        pivots: 0,
    };
    let mut c1 = vec![0.0; n + m];
    for v in c1.iter_mut().skip(n) {
        *v = 1.0;
    }
    let allowed1 = vec![true; n + m];
    let max_pivots = (50_000 + 40 * (m + n)).min(400_000);
    match run_phase(&mut t, &c1, &allowed1, &std_form.twin, max_pivots)? {
        PhaseOutcome::Optimal => {}
        PhaseOutcome::Unbounded => {
            return Err(Error::NonFinite("phase-1 objective unbounded".into()))
        }
        PhaseOutcome::IterationLimit => {
            return Ok(iteration_limit_result(lp));
        }
    }
    t.refactor()?;
    let bscale = std_form.b.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let phase1_obj: f64 = t
        .basis
        .iter()
        .zip(t.xb.iter())
        .filter(|(&j, _)| j >= n)
        .map(|(_, &v)| v)
        .sum();
    if phase1_obj > 1e-7 * bscale {
        return Ok(SolveResult {
            warm: Vec::new(),
            warm_nv: 0,
            status: Status::Infeasible,
            objective: f64::INFINITY,
            x: vec![0.0; lp.num_vars],
            residuals: Residuals { primal: phase1_obj, dual: 0.0, gap: 0.0 },
            iterations: t.pivots,
        });
    }

    // Drive leftover artificials out of the basis; rows where no structural
    // column can pivot are redundant and get dropped.
    let mut drop_rows = Vec::new();
    for r in 0..m {
        if t.basis[r] < n {
            continue;
        }
        let trow = t.tableau_row(r);
        let pivot_col = (0..n).find(|&j| {
            !t.in_basis[j]
                && trow[j].abs() > 1e-7
                && !std_form.twin[j].is_some_and(|tw| t.in_basis[tw])
        });
        match pivot_col {
            Some(j) => {
                let d = t.direction(j);
                t.pivot(j, r, &d)?;
            }
            None => drop_rows.push(r),
        }
    }

    // Rebuild without artificial columns and redundant rows.
    let keep: Vec<usize> = (0..m).filter(|r| !drop_rows.contains(r)).collect();
    let m2 = keep.len();
    let mut a2 = DMatrix::zeros(m2, n);
    let mut b2 = vec![0.0; m2];
    for (ri, &r) in keep.iter().enumerate() {
        for j in 0..n {
            a2[(ri, j)] = std_form.a[(r, j)];
        }
        b2[ri] = std_form.b[r];
    }
    let basis2: Vec<usize> = keep.iter().map(|&r| t.basis[r]).collect();
    debug_assert!(basis2.iter().all(|&j| j < n));
    let in_basis2 = make_in_basis(n, &basis2);
    let mut t2 = Tableau {
        a: a2,
        b: b2,
        basis: basis2,
        in_basis: in_basis2,
        binv: DMatrix::identity(m2, m2),
        xb: vec![0.0; m2],
        pivots: 0,
    };
    t2.refactor()?;

    let allowed2 = vec![true; n];
    let outcome = run_phase(&mut t2, &std_form.c, &allowed2, &std_form.twin, max_pivots)?;
    match outcome {
        PhaseOutcome::Unbounded => {
            return Ok(SolveResult {
                warm: Vec::new(),
                warm_nv: 0,
                status: Status::Unbounded,
                objective: f64::NEG_INFINITY,
                x: vec![0.0; lp.num_vars],
                residuals: Residuals { primal: 0.0, dual: 0.0, gap: 0.0 },
                iterations: t2.pivots,
            });
        }
        PhaseOutcome::IterationLimit => {
            return Ok(iteration_limit_result(lp));
        }
        PhaseOutcome::Optimal => {}
    }
    t2.refactor()?;

    // Map the basic solution back to the caller's variables.
    let mut x = vec![0.0; lp.num_vars];
    for (r, &j) in t2.basis.iter().enumerate() {
        if let Some((var, sign)) = std_form.back[j] {
            x[var] += sign * std_form.col_scale[j] * t2.xb[r].max(0.0);
        }
    }
    let objective: f64 = lp
        .minimize
        .iter()
        .zip(x.iter())
        .map(|(c, v)| c * v)
        .sum();
    let primal_res = lp
        .rows
        .iter()
        .map(|row| row.violation(&x))
        .fold(0.0f64, f64::max);
    let status = if primal_res <= cfg.accept_tol.max(1e-8) {
        Status::Optimal
    } else {
        Status::NearOptimal
    };
    Ok(SolveResult {
        warm: Vec::new(),
        warm_nv: 0,
        status,
        objective,
        x,
        residuals: Residuals { primal: primal_res, dual: 0.0, gap: 0.0 },
        iterations: t.pivots + t2.pivots,
    })
}

fn iteration_limit_result(lp: &LinearProgram) -> SolveResult {
    SolveResult {
        warm: Vec::new(),
        warm_nv: 0,
        status: Status::IterationLimit,
        objective: f64::NAN,
        x: vec![0.0; lp.num_vars],
        residuals: Residuals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY },
        iterations: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve_lp, AffineRow};

    fn row(coeffs: &[(usize, f64)], rel: Rel, rhs: f64) -> AffineRow {
        AffineRow::new(coeffs.to_vec(), rel, rhs)
    }

    #[test]
    fn min_x_at_lower_bound() {
        let lp = LinearProgram {
            num_vars: 1,
            minimize: vec![1.0],
            rows: vec![row(&[(0, 1.0)], Rel::Ge, 3.0)],
            free: vec![false],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective - 3.0).abs() < 1e-9);
        assert!((r.x[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_pair() {
        let lp = LinearProgram {
            num_vars: 1,
            minimize: vec![0.0],
            rows: vec![
                row(&[(0, 1.0)], Rel::Le, 0.0),
                row(&[(0, 1.0)], Rel::Ge, 1.0),
            ],
            free: vec![false],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        let lp = LinearProgram {
            num_vars: 1,
            minimize: vec![-1.0],
            rows: vec![row(&[(0, 1.0)], Rel::Ge, 0.0)],
            free: vec![false],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Unbounded);
    }

    #[test]
    fn free_variable_reaches_negative_optimum() {
        // min x s.t. x >= -5, x free
        let lp = LinearProgram {
            num_vars: 1,
            minimize: vec![1.0],
            rows: vec![row(&[(0, 1.0)], Rel::Ge, -5.0)],
            free: vec![true],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective + 5.0).abs() < 1e-9);
    }

    #[test]
    fn equality_and_redundant_rows() {
        // x + y = 1 stated twice; min -x with x,y >= 0.
        let lp = LinearProgram {
            num_vars: 2,
            minimize: vec![-1.0, 0.0],
            rows: vec![
                row(&[(0, 1.0), (1, 1.0)], Rel::Eq, 1.0),
                row(&[(0, 2.0), (1, 2.0)], Rel::Eq, 2.0),
            ],
            free: vec![false, false],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective + 1.0).abs() < 1e-9);
        assert!((r.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_zero_rhs_program() {
        // Heavily degenerate: several equalities with rhs 0 plus a
        // normalization row, mimicking CGLP structure.
        let lp = LinearProgram {
            num_vars: 4,
            minimize: vec![1.0, -1.0, 2.0, 0.5],
            rows: vec![
                row(&[(0, 1.0), (1, -1.0)], Rel::Eq, 0.0),
                row(&[(1, 1.0), (2, -1.0)], Rel::Eq, 0.0),
                row(&[(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)], Rel::Eq, 1.0),
            ],
            free: vec![false; 4],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        // x0=x1=x2=t, 3t+s=1: cost 2t+0.5s minimized at t=0, s=1.
        assert!((r.objective - 0.5).abs() < 1e-9);
    }

    #[test]
    fn two_dimensional_vertex() {
        // max x+y s.t. x<=2, y<=3, x+y<=4  ->  min -(x+y) = -4.
        let lp = LinearProgram {
            num_vars: 2,
            minimize: vec![-1.0, -1.0],
            rows: vec![
                row(&[(0, 1.0)], Rel::Le, 2.0),
                row(&[(1, 1.0)], Rel::Le, 3.0),
                row(&[(0, 1.0), (1, 1.0)], Rel::Le, 4.0),
            ],
            free: vec![false, false],
        };
        let r = solve_lp(&lp, &SolverConfig::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.objective + 4.0).abs() < 1e-9);
        // Vertex solution: both tight rows active.
        assert!(r.x[0] + r.x[1] > 4.0 - 1e-9);
    }
}
