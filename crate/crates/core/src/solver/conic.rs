//! Douglas-Rachford splitting for `max obj.x` over affine rows plus one
//! PSD block.
//!
//! The iteration alternates an exact projection onto the affine set
//! (dense Cholesky of G G^T, computed once) with a projection onto the
//! cone. The matrix variable lives in scaled `svec` coordinates, where the
//! PSD cone is self-dual and its projection is a single eigenvalue clamp.

use super::{Rel, Residuals, SolveResult, SolverConfig, Status};
use crate::error::{Error, Result};
use crate::lifted::ConicProgram;
use nalgebra::{Cholesky, DMatrix, DVector};

const SQRT2: f64 = std::f64::consts::SQRT_2;
const RELAX: f64 = 1.8;
const SIGMA: f64 = 0.25;
const CHECK_EVERY: usize = 25;
const BLOWUP: f64 = 1e12;
/// Anderson acceleration memory; 0 disables it.
const AA_MEM: usize = 5;
/// An accepted acceleration step must keep the residual below this multiple
/// of its pre-step value, else it is reverted.
const AA_ACCEPT: f64 = 1.5;
/// Residual growth factor that triggers a restart from the best iterate.
const AA_GUARD: f64 = 20.0;
/// Mixing weights larger than this mean the history is degenerate.
const AA_GAMMA_CAP: f64 = 1e3;
/// Stall window for the objective-weight continuation.
const SIGMA_WINDOW: usize = 2000;
/// Number of windows over which the required pace is judged.
const SIGMA_HORIZON: usize = 4;
/// Windows to wait out the transient after a sigma change.
const SIGMA_GRACE: usize = 2;
/// Halve sigma unless the best residual fell by this factor per horizon.
const SIGMA_PACE: f64 = 0.25;
const SIGMA_FLOOR: f64 = 3e-3;

pub(super) fn svec_len(s: usize) -> usize {
    s * (s + 1) / 2
}

/// Row-major upper-triangle index of (i, j), i <= j, in a side-s matrix.
pub(super) fn svec_index(s: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < s);
    i * s - (i * i - i) / 2 + (j - i)
}

fn mat_to_svec(m: &DMatrix<f64>, out: &mut [f64]) {
    let s = m.nrows();
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            out[k] = if i == j { m[(i, i)] } else { SQRT2 * m[(i, j)] };
            k += 1;
        }
    }
}

fn svec_to_mat(v: &[f64], m: &mut DMatrix<f64>) {
    let s = m.nrows();
    let mut k = 0;
    for i in 0..s {
        for j in i..s {
            if i == j {
                m[(i, i)] = v[k];
            } else {
                let x = v[k] / SQRT2;
                m[(i, j)] = x;
                m[(j, i)] = x;
            }
            k += 1;
        }
    }
}

/// Maps a coefficient on lifted variable `chi_idx` to (svec index, factor)
/// so that `a * chi = (a * factor) * v[idx]`.
struct VarMap {
    entries: Vec<(usize, f64)>,
    side: usize,
}

impl VarMap {
    fn new(side: usize) -> Self {
        let n = side - 1;
        let mut entries = Vec::with_capacity(n + svec_len(n));
        for k in 0..n {
            // chi_k = Xi[0, k+1], stored as sqrt2 * Xi in svec.
            entries.push((svec_index(side, 0, k + 1), 1.0 / SQRT2));
        }
        for i in 0..n {
            for j in i..n {
                let idx = svec_index(side, i + 1, j + 1);
                let f = if i == j { 1.0 } else { 1.0 / SQRT2 };
                entries.push((idx, f));
            }
        }
        Self { entries, side }
    }

    fn chi_from_svec(&self, v: &[f64]) -> Vec<f64> {
        self.entries.iter().map(|&(idx, f)| v[idx] * f).collect()
    }
}

struct System {
    /// Sparse rows of G over w = (v, slacks).
    rows: Vec<Vec<(usize, f64)>>,
    h: Vec<f64>,
    n_v: usize,
    n_w: usize,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

impl System {
    fn mul_g(&self, w: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let mut s = 0.0;
            for &(j, a) in row {
                s += a * w[j];
            }
            out[i] = s;
        }
    }

    fn mul_gt_sub(&self, u: &[f64], out: &mut [f64]) {
        for (i, row) in self.rows.iter().enumerate() {
            let ui = u[i];
            if ui != 0.0 {
                for &(j, a) in row {
                    out[j] -= a * ui;
                }
            }
        }
    }

    /// Projects w onto {G w = h} in place.
    fn project_affine(&self, w: &mut [f64], scratch: &mut [f64]) {
        self.mul_g(w, scratch);
        for (ri, hi) in scratch.iter_mut().zip(self.h.iter()) {
            *ri -= hi;
        }
        let mut r = DVector::from_column_slice(scratch);
        self.chol.solve_mut(&mut r);
        self.mul_gt_sub(r.as_slice(), w);
    }
}

fn build_system(prog: &ConicProgram, map: Option<&VarMap>, scaling: bool) -> Result<System> {
    let n_v = map.map_or(prog.num_vars, |m| svec_len(m.side));
    let n_ineq = prog.rows.iter().filter(|r| r.rel != Rel::Eq).count();
    let n_w = n_v + n_ineq;
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(prog.rows.len() + 1);
    let mut h = Vec::with_capacity(prog.rows.len() + 1);

    if let Some(map) = map {
        // Corner of Xi pinned to 1.
        rows.push(vec![(svec_index(map.side, 0, 0), 1.0)]);
        h.push(1.0);
    }
    let mut slack = n_v;
    for row in &prog.rows {
        let mut g_row: Vec<(usize, f64)> = Vec::with_capacity(row.coeffs.len() + 1);
        match map {
            Some(map) => {
                for &(chi, a) in &row.coeffs {
                    let (idx, f) = map.entries[chi];
                    g_row.push((idx, a * f));
                }
            }
            None => {
                for &(chi, a) in &row.coeffs {
                    g_row.push((chi, a));
                }
            }
        }
        // Coalesce duplicate indices (diag + off-diag can repeat on input).
        g_row.sort_unstable_by_key(|&(j, _)| j);
        g_row.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        match row.rel {
            Rel::Eq => {}
            Rel::Ge => {
                g_row.push((slack, -1.0));
                slack += 1;
            }
            Rel::Le => {
                g_row.push((slack, 1.0));
                slack += 1;
            }
        }
        rows.push(g_row);
        h.push(row.rhs);
    }

    // Ruiz-style equilibration, rows only: the cone structure pins the
    // column geometry, so column scaling is off the table.
    if scaling {
        for _ in 0..3 {
            for (row, hi) in rows.iter_mut().zip(h.iter_mut()) {
                let mx = row.iter().map(|&(_, a)| a.abs()).fold(0.0f64, f64::max);
                if mx > 0.0 {
                    let d = 1.0 / mx.sqrt();
                    for e in row.iter_mut() {
                        e.1 *= d;
                    }
                    *hi *= d;
                }
            }
        }
    }

    let m = rows.len();
    let mut ggt = DMatrix::zeros(m, m);
    // Dense assembly via column buckets would be faster, but m stays small.
    for i in 0..m {
        for j in i..m {
            let (a, b) = (&rows[i], &rows[j]);
            let mut s = 0.0;
            let (mut p, mut q) = (0, 0);
            while p < a.len() && q < b.len() {
                match a[p].0.cmp(&b[q].0) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        s += a[p].1 * b[q].1;
                        p += 1;
                        q += 1;
                    }
                }
            }
            ggt[(i, j)] = s;
            ggt[(j, i)] = s;
        }
    }
    let mut reg = 0.0;
    let chol = loop {
        let mut m2 = ggt.clone();
        if reg > 0.0 {
            for i in 0..m {
                m2[(i, i)] += reg;
            }
        }
        match Cholesky::new(m2) {
            Some(c) => break c,
            None => {
                reg = if reg == 0.0 { 1e-10 } else { reg * 100.0 };
                if reg > 1e-4 {
                    return Err(Error::NonFinite(
                        "affine system Gram matrix not factorizable".into(),
                    ));
                }
            }
        }
    };
    Ok(System { rows, h, n_v, n_w, chol })
}

/// Cone projection: PSD block via eigenvalue clamp (or identity when the
/// program has no PSD block), slacks clamped at zero.
fn project_cone(
    w: &mut [f64],
    map: Option<&VarMap>,
    buf: &mut DMatrix<f64>,
    n_v: usize,
) {
    if let Some(map) = map {
        svec_to_mat(&w[..n_v], buf);
        let eig = buf.clone_owned().symmetric_eigen();
        buf.fill(0.0);
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > 0.0 {
                let col = eig.eigenvectors.column(k);
                buf.syger(lam, &col, &col, 1.0);
            }
        }
        for i in 0..map.side {
            for j in (i + 1)..map.side {
                buf[(i, j)] = buf[(j, i)];
            }
        }
        mat_to_svec(buf, &mut w[..n_v]);
    }
    for x in w[n_v..].iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

pub(super) fn solve(
    prog: &ConicProgram,
    cfg: &SolverConfig,
    warm: Option<&SolveResult>,
) -> Result<SolveResult> {
    let map = prog.psd_side.map(VarMap::new);
    let map_ref = map.as_ref();
    let sys = build_system(prog, map_ref, cfg.scaling)?;
    let n_w = sys.n_w;
    let n_v = sys.n_v;

    // Minimization objective over w, normalized to unit scale.
    let mut c_w = vec![0.0; n_w];
    match map_ref {
        Some(map) => {
            for (chi, &a) in prog.objective.iter().enumerate() {
                if a != 0.0 {
                    let (idx, f) = map.entries[chi];
                    c_w[idx] -= a * f;
                }
            }
        }
        None => {
            for (chi, &a) in prog.objective.iter().enumerate() {
                c_w[chi] = -a;
            }
        }
    }
    let c_scale = c_w.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for v in c_w.iter_mut() {
        *v /= c_scale;
    }

    let side = map_ref.map_or(1, |m| m.side);
    let mut buf = DMatrix::zeros(side, side);
    let mut scratch = vec![0.0; sys.rows.len()];
    let mut z = vec![0.0; n_w];
    let mut x = vec![0.0; n_w];
    let mut y = vec![0.0; n_w];
    // A seed is usable only when the cone block is unchanged and the old
    // rows (hence slack order) form a prefix of the new ones; extra slack
    // entries stay at zero.
    if let Some(prev) = warm {
        if prev.warm_nv == n_v && prev.warm.len() <= n_w {
            z[..prev.warm.len()].copy_from_slice(&prev.warm);
        }
    }

    let extract = |w: &[f64]| -> Vec<f64> {
        match map_ref {
            Some(map) => {
                let mut chi = map.chi_from_svec(&w[..n_v]);
                // Renormalize so the corner is exactly 1; the projected
                // cone point has corner 1 + O(residual).
                let t = w[svec_index(map.side, 0, 0)];
                if (t - 1.0).abs() < 0.1 && t != 0.0 {
                    for c in chi.iter_mut() {
                        *c /= t;
                    }
                }
                chi
            }
            None => w[..prog.num_vars].to_vec(),
        }
    };
    let objective_of = |chi: &[f64]| -> f64 {
        prog.objective
            .iter()
            .zip(chi.iter())
            .map(|(a, c)| a * c)
            .sum()
    };

    let relax = RELAX;
    // The objective weight sigma trades off optimality against feasibility
    // progress per iteration. Residuals are reported on a sigma-free scale,
    // so the continuation below (shrink sigma when a window stalls) changes
    // the iteration path but not what "converged" means.
    let mut sigma = SIGMA;
    // Anderson acceleration over the fixed-point map T(z) = z + relax(y - x):
    // type-II mixing on the last AA_MEM step/residual differences, with a
    // restart from the best-residual iterate whenever the residual grows by
    // AA_GUARD. Plain splitting is the cooldown fallback, so the safeguarded
    // iteration inherits its robustness; every rejected step doubles the
    // backoff, so a hostile problem degrades to the plain iteration.
    let mut r = vec![0.0; n_w];
    let mut dz_hist: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::new();
    let mut dr_hist: std::collections::VecDeque<Vec<f64>> = std::collections::VecDeque::new();
    let mut z_prev = vec![0.0; n_w];
    let mut r_prev = vec![0.0; n_w];
    let mut have_prev = false;
    let mut z_anchor = z.clone();
    let mut r_anchor = f64::INFINITY;
    let mut cooldown = 0usize;
    let mut penalty = AA_MEM;
    let mut aa_since_restore = false;
    let mut pending: Option<(Vec<f64>, f64)> = None;
    let mut win_best = f64::INFINITY;
    let mut win_hist: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut sigma_best = sigma;
    let mut win_at_best = f64::INFINITY;
    let mut z_pin: Vec<f64> = Vec::new();
    let mut adapt_on = true;
    let mut grace = 0usize;

    // Best iterate seen at a residual check, kept for the final extraction.
    let mut status = Status::IterationLimit;
    let mut best = Residuals { primal: f64::INFINITY, dual: f64::INFINITY, gap: f64::INFINITY };
    let mut best_chi: Option<Vec<f64>> = None;
    let mut iter = 0;
    while iter < cfg.max_iters {
        // x = Pi_affine(z - sigma c)
        x.copy_from_slice(&z);
        for (xi, ci) in x.iter_mut().zip(c_w.iter()) {
            *xi -= sigma * ci;
        }
        sys.project_affine(&mut x, &mut scratch);
        // y = Pi_cone(2x - z)
        for j in 0..n_w {
            y[j] = 2.0 * x[j] - z[j];
        }
        project_cone(&mut y, map_ref, &mut buf, n_v);
        let mut fix = 0.0f64;
        let mut ynorm = 0.0f64;
        let mut rnorm = 0.0f64;
        for j in 0..n_w {
            let d = y[j] - x[j];
            fix = fix.max(d.abs());
            ynorm = ynorm.max(y[j].abs());
            r[j] = relax * d;
            rnorm += r[j] * r[j];
        }
        let rnorm = rnorm.sqrt();
        iter += 1;

        if iter % CHECK_EVERY == 0 || iter == cfg.max_iters {
            if !fix.is_finite() || ynorm > BLOWUP {
                status = diverged_status(&c_w, &z);
                break;
            }
            let chi = extract(&y);
            let primal = prog
                .rows
                .iter()
                .map(|r| r.violation(&chi) / (1.0 + r.rhs.abs()))
                .fold(0.0f64, f64::max);
            // The step y - x shrinks with sigma even at a fixed distance
            // from stationarity, so dual and gap are measured per unit of
            // objective weight.
            let dual = fix / (sigma * (1.0 + ynorm));
            let gap = {
                let co: f64 = c_w.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()
                    - c_w.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
                co.abs() / (sigma * (1.0 + ynorm))
            };
            let res = Residuals { primal, dual, gap };
            if res.max() < best.max() {
                best = res;
                best_chi = Some(chi);
            }
            win_best = win_best.min(res.max());
            if std::env::var_os("CERTICUT_DR_TRACE").is_some() && iter % 5000 == 0 {
                eprintln!(
                    "dr iter {iter} sigma {sigma:.1e} primal {primal:.3e} dual {dual:.3e} gap {gap:.3e}"
                );
            }
            if primal <= cfg.abs_tol && dual <= cfg.abs_tol.max(cfg.rel_tol) {
                best = res;
                best_chi = Some(extract(&y));
                status = Status::Optimal;
                break;
            }
        }
        if !rnorm.is_finite() {
            status = diverged_status(&c_w, &z);
            break;
        }
        if iter % SIGMA_WINDOW == 0 {
            if grace > 0 {
                // The iterate is still relaxing into the new sigma; keep the
                // transient out of the pace statistics.
                grace -= 1;
            } else {
                if win_best < win_at_best {
                    win_at_best = win_best;
                    sigma_best = sigma;
                    z_pin.clear();
                    z_pin.extend_from_slice(&z);
                }
                if adapt_on && win_best > 10.0 * cfg.abs_tol {
                    let lagged = win_hist.front().copied().unwrap_or(f64::INFINITY);
                    if win_hist.len() == SIGMA_HORIZON && win_best > SIGMA_PACE * lagged {
                        if sigma > SIGMA_FLOOR {
                            sigma = (0.5 * sigma).max(SIGMA_FLOOR);
                        } else {
                            // Out of levels: settle on the best sigma seen
                            // and restart from the iterate that earned it.
                            sigma = sigma_best;
                            adapt_on = false;
                            if !z_pin.is_empty() {
                                z.copy_from_slice(&z_pin);
                            }
                        }
                        dz_hist.clear();
                        dr_hist.clear();
                        have_prev = false;
                        pending = None;
                        r_anchor = f64::INFINITY;
                        aa_since_restore = false;
                        win_hist.clear();
                        grace = SIGMA_GRACE;
                    }
                }
                if grace == 0 {
                    if win_hist.len() == SIGMA_HORIZON {
                        win_hist.pop_front();
                    }
                    win_hist.push_back(win_best);
                }
            }
            win_best = f64::INFINITY;
        }

        // Lookahead acceptance: if the last update was accelerated and the
        // residual grew, fall back to the plain step it replaced.
        if let Some((fallback, before)) = pending.take() {
            if rnorm > AA_ACCEPT * before {
                z = fallback;
                dz_hist.clear();
                dr_hist.clear();
                have_prev = false;
                cooldown = penalty;
                penalty *= 2;
                continue;
            }
            penalty = AA_MEM;
        }
        if rnorm < r_anchor {
            r_anchor = rnorm;
            z_anchor.copy_from_slice(&z);
        } else if rnorm > AA_GUARD * r_anchor && aa_since_restore {
            // Plain splitting recovers from swings on its own; only undo
            // drift the acceleration caused, and back off harder each time
            // so the tail is eventually unaccelerated.
            z.copy_from_slice(&z_anchor);
            dz_hist.clear();
            dr_hist.clear();
            have_prev = false;
            cooldown = penalty;
            penalty *= 2;
            aa_since_restore = false;
            continue;
        }

        if have_prev {
            let mut dz = dz_hist
                .len()
                .eq(&AA_MEM)
                .then(|| dz_hist.pop_front().unwrap())
                .unwrap_or_else(|| vec![0.0; n_w]);
            let mut dr = dr_hist
                .len()
                .eq(&AA_MEM)
                .then(|| dr_hist.pop_front().unwrap())
                .unwrap_or_else(|| vec![0.0; n_w]);
            for j in 0..n_w {
                dz[j] = z[j] - z_prev[j];
                dr[j] = r[j] - r_prev[j];
            }
            dz_hist.push_back(dz);
            dr_hist.push_back(dr);
        }
        z_prev.copy_from_slice(&z);
        r_prev.copy_from_slice(&r);
        have_prev = true;

        let m = dz_hist.len();
        let gamma = if m > 0 && cooldown == 0 {
            // min_gamma |r - DR gamma| by SVD least squares; degenerate
            // histories (huge mixing weights) fall back to the plain step.
            let mut drm = DMatrix::zeros(n_w, m);
            for (k, dr) in dr_hist.iter().enumerate() {
                for j in 0..n_w {
                    drm[(j, k)] = dr[j];
                }
            }
            let rv = DVector::from_column_slice(&r);
            drm.svd(true, true)
                .solve(&rv, 1e-10)
                .ok()
                .filter(|g| g.iter().all(|v| v.is_finite() && v.abs() <= AA_GAMMA_CAP))
        } else {
            if cooldown > 0 {
                cooldown -= 1;
            }
            None
        };
        match gamma {
            Some(g) => {
                // Keep the plain step around so a bad extrapolation can be
                // undone after one evaluation.
                let mut fallback = z.clone();
                for j in 0..n_w {
                    fallback[j] += r[j];
                    let mut step = r[j];
                    for (k, gk) in g.iter().enumerate() {
                        step -= gk * (dz_hist[k][j] + dr_hist[k][j]);
                    }
                    z[j] += step;
                }
                pending = Some((fallback, rnorm));
                aa_since_restore = true;
            }
            None => {
                for j in 0..n_w {
                    z[j] += r[j];
                }
            }
        }
    }
    if status == Status::IterationLimit && best.max() <= cfg.accept_tol {
        status = Status::NearOptimal;
    }

    let chi = best_chi.unwrap_or_else(|| extract(&y));
    let objective = objective_of(&chi);
    Ok(SolveResult {
        status,
        objective,
        x: chi,
        residuals: best,
        iterations: iter,
        warm: z,
        warm_nv: n_v,
    })
}

fn diverged_status(c_w: &[f64], z: &[f64]) -> Status {
    // Blowup direction improving the (minimization) objective means the
    // program is unbounded; otherwise call it infeasible.
    let drift: f64 = c_w.iter().zip(z.iter()).map(|(a, b)| a * b).sum();
    if drift < 0.0 {
        Status::Unbounded
    } else {
        Status::Infeasible
    }
}
