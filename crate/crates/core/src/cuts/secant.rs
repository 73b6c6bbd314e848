//! Secant disjunctions: partition the range of phi . x-tilde and bound the
//! lifted quadratic by the chord over each piece.

use crate::error::{Error, Result};
use crate::lifted::{chi_len_for, chi_xx_for};
use crate::solver::{AffineRow, Rel};
use nalgebra::DVector;

/// Below this width the disjunction is pointless and callers skip the
/// direction entirely.
pub const DEGENERATE_TOL: f64 = 1e-9;

/// Direction phi with partition points xi_0 = l < ... < xi_{Q+1} = u.
/// Q counts interior points, so there are Q+1 secant pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SecantDisjunction {
    pub phi: DVector<f64>,
    pub xi: Vec<f64>,
}

impl SecantDisjunction {
    pub fn l(&self) -> f64 {
        self.xi[0]
    }

    pub fn u(&self) -> f64 {
        *self.xi.last().unwrap()
    }

    /// Interior point count Q.
    pub fn interior_points(&self) -> usize {
        self.xi.len() - 2
    }

    pub fn pieces(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.u() - self.l() < DEGENERATE_TOL
    }

    /// Worst-case secant-vs-parabola error max_q (xi_{q+1}-xi_q)^2 / 4.
    pub fn max_secant_error(&self) -> f64 {
        self.xi
            .windows(2)
            .map(|w| (w[1] - w[0]).powi(2) / 4.0)
            .fold(0.0f64, f64::max)
    }
}

/// Equal partition of [l, u] with q interior points.
pub fn equal_partition(phi: DVector<f64>, l: f64, u: f64, q: usize) -> Result<SecantDisjunction> {
    if !(l.is_finite() && u.is_finite()) {
        return Err(Error::NonFinite("partition endpoints".into()));
    }
    if u < l {
        return Err(Error::InvalidArgument(format!("empty range [{l}, {u}]")));
    }
    if u - l < DEGENERATE_TOL {
        // Trivial single-interval partition; callers check is_degenerate.
        return Ok(SecantDisjunction { phi, xi: vec![l, u] });
    }
    let pieces = q + 1;
    let xi = (0..=pieces)
        .map(|t| l + (u - l) * t as f64 / pieces as f64)
        .collect();
    Ok(SecantDisjunction { phi, xi })
}

/// The affine rows of piece q over chi: the window on phi . x-tilde and
/// the chord bound <X, phi phi^T> <= (xi_q + xi_{q+1}) phi.x - xi_q xi_{q+1},
/// stated in >= form.
pub fn disjunct_constraints(d: &SecantDisjunction, q: usize) -> Result<Vec<AffineRow>> {
    if q >= d.pieces() {
        return Err(Error::InvalidArgument(format!(
            "piece {q} out of range ({} pieces)",
            d.pieces()
        )));
    }
    let (lo, hi) = (d.xi[q], d.xi[q + 1]);
    let n = d.phi.len();
    let phi_row: Vec<(usize, f64)> = d
        .phi
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(i, &p)| (i, p))
        .collect();
    let mut rows = Vec::with_capacity(3);
    rows.push(AffineRow::new(phi_row.clone(), Rel::Ge, lo));
    rows.push(AffineRow::new(phi_row.clone(), Rel::Le, hi));
    // -<X, phi phi^T> + (lo + hi) phi.x >= lo * hi
    let mut coeffs: Vec<(usize, f64)> = phi_row
        .iter()
        .map(|&(i, p)| (i, (lo + hi) * p))
        .collect();
    for a in 0..n {
        let pa = d.phi[a];
        if pa == 0.0 {
            continue;
        }
        for b in a..n {
            let pb = d.phi[b];
            if pb == 0.0 {
                continue;
            }
            let scale = if a == b { 1.0 } else { 2.0 };
            coeffs.push((chi_xx_for(n, a, b), -scale * pa * pb));
        }
    }
    rows.push(AffineRow::new(coeffs, Rel::Ge, lo * hi));
    Ok(rows)
}

/// The two direction vectors spanning all disjunct rows over chi:
/// phi on the x-tilde part, and the packed phi phi^T on the X-tilde part.
pub fn disjunct_span(d: &SecantDisjunction) -> (Vec<f64>, Vec<f64>) {
    let n = d.phi.len();
    let len = chi_len_for(n);
    let mut lin = vec![0.0; len];
    let mut quad = vec![0.0; len];
    for i in 0..n {
        lin[i] = d.phi[i];
        let pi = d.phi[i];
        if pi == 0.0 {
            continue;
        }
        for j in i..n {
            let scale = if i == j { 1.0 } else { 2.0 };
            quad[chi_xx_for(n, i, j)] = scale * pi * d.phi[j];
        }
    }
    (lin, quad)
}

/// Summed area between parabola and chords for a partition: sum w^3 / 6.
pub fn secant_area(xi: &[f64]) -> f64 {
    xi.windows(2).map(|w| (w[1] - w[0]).powi(3) / 6.0).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{rank1_lift, vectorize, LiftedIndex};
    use crate::network::{random_network, InputBox};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_partition_arithmetic() {
        let d = equal_partition(DVector::zeros(1), -1.0, 1.5, 4).unwrap();
        let want = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5];
        assert_eq!(d.xi.len(), want.len());
        for (a, b) in d.xi.iter().zip(want.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(d.interior_points(), 4);
        assert_eq!(d.pieces(), 5);
    }

    #[test]
    fn zero_interior_points_single_secant() {
        let d = equal_partition(DVector::zeros(1), 0.0, 1.0, 0).unwrap();
        assert_eq!(d.xi, vec![0.0, 1.0]);
        assert!(!d.is_degenerate());
        assert!(equal_partition(DVector::zeros(1), 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn degenerate_range_collapses() {
        let d = equal_partition(DVector::zeros(1), 0.5, 0.5 + 1e-12, 7).unwrap();
        assert!(d.is_degenerate());
        assert_eq!(d.xi.len(), 2);
    }

    #[test]
    fn on_parabola_point_satisfies_its_piece() {
        // 1-d chi layout: x, X. Point on the parabola at x = 0.5.
        let d = equal_partition(DVector::from_vec(vec![1.0]), 0.0, 1.0, 0).unwrap();
        let rows = disjunct_constraints(&d, 0).unwrap();
        let chi = [0.5, 0.25];
        for row in &rows {
            assert!(row.violation(&chi) <= 1e-12);
        }
        // Above the chord: X too large for the secant row.
        let bad = [0.5, 0.6];
        assert!(rows[2].violation(&bad) > 0.0);
    }

    #[test]
    fn secant_error_vertex_of_quarter() {
        // Single piece on [0,1]: max chord-parabola distance is 1/4.
        let d = equal_partition(DVector::from_vec(vec![1.0]), 0.0, 1.0, 0).unwrap();
        assert_relative_eq!(d.max_secant_error(), 0.25);
        // Q interior points shrink it as (u-l)^2 / (4 (Q+1)^2).
        let d3 = equal_partition(DVector::from_vec(vec![1.0]), 0.0, 1.0, 3).unwrap();
        assert_relative_eq!(d3.max_secant_error(), 1.0 / 64.0);
    }

    #[test]
    fn rank1_lifts_hit_exactly_one_piece() {
        let net = random_network(&[2, 3, 1], 8, 1.0).unwrap();
        let bx = InputBox::new(DVector::from_vec(vec![0.1, -0.3]), 0.4).unwrap();
        let idx = LiftedIndex::new(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut phi = DVector::from_fn(idx.n_tilde(), |_, _| rng.gen_range(-1.0..1.0));
        phi /= phi.norm();
        // Sound direction range from sampling, padded.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let lifts: Vec<Vec<f64>> = (0..1000)
            .map(|t| {
                let sol = rank1_lift(&net, &bx, &bx.sample(3, t)).unwrap();
                let chi = vectorize(&idx, &sol);
                let v: f64 = (0..idx.n_tilde()).map(|i| phi[i] * chi[i]).sum();
                lo = lo.min(v);
                hi = hi.max(v);
                chi
            })
            .collect();
        let d = equal_partition(phi, lo - 0.05, hi + 0.05, 3).unwrap();
        for chi in &lifts {
            let mut hits = 0;
            for q in 0..d.pieces() {
                let rows = disjunct_constraints(&d, q).unwrap();
                if rows.iter().all(|r| r.violation(chi) <= 1e-9) {
                    hits += 1;
                }
            }
            // Boundary ties can double-count; they cannot miss.
            assert!(hits >= 1, "lift in no piece");
            assert!(hits <= 2);
        }
    }

    #[test]
    fn equal_partition_minimizes_red_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let l: f64 = rng.gen_range(-3.0..2.0);
            let u = l + rng.gen_range(0.1..4.0);
            let q = rng.gen_range(0..=5usize);
            let eq = equal_partition(DVector::zeros(1), l, u, q).unwrap();
            let area_eq = secant_area(&eq.xi);
            for _ in 0..1000 {
                // Random interior points, sorted.
                let mut pts: Vec<f64> = (0..q).map(|_| rng.gen_range(l..u)).collect();
                pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut xi = vec![l];
                xi.extend(pts);
                xi.push(u);
                assert!(area_eq <= secant_area(&xi) + 1e-12);
            }
        }
    }
}
