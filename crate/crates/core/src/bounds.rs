//! Activation bounds: cheap interval propagation per layer, and tighter
//! per-direction bounds obtained by re-solving the lifted relaxation with
//! a swapped objective.

use crate::error::{Error, Result};
use crate::lifted::{build_sdp_program_with_objective, LiftedIndex};
use crate::network::{InputBox, Network};
use crate::solver::{solve_conic, SolverConfig};
use nalgebra::DVector;
use std::collections::HashMap;

/// Componentwise bounds l^[k] <= x^[k] <= u^[k] for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
}

impl LayerBounds {
    pub fn check_against(&self, net: &Network) -> Result<()> {
        let dims = net.dims();
        if self.lower.len() != dims.len() || self.upper.len() != dims.len() {
            return Err(Error::UnsoundBounds("bounds missing layers".into()));
        }
        for (k, (&d, (l, u))) in dims
            .iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .enumerate()
        {
            if l.len() != d || u.len() != d {
                return Err(Error::UnsoundBounds(format!("layer {k} bound dims")));
            }
            if l.iter().zip(u.iter()).any(|(a, b)| a > b) {
                return Err(Error::UnsoundBounds(format!("layer {k} has l > u")));
            }
            if k >= 1 && l.iter().any(|&v| v < 0.0) {
                return Err(Error::UnsoundBounds(format!(
                    "layer {k} lower bound below 0"
                )));
            }
        }
        Ok(())
    }

    /// Bounds flattened over the stacked x-tilde coordinates.
    pub fn flatten(&self) -> (DVector<f64>, DVector<f64>) {
        let n: usize = self.lower.iter().map(|v| v.len()).sum();
        let mut l = DVector::zeros(n);
        let mut u = DVector::zeros(n);
        let mut at = 0;
        for (lk, uk) in self.lower.iter().zip(self.upper.iter()) {
            l.rows_mut(at, lk.len()).copy_from(lk);
            u.rows_mut(at, uk.len()).copy_from(uk);
            at += lk.len();
        }
        (l, u)
    }

    /// Interval bound on phi . x-tilde implied by the per-layer boxes.
    pub fn direction_interval(&self, phi: &DVector<f64>) -> Result<(f64, f64)> {
        let (l, u) = self.flatten();
        if phi.len() != l.len() {
            return Err(Error::Dimension("direction length != n_tilde".into()));
        }
        let mut lo = 0.0;
        let mut hi = 0.0;
        for i in 0..phi.len() {
            let p = phi[i];
            if p >= 0.0 {
                lo += p * l[i];
                hi += p * u[i];
            } else {
                lo += p * u[i];
                hi += p * l[i];
            }
        }
        Ok((lo, hi))
    }
}

/// Sound per-layer interval arithmetic: sign-split each weight row, then
/// clamp hidden-layer bounds below at zero.
pub fn interval_propagate(net: &Network, bx: &InputBox) -> Result<LayerBounds> {
    if bx.dim() != net.input_dim() {
        return Err(Error::Dimension("box does not match network input".into()));
    }
    let mut lower = vec![bx.lower()];
    let mut upper = vec![bx.upper()];
    for k in 0..net.depth() {
        let w = net.weight(k);
        let (lp, up) = (&lower[k], &upper[k]);
        let mut l = DVector::zeros(w.nrows());
        let mut u = DVector::zeros(w.nrows());
        for i in 0..w.nrows() {
            let (mut lo, mut hi) = (0.0, 0.0);
            for j in 0..w.ncols() {
                let wij = w[(i, j)];
                if wij >= 0.0 {
                    lo += wij * lp[j];
                    hi += wij * up[j];
                } else {
                    lo += wij * up[j];
                    hi += wij * lp[j];
                }
            }
            l[i] = lo.max(0.0);
            u[i] = hi.max(0.0);
        }
        lower.push(l);
        upper.push(u);
    }
    Ok(LayerBounds { lower, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sense {
    Min,
    Max,
}

/// Optimal value of {min|max phi . x-tilde} over the base lifted
/// relaxation; a valid bound on phi . x-tilde for every true trajectory.
pub fn auxiliary_bound(
    net: &Network,
    bx: &InputBox,
    bounds: &LayerBounds,
    phi: &DVector<f64>,
    sense: Sense,
    cfg: &SolverConfig,
) -> Result<f64> {
    let index = LiftedIndex::new(net);
    if phi.len() != index.n_tilde() {
        return Err(Error::Dimension("direction length != n_tilde".into()));
    }
    let sign = match sense {
        Sense::Min => -1.0,
        Sense::Max => 1.0,
    };
    let mut objective = vec![0.0; index.chi_len()];
    for i in 0..phi.len() {
        objective[i] = sign * phi[i];
    }
    let prog = build_sdp_program_with_objective(net, bx, bounds, objective, &[])?;
    let res = solve_conic(&prog, cfg)?.into_usable()?;
    Ok(sign * res.objective)
}

/// Memoizes auxiliary bounds per exact direction bit pattern.
#[derive(Debug, Default)]
pub struct BoundCache {
    map: HashMap<(Vec<u64>, Sense), f64>,
}

impl BoundCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get_or_solve(
        &mut self,
        net: &Network,
        bx: &InputBox,
        bounds: &LayerBounds,
        phi: &DVector<f64>,
        sense: Sense,
        cfg: &SolverConfig,
    ) -> Result<f64> {
        let key: Vec<u64> = phi.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = self.map.get(&(key.clone(), sense)) {
            return Ok(v);
        }
        let v = auxiliary_bound(net, bx, bounds, phi, sense, cfg)?;
        self.map.insert((key, sense), v);
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::random_network;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    #[test]
    fn sign_split_example() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        let bx = InputBox::new(DVector::zeros(2), 1.0).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        assert_relative_eq!(b.lower[1][0], 0.0);
        assert_relative_eq!(b.upper[1][0], 2.0);
    }

    #[test]
    fn zero_radius_reproduces_trajectory() {
        let net = random_network(&[3, 4, 2], 9, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.5, -0.3, 0.8]);
        let bx = InputBox::new(x.clone(), 0.0).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        let traj = net.trajectory(&x).unwrap();
        for (k, t) in traj.iter().enumerate() {
            assert_relative_eq!(&b.lower[k], t, epsilon = 1e-12);
            assert_relative_eq!(&b.upper[k], t, epsilon = 1e-12);
        }
    }

    #[test]
    fn monte_carlo_containment() {
        let net = random_network(&[3, 5, 4, 2], 21, 0.7).unwrap();
        let bx = InputBox::new(DVector::from_vec(vec![0.1, 0.4, -0.2]), 0.1).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        for t in 0..1000u64 {
            let x = bx.sample(77, t);
            let traj = net.trajectory(&x).unwrap();
            for (k, act) in traj.iter().enumerate() {
                for i in 0..act.len() {
                    assert!(b.lower[k][i] <= act[i] + 1e-12);
                    assert!(b.upper[k][i] >= act[i] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn monotone_in_radius() {
        let net = random_network(&[2, 4, 3], 30, 1.2).unwrap();
        let center = DVector::from_vec(vec![0.2, -0.7]);
        let small = interval_propagate(&net, &InputBox::new(center.clone(), 0.05).unwrap()).unwrap();
        let large = interval_propagate(&net, &InputBox::new(center, 0.2).unwrap()).unwrap();
        for k in 0..small.lower.len() {
            for i in 0..small.lower[k].len() {
                assert!(large.lower[k][i] <= small.lower[k][i] + 1e-12);
                assert!(large.upper[k][i] >= small.upper[k][i] - 1e-12);
            }
        }
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let net = random_network(&[2, 2], 1, 1.0).unwrap();
        let bx = InputBox::new(DVector::zeros(3), 0.1).unwrap();
        assert!(interval_propagate(&net, &bx).is_err());
    }

    #[test]
    fn direction_interval_signs() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        let bx = InputBox::new(DVector::zeros(2), 1.0).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        // phi picks x0 - x1: range [-2, 2].
        let (lo, hi) = b
            .direction_interval(&DVector::from_vec(vec![1.0, -1.0, 0.0]))
            .unwrap();
        assert_relative_eq!(lo, -2.0);
        assert_relative_eq!(hi, 2.0);
    }

    #[test]
    fn auxiliary_bound_box_direction() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        let bx = InputBox::new(DVector::from_vec(vec![0.3, -0.2]), 0.25).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        let cfg = SolverConfig::default();
        let phi = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let lo = auxiliary_bound(&net, &bx, &b, &phi, Sense::Min, &cfg).unwrap();
        let hi = auxiliary_bound(&net, &bx, &b, &phi, Sense::Max, &cfg).unwrap();
        assert!((lo - 0.05).abs() < 1e-4, "lo {lo}");
        assert!((hi - 0.55).abs() < 1e-4, "hi {hi}");
    }

    #[test]
    fn auxiliary_bound_zero_direction() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        let bx = InputBox::new(DVector::zeros(2), 1.0).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        let cfg = SolverConfig::default();
        let phi = DVector::zeros(3);
        for sense in [Sense::Min, Sense::Max] {
            let v = auxiliary_bound(&net, &bx, &b, &phi, sense, &cfg).unwrap();
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn auxiliary_bound_covers_sampled_trajectories() {
        let net = random_network(&[2, 3, 1], 13, 0.9).unwrap();
        let bx = InputBox::new(DVector::from_vec(vec![0.2, 0.1]), 0.3).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        let cfg = SolverConfig::default();
        let idx = LiftedIndex::new(&net);
        let mut phi = DVector::zeros(idx.n_tilde());
        // Mixed direction touching input and output coordinates.
        phi[0] = 0.7;
        phi[idx.n_tilde() - 1] = 1.0;
        phi[2] = -0.4;
        let hi = auxiliary_bound(&net, &bx, &b, &phi, Sense::Max, &cfg).unwrap();
        let lo = auxiliary_bound(&net, &bx, &b, &phi, Sense::Min, &cfg).unwrap();
        assert!(lo <= hi);
        let mut best = f64::NEG_INFINITY;
        let mut worst = f64::INFINITY;
        for t in 0..10_000u64 {
            let x = bx.sample(5150, t);
            let traj = net.trajectory(&x).unwrap();
            let mut flat = Vec::new();
            for tr in &traj {
                flat.extend_from_slice(tr.as_slice());
            }
            let v: f64 = flat.iter().zip(phi.iter()).map(|(a, b)| a * b).sum();
            best = best.max(v);
            worst = worst.min(v);
        }
        assert!(hi >= best - 1e-5, "hi {hi} < sampled max {best}");
        assert!(lo <= worst + 1e-5, "lo {lo} > sampled min {worst}");
    }

    #[test]
    fn cache_hits_same_direction() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        let bx = InputBox::new(DVector::zeros(2), 0.5).unwrap();
        let b = interval_propagate(&net, &bx).unwrap();
        let cfg = SolverConfig::default();
        let mut cache = BoundCache::new();
        let phi = DVector::from_vec(vec![1.0, 1.0, 0.5]);
        let a = cache
            .get_or_solve(&net, &bx, &b, &phi, Sense::Max, &cfg)
            .unwrap();
        assert_eq!(cache.len(), 1);
        let b2 = cache
            .get_or_solve(&net, &bx, &b, &phi, Sense::Max, &cfg)
            .unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(a.to_bits(), b2.to_bits());
    }
}
