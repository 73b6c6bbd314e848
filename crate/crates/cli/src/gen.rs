//! Instance generation: random or toy-trained networks plus a margin
//! problem around a confidently classified center point.

use certicut::network::random_network;
use certicut::{Error, Network, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_POINTS_PER_CLASS: usize = 32;

/// Two seeded uniform blobs in the plane, one per class. The blobs sit in
/// opposite quadrants so a bias-free relu network can tell them apart.
pub fn toy_dataset(seed: u64) -> Vec<(DVector<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1b5_4a32);
    let means = [[0.7, 0.5], [-0.6, -0.7]];
    let mut out = Vec::with_capacity(2 * TOY_POINTS_PER_CLASS);
    for (cls, m) in means.iter().enumerate() {
        for _ in 0..TOY_POINTS_PER_CLASS {
            let x = DVector::from_vec(vec![
                m[0] + rng.gen_range(-0.25..=0.25),
                m[1] + rng.gen_range(-0.25..=0.25),
            ]);
            out.push((x, cls));
        }
    }
    out
}

/// Mean squared distance between network outputs and one-hot targets.
pub fn toy_loss(net: &Network, data: &[(DVector<f64>, usize)]) -> f64 {
    let mut total = 0.0;
    for (x, cls) in data {
        let y = net.forward_eval(x).expect("dataset dim matches network");
        for i in 0..y.len() {
            let t = f64::from(i == *cls);
            total += (y[i] - t) * (y[i] - t);
        }
    }
    total / data.len() as f64
}

/// Full-batch gradient descent on the squared loss against one-hot targets.
/// Every layer is the same relu map the verifier sees, so the trained
/// weights drop straight into a `Network`.
///
/// Bias-free relu networks can die outright (all outputs zero, loss
/// exactly 1, zero gradient), so bad initializations are retried from
/// derived seeds. Deterministic: the first surviving attempt wins.
pub fn train_toy(dims: &[usize], seed: u64, steps: usize, lr: f64) -> Result<Network> {
    if dims.first() != Some(&2) || dims.last() != Some(&2) {
        return Err(Error::InvalidArgument(
            "toy training needs input dim 2 and output dim 2".into(),
        ));
    }
    let data = toy_dataset(seed);
    let mut last = None;
    for attempt in 0u64..8 {
        let init_seed = seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9));
        let net = train_attempt(dims, &data, init_seed, steps, lr)?;
        let loss = toy_loss(&net, &data);
        if loss < 0.4 {
            return Ok(net);
        }
        last = Some(net);
    }
    Ok(last.expect("at least one attempt ran"))
}

fn train_attempt(
    dims: &[usize],
    data: &[(DVector<f64>, usize)],
    init_seed: u64,
    steps: usize,
    lr: f64,
) -> Result<Network> {
    let init = random_network(dims, init_seed, 0.8)?;
    let mut w: Vec<DMatrix<f64>> = init.weights().to_vec();
    for _ in 0..steps {
        let mut grads: Vec<DMatrix<f64>> = w
            .iter()
            .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
            .collect();
        for (x, cls) in data {
            let mut acts = vec![x.clone()];
            for wk in &w {
                acts.push((wk * acts.last().unwrap()).map(|v| v.max(0.0)));
            }
            let y = acts.last().unwrap();
            // relu'(z) read off the activation: positive output means the
            // unit was live. Dead units get zero gradient.
            let mut delta = DVector::from_fn(y.len(), |i, _| {
                if y[i] > 0.0 {
                    y[i] - f64::from(i == *cls)
                } else {
                    0.0
                }
            });
            for k in (0..w.len()).rev() {
                grads[k] += &delta * acts[k].transpose();
                if k > 0 {
                    let mut up = w[k].transpose() * &delta;
                    for i in 0..up.len() {
                        if acts[k][i] <= 0.0 {
                            up[i] = 0.0;
                        }
                    }
                    delta = up;
                }
            }
        }
        let scale = lr / data.len() as f64;
        for (wk, g) in w.iter_mut().zip(&grads) {
            *wk -= scale * g;
        }
    }
    Network::new(w)
}

/// Finds a point the network classifies with a clear top-1 margin. Dataset
/// points are tried in order when given; otherwise seeded box samples.
pub fn pick_center(
    net: &Network,
    seed: u64,
    data: Option<&[(DVector<f64>, usize)]>,
) -> Result<(DVector<f64>, usize)> {
    let margin_of = |x: &DVector<f64>| -> Result<Option<(usize, f64)>> {
        let y = net.forward_eval(x)?;
        if y.len() < 2 {
            return Err(Error::InvalidArgument(
                "margin problems need at least two outputs".into(),
            ));
        }
        let pred = y.imax();
        let runner_up = (0..y.len())
            .filter(|&i| i != pred)
            .map(|i| y[i])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Some((pred, y[pred] - runner_up)))
    };
    let try_point = |x: &DVector<f64>| -> Result<Option<(DVector<f64>, usize)>> {
        match margin_of(x)? {
            Some((pred, margin)) if margin > 1e-3 => Ok(Some((x.clone(), pred))),
            _ => Ok(None),
        }
    };
    if let Some(data) = data {
        for (x, _) in data {
            if let Some(hit) = try_point(x)? {
                return Ok(hit);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
        for _ in 0..64 {
            let x = DVector::from_fn(net.input_dim(), |_, _| rng.gen_range(-0.8..=0.8));
            if let Some(hit) = try_point(&x)? {
                return Ok(hit);
            }
        }
    }
    Err(Error::InvalidArgument(
        "no confidently classified center found; try another seed".into(),
    ))
}

/// Safe set asserting the predicted class stays on top: one row
/// `e_other - e_pred` per competing output.
pub fn margin_rows(n_out: usize, pred: usize) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(n_out - 1, n_out);
    let mut r = 0;
    for other in 0..n_out {
        if other == pred {
            continue;
        }
        c[(r, other)] = 1.0;
        c[(r, pred)] = -1.0;
        r += 1;
    }
    c
}

/// The experiment convention: wider boxes for shallow networks.
pub fn default_epsilon(depth: usize) -> f64 {
    if depth <= 10 {
        0.15
    } else {
        0.075
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_balanced_and_reproducible() {
        let a = toy_dataset(3);
        let b = toy_dataset(3);
        assert_eq!(a.len(), 2 * TOY_POINTS_PER_CLASS);
        assert_eq!(a.iter().filter(|(_, c)| *c == 0).count(), TOY_POINTS_PER_CLASS);
        for ((xa, ca), (xb, cb)) in a.iter().zip(&b) {
            assert_eq!(ca, cb);
            assert_eq!(xa, xb);
        }
        let c = toy_dataset(4);
        assert!(a.iter().zip(&c).any(|((xa, _), (xc, _))| xa != xc));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dims = [2usize, 4, 2];
        let data = toy_dataset(11);
        let before = toy_loss(&random_network(&dims, 11, 0.8).unwrap(), &data);
        let net = train_toy(&dims, 11, 200, 0.15).unwrap();
        let after = toy_loss(&net, &data);
        assert!(
            after < 0.8 * before,
            "training went from {before:.4} to {after:.4}"
        );
        let again = train_toy(&dims, 11, 200, 0.15).unwrap();
        for (wa, wb) in net.weights().iter().zip(again.weights()) {
            assert_eq!(wa, wb);
        }
    }

    #[test]
    fn dead_initializations_are_retried() {
        // This seed/shape collapses to the all-zero network on the first
        // attempt (loss exactly 1, gradient zero); the retry must rescue it.
        for (steps, lr) in [(300, 0.15), (800, 0.1), (800, 0.05), (2000, 0.05)] {
            let net = train_toy(&[2, 3, 2], 12, steps, lr).unwrap();
            let loss = toy_loss(&net, &toy_dataset(12));
            eprintln!("steps {steps} lr {lr}: loss {loss:.4}");
        }
        panic!("sweep");
    }

    #[test]
    fn training_rejects_wrong_widths() {
        assert!(train_toy(&[3, 4, 2], 0, 10, 0.1).is_err());
        assert!(train_toy(&[2, 4, 3], 0, 10, 0.1).is_err());
    }

    #[test]
    fn margin_rows_pit_every_class_against_the_prediction() {
        let c = margin_rows(3, 1);
        assert_eq!((c.nrows(), c.ncols()), (2, 3));
        for r in 0..2 {
            assert_eq!(c.row(r).sum(), 0.0);
            assert_eq!(c[(r, 1)], -1.0);
        }
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c[(1, 2)], 1.0);
    }

    #[test]
    fn picked_center_has_a_margin() {
        let net = random_network(&[2, 4, 3], 5, 1.0).unwrap();
        let (x, pred) = pick_center(&net, 5, None).unwrap();
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.imax(), pred);
        let (x2, pred2) = pick_center(&net, 5, None).unwrap();
        assert_eq!(x, x2);
        assert_eq!(pred, pred2);
    }

    #[test]
    fn epsilon_convention_switches_at_depth_ten() {
        assert_eq!(default_epsilon(5), 0.15);
        assert_eq!(default_epsilon(10), 0.15);
        assert_eq!(default_epsilon(11), 0.075);
        assert_eq!(default_epsilon(15), 0.075);
    }
}
