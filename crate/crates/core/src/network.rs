//! ReLU multilayer perceptrons and the verification instance (input box,
//! safe set), plus their on-disk formats.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A K-layer bias-free ReLU network `x^[k] = relu(W^[k-1] x^[k-1])`.
///
/// Biases are supported only through [`fold_bias`], which augments the
/// input with a constant unit and threads it through every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DMatrix<f64>>,
    dims: Vec<usize>,
}

impl Network {
    /// Builds a network from weight matrices, validating the shape chain.
    pub fn new(layers: Vec<DMatrix<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        let mut dims = Vec::with_capacity(layers.len() + 1);
        dims.push(layers[0].ncols());
        for (k, w) in layers.iter().enumerate() {
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::ShapeMismatch {
                    layer: k,
                    detail: "degenerate (zero-sized) layer".into(),
                });
            }
            if w.ncols() != dims[k] {
                return Err(Error::ShapeMismatch {
                    layer: k,
                    detail: format!(
                        "W^[{k}] has {} columns but layer {k} has width {}",
                        w.ncols(),
                        dims[k]
                    ),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("weights of layer {k}")));
            }
            dims.push(w.nrows());
        }
        Ok(Self { layers, dims })
    }

    /// Number of weight layers K.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer widths `(n_0, ..., n_K)`.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Weight matrix `W^[k]` mapping layer k to layer k+1.
    pub fn weight(&self, k: usize) -> &DMatrix<f64> {
        &self.layers[k]
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// Evaluates `f(x)` by the exact layer-wise ReLU recursion.
    pub fn forward_eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut act = x.clone();
        for w in &self.layers {
            act = (w * act).map(|v| v.max(0.0));
        }
        Ok(act)
    }

    /// All layer activations `(x^[0], ..., x^[K])` for an input.
    pub fn trajectory(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut traj = Vec::with_capacity(self.depth() + 1);
        traj.push(x.clone());
        for w in &self.layers {
            let next = (w * traj.last().unwrap()).map(|v| v.max(0.0));
            traj.push(next);
        }
        Ok(traj)
    }
}

/// Folds per-layer biases into an augmented bias-free network.
///
/// The returned network takes inputs `(x, 1)`; a constant unit is carried
/// through every layer as an extra channel whose incoming row is all zeros
/// except a 1 on the previous constant unit, so it stays at exactly 1
/// through ReLU.
pub fn fold_bias(weights: &[(DMatrix<f64>, DVector<f64>)]) -> Result<Network> {
    if weights.is_empty() {
        return Err(Error::InvalidArgument("network has no layers".into()));
    }
    let last = weights.len() - 1;
    let mut layers = Vec::with_capacity(weights.len());
    for (k, (w, b)) in weights.iter().enumerate() {
        if b.len() != w.nrows() {
            return Err(Error::ShapeMismatch {
                layer: k,
                detail: format!("bias length {} but {} rows", b.len(), w.nrows()),
            });
        }
        // [W b; 0 1] except the last layer, which drops the constant row.
        let extra_row = usize::from(k != last);
        let mut aug = DMatrix::zeros(w.nrows() + extra_row, w.ncols() + 1);
        aug.view_mut((0, 0), (w.nrows(), w.ncols())).copy_from(w);
        aug.view_mut((0, w.ncols()), (w.nrows(), 1)).copy_from(b);
        if extra_row == 1 {
            aug[(w.nrows(), w.ncols())] = 1.0;
        }
        layers.push(aug);
    }
    Network::new(layers)
}

/// Deterministic random network with i.i.d. uniform `[-scale, scale]` weights.
pub fn random_network(dims: &[usize], seed: u64, scale: f64) -> Result<Network> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least input and output dims".into(),
        ));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .windows(2)
        .map(|p| DMatrix::from_fn(p[1], p[0], |_, _| rng.gen_range(-scale..=scale)))
        .collect();
    Network::new(layers)
}

/// The l-infinity input uncertainty set `{x : |x - center|_inf <= epsilon}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBox {
    pub center: DVector<f64>,
    pub epsilon: f64,
}

impl InputBox {
    pub fn new(center: DVector<f64>, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input box center".into()));
        }
        Ok(Self { center, epsilon })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lower(&self) -> DVector<f64> {
        self.center.map(|v| v - self.epsilon)
    }

    pub fn upper(&self) -> DVector<f64> {
        self.center.map(|v| v + self.epsilon)
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.center.iter())
                .all(|(xi, ci)| (xi - ci).abs() <= self.epsilon + tol)
    }

    /// Deterministic sample inside the box (index-seeded, thread-order free).
    pub fn sample(&self, seed: u64, index: u64) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        DVector::from_fn(self.dim(), |i, _| {
            let c = self.center[i];
            if self.epsilon == 0.0 {
                c
            } else {
                rng.gen_range(c - self.epsilon..=c + self.epsilon)
            }
        })
    }
}

/// Polyhedral safe set `{z : C z <= 0}`; rows of C are certification objectives.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeSet {
    pub c: DMatrix<f64>,
}

impl SafeSet {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.nrows() == 0 {
            return Err(Error::InvalidArgument("safe set has no rows".into()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("safe set matrix".into()));
        }
        Ok(Self { c })
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn row(&self, r: usize) -> DVector<f64> {
        self.c.row(r).transpose()
    }
}

// ---------------------------------------------------------------------------
// File formats. Parsing is strict: unknown fields are rejected.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatrixFile {
    rows: usize,
    cols: usize,
    /// Row-major entries, length rows*cols.
    weights: Vec<f64>,
}

impl MatrixFile {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut weights = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                weights.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            weights,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.weights.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "matrix declares {}x{} but carries {} weights",
                self.rows,
                self.cols,
                self.weights.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.weights))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    dims: Vec<usize>,
    layers: Vec<MatrixFile>,
}

/// Loads a network file, validating the declared dims against the layers.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let layers = file
        .layers
        .iter()
        .map(MatrixFile::to_matrix)
        .collect::<Result<Vec<_>>>()?;
    let net = Network::new(layers)?;
    if net.dims() != file.dims.as_slice() {
        return Err(Error::Parse(format!(
            "declared dims {:?} do not match layer shapes {:?}",
            file.dims,
            net.dims()
        )));
    }
    Ok(net)
}

pub fn save_network(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let file = NetworkFile {
        dims: net.dims().to_vec(),
        layers: net.weights().iter().map(MatrixFile::from_matrix).collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    center: Vec<f64>,
    epsilon: f64,
    safe_c: MatrixFile,
}

/// Loads a verification problem (input box + safe set).
pub fn load_problem(path: impl AsRef<Path>) -> Result<(InputBox, SafeSet)> {
    let text = std::fs::read_to_string(path)?;
    let file: ProblemFile = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    let bx = InputBox::new(DVector::from_vec(file.center), file.epsilon)?;
    let safe = SafeSet::new(file.safe_c.to_matrix()?)?;
    Ok((bx, safe))
}

pub fn save_problem(bx: &InputBox, safe: &SafeSet, path: impl AsRef<Path>) -> Result<()> {
    let file = ProblemFile {
        center: bx.center.iter().copied().collect(),
        epsilon: bx.epsilon,
        safe_c: MatrixFile::from_matrix(&safe.c),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Independent forward pass coded as plain index loops.
    fn naive_forward(net: &Network, x: &DVector<f64>) -> DVector<f64> {
        let mut act: Vec<f64> = x.iter().copied().collect();
        for w in net.weights() {
            let mut next = vec![0.0; w.nrows()];
            for (i, ni) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for (j, aj) in act.iter().enumerate() {
                    s += w[(i, j)] * aj;
                }
                *ni = if s > 0.0 { s } else { 0.0 };
            }
            act = next;
        }
        DVector::from_vec(act)
    }

    #[test]
    fn single_layer_shape_and_eval() {
        let net = Network::new(vec![DMatrix::from_row_slice(1, 2, &[1.0, -1.0])]).unwrap();
        assert_eq!(net.dims(), &[2, 1]);
        let y = net.forward_eval(&DVector::from_vec(vec![2.0, 1.0])).unwrap();
        assert_eq!(y[0], 1.0);
    }

    #[test]
    fn shape_chain_break_names_layer() {
        let layers = vec![
            DMatrix::zeros(3, 2),
            DMatrix::zeros(2, 3),
            DMatrix::zeros(5, 4),
        ];
        match Network::new(layers) {
            Err(Error::ShapeMismatch { layer, .. }) => assert_eq!(layer, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_preactivations_give_zero() {
        let net = Network::new(vec![DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0])]).unwrap();
        let y = net.forward_eval(&DVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let net = random_network(&[3, 5, 4, 2], 11, 0.9).unwrap();
        for t in 0..100u64 {
            let x = DVector::from_fn(3, |i, _| ((t as f64) * 0.37 + i as f64 * 1.7).sin() * 2.0);
            let fast = net.forward_eval(&x).unwrap();
            let slow = naive_forward(&net, &x);
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn outputs_nonnegative() {
        let net = random_network(&[4, 6, 3], 5, 1.3).unwrap();
        for t in 0..50u64 {
            let bx = InputBox::new(DVector::zeros(4), 3.0).unwrap();
            let y = net.forward_eval(&bx.sample(9, t)).unwrap();
            assert!(y.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn fold_bias_scalar_example() {
        let folded = fold_bias(&[(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![0.5]),
        )])
        .unwrap();
        let y = folded
            .forward_eval(&DVector::from_vec(vec![1.0, 1.0]))
            .unwrap();
        assert_relative_eq!(y[0], 1.5);
    }

    #[test]
    fn fold_bias_zero_bias_identity() {
        let w = DMatrix::from_row_slice(2, 2, &[0.3, -0.7, 1.1, 0.2]);
        let net = Network::new(vec![w.clone()]).unwrap();
        let folded = fold_bias(&[(w, DVector::zeros(2))]).unwrap();
        for t in 0..20u64 {
            let x = DVector::from_fn(2, |i, _| (t as f64 * 0.31 + i as f64).cos());
            let mut xa = x.iter().copied().collect::<Vec<_>>();
            xa.push(1.0);
            let plain = net.forward_eval(&x).unwrap();
            let aug = folded.forward_eval(&DVector::from_vec(xa)).unwrap();
            assert_eq!(plain, aug);
        }
    }

    #[test]
    fn fold_bias_matches_biased_eval() {
        let mut rng_state = 0x1234u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 20) as f64 / (1u64 << 44) as f64) - 0.5
        };
        let w0 = DMatrix::from_fn(4, 3, |_, _| next());
        let b0 = DVector::from_fn(4, |_, _| next());
        let w1 = DMatrix::from_fn(2, 4, |_, _| next());
        let b1 = DVector::from_fn(2, |_, _| next());
        let folded = fold_bias(&[(w0.clone(), b0.clone()), (w1.clone(), b1.clone())]).unwrap();
        for t in 0..50 {
            let x = DVector::from_fn(3, |i, _| ((t * 7 + i) as f64 * 0.61).sin());
            // direct biased evaluation
            let h = (&w0 * &x + &b0).map(|v: f64| v.max(0.0));
            let z = (&w1 * h + &b1).map(|v: f64| v.max(0.0));
            let mut xa = x.iter().copied().collect::<Vec<_>>();
            xa.push(1.0);
            let za = folded.forward_eval(&DVector::from_vec(xa)).unwrap();
            assert_relative_eq!(z, za, epsilon = 1e-12);
        }
    }

    #[test]
    fn random_network_deterministic_and_shaped() {
        let a = random_network(&[2, 4, 1], 7, 0.5).unwrap();
        let b = random_network(&[2, 4, 1], 7, 0.5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), &[2, 4, 1]);
        assert!(random_network(&[2, 2], 0, 0.0).is_err());
        assert!(random_network(&[3], 0, 1.0).is_err());
    }

    #[test]
    fn piecewise_linearity_within_activation_pattern() {
        let net = random_network(&[2, 4, 2], 3, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.4, -0.2]);
        // x' close enough to x to share the activation pattern almost surely
        let xp = DVector::from_vec(vec![0.4001, -0.2001]);
        let lam = 0.3;
        let mid = &x * lam + &xp * (1.0 - lam);
        let f_mid = net.forward_eval(&mid).unwrap();
        let blend =
            net.forward_eval(&x).unwrap() * lam + net.forward_eval(&xp).unwrap() * (1.0 - lam);
        assert_relative_eq!(f_mid, blend, epsilon = 1e-9);
    }

    #[test]
    fn network_file_round_trip() {
        let net = random_network(&[3, 4, 2], 99, 1.7).unwrap();
        let dir = std::env::temp_dir().join("certicut-test-net");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        save_network(&net, &path).unwrap();
        let loaded = load_network(&path).unwrap();
        assert_eq!(net, loaded); // bitwise-equal weights
    }

    #[test]
    fn strict_parsing_rejects_unknown_fields() {
        let dir = std::env::temp_dir().join("certicut-test-strict");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(
            &path,
            r#"{"dims":[1,1],"layers":[{"rows":1,"cols":1,"weights":[1.0]}],"extra":1}"#,
        )
        .unwrap();
        assert!(matches!(load_network(&path), Err(Error::Parse(_))));
    }

    #[test]
    fn problem_file_round_trip() {
        let bx = InputBox::new(DVector::from_vec(vec![0.1, -0.2]), 0.15).unwrap();
        let safe = SafeSet::new(DMatrix::from_row_slice(1, 2, &[1.0, -1.0])).unwrap();
        let dir = std::env::temp_dir().join("certicut-test-prob");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("prob.json");
        save_problem(&bx, &safe, &path).unwrap();
        let (bx2, safe2) = load_problem(&path).unwrap();
        assert_eq!(bx, bx2);
        assert_eq!(safe, safe2);
    }
}
