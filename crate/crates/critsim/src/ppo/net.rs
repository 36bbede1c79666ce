//! Small dense networks with hand-written backpropagation.
//!
//! Everything is `f64` and allocation-light: a forward pass caches
//! post-activation values per layer, and the backward pass accumulates
//! gradients into an [`Mlp`] of identical shape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One dense layer, row-major `rows x cols` weights plus a bias per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Layer {
        Layer { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }
}

/// Multilayer perceptron: tanh hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Orthogonal weight matrix via Gram-Schmidt on Gaussian draws: rows are
/// orthonormal when `rows <= cols`, columns otherwise.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (n_vecs, dim, by_rows) =
        if rows <= cols { (rows, cols, true) } else { (cols, rows, false) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vecs);
    while vecs.len() < n_vecs {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // numerically degenerate draw, retry
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        vecs.push(v);
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain * if by_rows { vecs[r][c] } else { vecs[c][r] };
        }
    }
    w
}

impl Mlp {
    /// Builds layers `sizes[0] -> sizes[1] -> ...` with orthogonal weights
    /// (`gains[i]` per layer) and zero biases.
    pub fn new(sizes: &[usize], gains: &[f64], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(sizes.len() >= 2);
        assert_eq!(gains.len(), sizes.len() - 1);
        let layers = sizes
            .windows(2)
            .zip(gains)
            .map(|(pair, &gain)| Layer {
                rows: pair[1],
                cols: pair[0],
                w: orthogonal(rng, pair[1], pair[0], gain),
                b: vec![0.0; pair[1]],
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp { layers: self.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    /// Forward pass returning post-activation values for every layer;
    /// `cache[0]` is the input, `cache.last()` the linear output.
    pub fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cache = Vec::with_capacity(self.layers.len() + 1);
        cache.push(x.to_vec());
        for (li, layer) in self.layers.iter().enumerate() {
            let input = cache.last().unwrap();
            let last = li + 1 == self.layers.len();
            let mut out = Vec::with_capacity(layer.rows);
            for r in 0..layer.rows {
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                let mut z = layer.b[r];
                for (wi, xi) in row.iter().zip(input) {
                    z += wi * xi;
                }
                out.push(if last { z } else { z.tanh() });
            }
            cache.push(out);
        }
        cache
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the linear
    /// output) through the cached activations, accumulating into `grads`.
    pub fn backward(&self, cache: &[Vec<f64>], d_out: &[f64], grads: &mut Mlp) {
        debug_assert_eq!(d_out.len(), self.output_dim());
        let mut delta = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &cache[li];
            let g = &mut grads.layers[li];
            for r in 0..layer.rows {
                let d = delta[r];
                g.b[r] += d;
                let grow = &mut g.w[r * layer.cols..(r + 1) * layer.cols];
                for (gi, xi) in grow.iter_mut().zip(input) {
                    *gi += d * xi;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let d = delta[r];
                    let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                    for (pi, wi) in prev.iter_mut().zip(row) {
                        *pi += d * wi;
                    }
                }
                // tanh'(z) = 1 - a^2 from the cached activation.
                let act = &cache[li];
                for (pi, ai) in prev.iter_mut().zip(act) {
                    *pi *= 1.0 - ai * ai;
                }
                delta = prev;
            }
        }
    }

    pub fn for_each_param(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            l.w.iter().chain(l.b.iter()).for_each(|&p| f(p));
        }
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|p| ok &= p.is_finite());
        ok
    }

    pub fn squared_norm(&self) -> f64 {
        let mut s = 0.0;
        self.for_each_param(|p| s += p * p);
        s
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p *= factor);
        }
    }
}

/// Adam moment estimates for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Mlp,
    v: Mlp,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(shape: &Mlp) -> AdamState {
        AdamState { m: shape.zeros_like(), v: shape.zeros_like(), t: 0 }
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let g = &grads.layers[li];
            let m = &mut self.m.layers[li];
            let v = &mut self.v.layers[li];
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            };
            for i in 0..layer.w.len() {
                update(&mut layer.w[i], g.w[i], &mut m.w[i], &mut v.w[i]);
            }
            for i in 0..layer.b.len() {
                update(&mut layer.b[i], g.b[i], &mut m.b[i], &mut v.b[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = orthogonal(&mut rng, 4, 8, 1.0);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..8).map(|c| w[i * 8 + c] * w[j * 8 + c]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-9, "rows {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::new(&[3, 6, 2], &[1.0, 1.0], &mut rng);
        let x = [0.3, -0.7, 1.1];
        // Loss = sum of outputs; d_out = ones.
        let cache = mlp.forward_cached(&x);
        let mut grads = mlp.zeros_like();
        mlp.backward(&cache, &[1.0, 1.0], &mut grads);

        let h = 1e-6;
        let mut probe = mlp.clone();
        for li in 0..probe.layers.len() {
            for i in 0..probe.layers[li].w.len() {
                let orig = probe.layers[li].w[i];
                probe.layers[li].w[i] = orig + h;
                let up: f64 = probe.forward(&x).iter().sum();
                probe.layers[li].w[i] = orig - h;
                let down: f64 = probe.forward(&x).iter().sum();
                probe.layers[li].w[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.layers[li].w[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "layer {li} w[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[2, 2], &[1.0], &mut rng);
        let before = mlp.layers[0].w[0];
        let mut grads = mlp.zeros_like();
        grads.layers[0].w[0] = 1.0;
        let mut adam = AdamState::new(&mlp);
        adam.step(&mut mlp, &grads, 0.01);
        assert!(mlp.layers[0].w[0] < before);
    }
}
