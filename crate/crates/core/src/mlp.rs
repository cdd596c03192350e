//! Small fully connected regression network: ReLU hidden layers with
//! inverted dropout, linear output, mean-squared-error loss, Adam updates.
//!
//! Batches are matrices with one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    /// Drop probability for hidden activations during training.
    pub dropout: f64,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

/// Activations retained for back-propagation.
pub struct ForwardCache {
    /// Input followed by each hidden layer's (masked) output.
    activations: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
    /// Dropout multipliers per hidden layer (`None` when dropout is off).
    masks: Vec<Option<DMatrix<f64>>>,
    output: DMatrix<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

fn add_bias(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in z.column_iter_mut() {
        col += b;
    }
}

impl Mlp {
    /// He-initialised weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], dropout: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("finite std");
                Dense { weight: DMatrix::from_fn(w[1], w[0], |_, _| normal.sample(rng)), bias: DVector::zeros(w[1]) }
            })
            .collect();
        Self { layers, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.nrows()));
        s
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Inference pass; dropout is never applied.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            add_bias(&mut z, &l.bias);
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&DMatrix::from_column_slice(x.len(), 1, x)).as_slice().to_vec()
    }

    /// Training pass. With `rng` present and a non-zero dropout rate, hidden
    /// units are dropped and survivors scaled by `1 / (1 − p)`.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &DMatrix<f64>, mut rng: Option<&mut R>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout;
        let mut activations = vec![x.clone()];
        let mut pre = Vec::with_capacity(last);
        let mut masks = Vec::with_capacity(last);
        let mut output = DMatrix::zeros(0, 0);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &activations[i];
            add_bias(&mut z, &l.bias);
            if i == last {
                output = z;
                break;
            }
            let mut a = z.map(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(r) if self.dropout > 0.0 => {
                    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    a.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            activations.push(a);
        }
        ForwardCache { activations, pre, masks, output }
    }

    /// Mean squared error over all outputs of the batch and its gradient.
    pub fn backward(&self, cache: &ForwardCache, target: &DMatrix<f64>) -> (f64, Gradients) {
        let diff = &cache.output - target;
        let scale = 1.0 / diff.len() as f64;
        let loss = diff.norm_squared() * scale;
        let mut delta = diff * (2.0 * scale);
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let a_prev = &cache.activations[i];
            let weight = &delta * a_prev.transpose();
            let bias = delta.column_sum();
            grads.push(Dense { weight, bias });
            if i > 0 {
                let mut back = self.layers[i].weight.transpose() * &delta;
                let z = &cache.pre[i - 1];
                back.zip_apply(z, |b, zv| {
                    if zv <= 0.0 {
                        *b = 0.0;
                    }
                });
                if let Some(m) = &cache.masks[i - 1] {
                    back.component_mul_assign(m);
                }
                delta = back;
            }
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    pub fn loss(&self, x: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
        let diff = self.forward(x) - target;
        diff.norm_squared() / diff.len() as f64
    }

    /// All parameters flattened layer by layer (weights column-major, then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parameter_count());
        let mut i = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&values[i..i + n]);
            i += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&values[i..i + n]);
            i += n;
        }
    }
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

pub struct Adam {
    params: AdamParams,
    m: Vec<Dense>,
    v: Vec<Dense>,
    t: i32,
}

impl Adam {
    pub fn new(net: &Mlp, params: AdamParams) -> Self {
        let zeros: Vec<Dense> = net
            .layers
            .iter()
            .map(|l| Dense { weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()), bias: DVector::zeros(l.bias.len()) })
            .collect();
        Self { params, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let AdamParams { learning_rate, beta1, beta2, epsilon } = self.params;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
            }
        };
        for (((layer, m), v), g) in net.layers.iter_mut().zip(&mut self.m).zip(&mut self.v).zip(&grads.layers) {
            update(layer.weight.as_mut_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice(), g.weight.as_slice());
            update(layer.bias.as_mut_slice(), m.bias.as_mut_slice(), v.bias.as_mut_slice(), g.bias.as_slice());
        }
    }
}

/// Largest relative discrepancy between the analytic gradient and a central
/// finite difference, over a whole network; used by tests and benches.
pub fn gradient_check(net: &Mlp, x: &DMatrix<f64>, target: &DMatrix<f64>, eps: f64) -> f64 {
    let cache = net.forward_train::<rand_chacha::ChaCha8Rng>(x, None);
    let analytic = net.backward(&cache, target).1.flat();
    let base = net.flat_parameters();
    let mut probe = net.clone();
    let mut numeric = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + eps;
        probe.set_flat_parameters(&p);
        let up = probe.loss(x, target);
        p[i] = base[i] - eps;
        probe.set_flat_parameters(&p);
        let down = probe.loss(x, target);
        numeric[i] = (up - down) / (2.0 * eps);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Mlp::new(&[5, 4, 4, 3], 0.0, &mut rng);
            // random biases too: zero biases put dead-input samples exactly on the ReLU kink
            let p: Vec<f64> = (0..net.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            net.set_flat_parameters(&p);
            let x = random_batch(&mut rng, 5, 3);
            let t = random_batch(&mut rng, 3, 3);
            let err = gradient_check(&net, &x, &t, 1e-6);
            assert!(err < 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn inference_ignores_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[4, 8, 8, 3], 0.5, &mut rng);
        let x = [0.1, -0.2, 0.3, 0.4];
        assert_eq!(net.predict(&x), net.predict(&x));
        let zero = net.predict(&[0.0; 4]);
        assert!(zero.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dropout_masks_are_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[2, 1000, 1], 0.1, &mut rng);
        let x = DMatrix::from_element(2, 1, 1.0);
        let cache = net.forward_train(&x, Some(&mut rng));
        let m = cache.masks[0].as_ref().unwrap();
        let kept = m.iter().filter(|v| **v > 0.0).count();
        assert!((850..=950).contains(&kept), "{kept}");
        assert!(m.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-15));
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[2, 16, 1], 0.0, &mut rng);
        let x = random_batch(&mut rng, 2, 64);
        let t = DMatrix::from_fn(1, 64, |_, j| 0.5 * x[(0, j)] - 0.25 * x[(1, j)]);
        let start = net.loss(&x, &t);
        let mut opt = Adam::new(&net, AdamParams { learning_rate: 1e-2, ..Default::default() });
        for _ in 0..500 {
            let cache = net.forward_train::<ChaCha8Rng>(&x, None);
            let (_, g) = net.backward(&cache, &t);
            opt.step(&mut net, &g);
        }
        assert!(net.loss(&x, &t) < start * 1e-2);
        assert!(net.is_finite());
    }

    #[test]
    fn flat_parameter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[3, 5, 2], 0.0, &mut rng);
        let p = net.flat_parameters();
        assert_eq!(p.len(), 3 * 5 + 5 + 5 * 2 + 2);
        let doubled: Vec<f64> = p.iter().map(|v| v * 2.0).collect();
        net.set_flat_parameters(&doubled);
        assert_eq!(net.flat_parameters(), doubled);
    }
}
