//! Dense networks with hand-written reverse-mode gradients.
//!
//! Batches are column-major: a `d x B` matrix holds `B` samples of width `d`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// ReLU hidden layers followed by an affine output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output: OutputActivation,
}

/// Layer inputs and pre-activations recorded by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.output.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| DVector::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>();
        sq.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl Mlp {
    /// Uniform `+-1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: DVector::from_fn(fan_out, |_, _| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { layers, output })
    }

    pub fn zeros(dims: &[usize], output: OutputActivation) -> Result<Self> {
        Self::check_dims(dims)?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                weight: DMatrix::zeros(w[1], w[0]),
                bias: DVector::zeros(w[1]),
            })
            .collect();
        Ok(Self { layers, output })
    }

    fn check_dims(dims: &[usize]) -> Result<()> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::shape(format!("invalid layer dims {dims:?}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weight.ncols()];
        d.extend(self.layers.iter().map(|l| l.weight.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite()))
    }

    /// Flat view of parameter `idx` (weights of each layer column-major, then its bias).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weight.len() {
                return &mut l.weight.as_mut_slice()[idx];
            }
            idx -= l.weight.len();
            if idx < l.bias.len() {
                return &mut l.bias.as_mut_slice()[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        let (y, cache) = self.forward_batch(&x)?;
        Ok((y.as_slice().to_vec(), cache))
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            let next = if i == last {
                match self.output {
                    OutputActivation::Identity => z.clone(),
                    OutputActivation::Tanh => z.map(f64::tanh),
                }
            } else {
                z.map(relu)
            };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((
            a.clone(),
            ForwardCache {
                inputs,
                pre,
                output: a,
            },
        ))
    }

    /// Forward pass without recording a cache.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            a = if i == last {
                match self.output {
                    OutputActivation::Identity => z,
                    OutputActivation::Tanh => z.map(f64::tanh),
                }
            } else {
                z.map(relu)
            };
        }
        Ok(a)
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = DMatrix::from_column_slice(input.len(), 1, input);
        Ok(self.predict_batch(&x)?.as_slice().to_vec())
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        let g = DMatrix::from_column_slice(upstream.len(), 1, upstream);
        let (grads, dx) = self.backward_batch(cache, &g)?;
        Ok((grads, dx.as_slice().to_vec()))
    }

    /// Gradients of `sum_b <output_b, upstream_b>` with respect to every
    /// parameter and every input column.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>)> {
        if cache.pre.len() != self.layers.len()
            || cache
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.nrows() != l.weight.nrows())
            || cache.inputs[0].nrows() != self.input_dim()
        {
            return Err(Error::shape(
                "forward cache does not belong to this network",
            ));
        }
        if upstream.nrows() != self.output_dim() || upstream.ncols() != cache.batch_size() {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_dim(),
                cache.batch_size()
            )));
        }
        let n = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut biases = vec![DVector::zeros(0); n];
        let mut dz = match self.output {
            OutputActivation::Identity => upstream.clone(),
            OutputActivation::Tanh => upstream.zip_map(&cache.output, |g, y| g * (1.0 - y * y)),
        };
        for i in (0..n).rev() {
            weights[i] = &dz * cache.inputs[i].transpose();
            biases[i] = dz.column_sum();
            let da = self.layers[i].weight.transpose() * &dz;
            if i == 0 {
                return Ok((MlpGrads { weights, biases }, da));
            }
            dz = da.zip_map(&cache.pre[i - 1], |g, z| if z > 0.0 { g } else { 0.0 });
        }
        unreachable!("network has at least one layer")
    }

    /// `theta <- theta - lr * grads`
    pub fn apply_step(&mut self, grads: &MlpGrads, lr: f64) {
        for ((l, gw), gb) in self
            .layers
            .iter_mut()
            .zip(&grads.weights)
            .zip(&grads.biases)
        {
            l.weight -= gw * lr;
            l.bias -= gb * lr;
        }
    }

    fn same_shape(&self, other: &Mlp) -> bool {
        self.output == other.output && self.dims() == other.dims()
    }

    /// Largest absolute parameter difference.
    pub fn max_abs_diff(&self, other: &Mlp) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                let w = (&a.weight - &b.weight).amax();
                let bb = (&a.bias - &b.bias).amax();
                w.max(bb)
            })
            .fold(0.0, f64::max)
    }
}

/// Polyak averaging `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0, 1], got {tau}")));
    }
    if !target.same_shape(online) {
        return Err(Error::shape("target and online networks differ in shape"));
    }
    if tau == 1.0 {
        target.clone_from(online);
        return Ok(());
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        t.weight
            .zip_apply(&o.weight, |x, y| *x = tau * y + (1.0 - tau) * *x);
        t.bias
            .zip_apply(&o.bias, |x, y| *x = tau * y + (1.0 - tau) * *x);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], OutputActivation::Identity).unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mut net = Mlp::zeros(&[3, 3], OutputActivation::Identity).unwrap();
        net.layers[0].weight = DMatrix::identity(3, 3);
        let (y, _) = net.forward(&[1.5, -2.0, 0.25]).unwrap();
        assert_eq!(y, vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn tanh_codomain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[4, 8, 3], OutputActivation::Tanh, &mut rng).unwrap();
        net.layers[1].weight *= 3.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (y, _) = net.forward(&x).unwrap();
            assert!(y.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let net = Mlp::zeros(&[3, 2], OutputActivation::Identity).unwrap();
        assert!(net.forward(&[1.0, 2.0]).is_err());
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
        let other = Mlp::zeros(&[3, 4, 2], OutputActivation::Identity).unwrap();
        assert!(other.backward(&cache, &[1.0, 1.0]).is_err());
        assert!(Mlp::zeros(&[3], OutputActivation::Identity).is_err());
        assert!(Mlp::zeros(&[3, 0, 1], OutputActivation::Identity).is_err());
    }

    #[test]
    fn scalar_chain_rule() {
        let mut net = Mlp::zeros(&[1, 1], OutputActivation::Identity).unwrap();
        net.layers[0].weight[(0, 0)] = 1.7;
        let (_, cache) = net.forward(&[0.6]).unwrap();
        let (g, dx) = net.backward(&cache, &[1.0]).unwrap();
        assert!((g.weights[0][(0, 0)] - 0.6).abs() < 1e-15);
        assert!((g.biases[0][0] - 1.0).abs() < 1e-15);
        assert!((dx[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn relu_blocks_negative_units() {
        let mut net = Mlp::zeros(&[1, 1, 1], OutputActivation::Identity).unwrap();
        net.layers[0].weight[(0, 0)] = 1.0;
        net.layers[0].bias[0] = -5.0;
        net.layers[1].weight[(0, 0)] = 2.0;
        let (_, cache) = net.forward(&[1.0]).unwrap();
        let (g, dx) = net.backward(&cache, &[1.0]).unwrap();
        assert_eq!(g.weights[0][(0, 0)], 0.0);
        assert_eq!(g.biases[0][0], 0.0);
        assert_eq!(dx[0], 0.0);
    }

    #[test]
    fn soft_update_examples() {
        let online = {
            let mut n = Mlp::zeros(&[2, 2], OutputActivation::Identity).unwrap();
            n.layers[0].weight.fill(2.0);
            n.layers[0].bias.fill(2.0);
            n
        };
        let mut target = Mlp::zeros(&[2, 2], OutputActivation::Identity).unwrap();
        soft_update(&mut target, &online, 0.5).unwrap();
        assert!(target.layers[0].weight.iter().all(|&x| x == 1.0));
        soft_update(&mut target, &online, 1.0).unwrap();
        assert_eq!(target, online);
        assert!(soft_update(&mut target, &online, 0.0).is_err());
        let mut wrong = Mlp::zeros(&[2, 3], OutputActivation::Identity).unwrap();
        assert!(soft_update(&mut wrong, &online, 0.1).is_err());
    }

    #[test]
    fn batch_matches_single_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 6, 2], OutputActivation::Tanh, &mut rng).unwrap();
        let x = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let up = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_batch(&x).unwrap();
        let (g, dx) = net.backward_batch(&cache, &up).unwrap();
        let mut acc = MlpGrads::zeros_like(&net);
        for b in 0..4 {
            let (_, c1) = net.forward(x.column(b).as_slice()).unwrap();
            let (g1, dx1) = net.backward(&c1, up.column(b).as_slice()).unwrap();
            for i in 0..2 {
                acc.weights[i] += &g1.weights[i];
                acc.biases[i] += &g1.biases[i];
            }
            for (j, v) in dx1.iter().enumerate() {
                assert!((dx[(j, b)] - v).abs() < 1e-14);
            }
        }
        for i in 0..2 {
            assert!((&acc.weights[i] - &g.weights[i]).amax() < 1e-13);
            assert!((&acc.biases[i] - &g.biases[i]).amax() < 1e-13);
        }
        assert_eq!(
            net.predict_batch(&x).unwrap(),
            net.forward_batch(&x).unwrap().0
        );
    }

    #[test]
    fn clip_norm_bounds_gradient() {
        let net = Mlp::zeros(&[2, 2], OutputActivation::Identity).unwrap();
        let mut g = MlpGrads::zeros_like(&net);
        g.weights[0].fill(3.0);
        g.clip_norm(1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}
