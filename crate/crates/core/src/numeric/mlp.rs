//! Linear layers and small GELU MLPs with hand-derived backward passes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use super::NumericError;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `y = x · W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Tensor2, bias: Vec<f64>) -> Result<Self, NumericError> {
        if bias.len() != weight.cols() {
            return Err(NumericError::ShapeMismatch("bias does not match weight columns".into()));
        }
        Ok(Self { weight, bias })
    }

    /// Uniform(-s, s) init with `s = gain / sqrt(in)`; zero bias.
    pub fn random(rng: &mut impl Rng, input: usize, output: usize, gain: f64) -> Self {
        let s = gain / (input as f64).sqrt();
        Self {
            weight: Tensor2::from_fn(input, output, |_, _| rng.gen_range(-s..s)),
            bias: vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor2::zeros(input, output), bias: vec![0.0; output] }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }
    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, NumericError> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>, NumericError> {
        let t = Tensor2::new(1, x.len(), x.to_vec())?;
        Ok(self.forward(&t)?.into_data())
    }

    pub fn num_params(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.weight.data());
        out.extend_from_slice(&self.bias);
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let nw = self.weight.data().len();
        self.weight.data_mut().copy_from_slice(&src[..nw]);
        let nb = self.bias.len();
        self.bias.copy_from_slice(&src[nw..nw + nb]);
        nw + nb
    }
}

/// Gradients of one linear layer, same layout as the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Feed-forward stack; GELU after every layer except the last, and after the
/// last too when `final_activation` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_activation: bool,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    pre_activations: Vec<Tensor2>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>, final_activation: bool) -> Result<Self, NumericError> {
        if layers.is_empty() {
            return Err(NumericError::ShapeMismatch("MLP needs at least one layer".into()));
        }
        if layers.windows(2).any(|w| w[0].out_dim() != w[1].in_dim()) {
            return Err(NumericError::ShapeMismatch("consecutive MLP layer shapes differ".into()));
        }
        Ok(Self { layers, final_activation })
    }

    pub fn random(rng: &mut impl Rng, dims: &[usize], final_activation: bool, gain: f64) -> Self {
        let layers = dims.windows(2).map(|w| Linear::random(rng, w[0], w[1], gain)).collect();
        Self { layers, final_activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }
    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    fn activates(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.final_activation
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, NumericError> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache), NumericError> {
        if x.cols() != self.in_dim() {
            return Err(NumericError::ShapeMismatch(format!(
                "MLP expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut cache = MlpCache { inputs: Vec::new(), pre_activations: Vec::new() };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            cache.inputs.push(h);
            h = if self.activates(i) { z.map(gelu) } else { z.clone() };
            cache.pre_activations.push(z);
        }
        Ok((h, cache))
    }

    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Tensor2) -> Result<(Vec<LinearGrad>, Tensor2), NumericError> {
        let mut g = grad_out.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[i];
            if self.activates(i) {
                for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                    *gv *= gelu_grad(*zv);
                }
            }
            let gw = cache.inputs[i].t_matmul(&g)?;
            let gb = g.sum_rows();
            let gx = g.matmul_t(&layer.weight)?;
            grads.push(LinearGrad { weight: gw, bias: gb });
            g = gx;
        }
        grads.reverse();
        Ok((grads, g))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            l.write_flat(&mut out);
        }
        out
    }

    /// Overwrite parameters from a flat vector; returns values consumed.
    pub fn set_flat(&mut self, src: &[f64]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            off += l.read_flat(&src[off..]);
        }
        off
    }
}

pub fn grads_to_flat(grads: &[LinearGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.weight.data());
        out.extend_from_slice(&g.bias);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_weight_mlp_returns_bias() {
        let mut l = Linear::zeros(4, 3);
        l.bias = vec![1.0, -2.0, 0.5];
        let mlp = Mlp::new(vec![l], false).unwrap();
        let out = mlp.forward(&Tensor2::from_fn(2, 4, |i, j| (i + j) as f64)).unwrap();
        assert_eq!(out.row(1), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn rejects_incompatible_layers() {
        assert!(Mlp::new(vec![Linear::zeros(3, 4), Linear::zeros(5, 2)], false).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::random(&mut rng, &[5, 7, 3], true, 1.0);
        let x = Tensor2::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        let w = Tensor2::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let f = |theta: &[f64]| {
            let mut m = mlp.clone();
            m.set_flat(theta);
            let (y, cache) = m.forward_cached(&x).unwrap();
            let val: f64 = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
            let (g, _) = m.backward(&cache, &w).unwrap();
            (val, grads_to_flat(&g))
        };
        let report = finite_diff_check(f, &mlp.to_flat(), 1e-5);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
