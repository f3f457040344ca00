use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Cache, Ctx, Freeze, Layer, LayerSpec};
use crate::error::{Error, Result};

/// A stack of layers applied in order.
#[derive(Debug, Clone)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer caches recorded by a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

impl Sequential {
    pub fn new(input_shape: &[usize], specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = Layer::new(spec.clone(), &shape, rng)?;
            shape = layer.out_shape.clone();
            layers.push(layer);
        }
        Ok(Sequential {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn from_seed(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::new(input_shape, specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn check_input(&self, x: &ArrayD<f64>) -> Result<()> {
        if x.ndim() == 0 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::GeometryMismatch {
                expected: self.input_shape.clone(),
                found: x.shape().get(1..).unwrap_or_default().to_vec(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &ArrayD<f64>, ctx: &mut Ctx<'_>) -> (ArrayD<f64>, Tape) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (next, cache) = layer.forward(&cur, ctx);
            caches.push(cache);
            cur = next;
        }
        (cur, Tape { caches })
    }

    /// Evaluation-mode forward without recording a tape.
    pub fn infer(&self, x: &ArrayD<f64>) -> ArrayD<f64> {
        let mut ctx = Ctx::eval();
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, &mut ctx).0;
        }
        cur
    }

    /// Backpropagates `grad` (w.r.t. the output) through the tape, adding parameter
    /// gradients into `grads`. Returns the gradient w.r.t. the input when requested.
    pub fn backward(
        &self,
        tape: &Tape,
        grad: ArrayD<f64>,
        grads: &mut Grads,
        need_input_grad: bool,
    ) -> Option<ArrayD<f64>> {
        assert_eq!(grads.tensors.len(), self.num_param_tensors(), "gradient layout");
        let mut slot = grads.tensors.len();
        let mut cur = grad;
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            let needs_dx = need_input_grad || i > 0;
            let (dx, dparams) = layer.backward(cache, &cur, needs_dx);
            if let Some((dw, db)) = dparams {
                slot -= 2;
                grads.tensors[slot] += &dw;
                grads.tensors[slot + 1] += &db;
            }
            cur = dx?;
        }
        need_input_grad.then_some(cur)
    }

    /// Updates batch-norm running statistics from a training tape.
    pub fn absorb_batch_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            layer.absorb_batch_stats(cache);
        }
    }

    pub fn num_param_tensors(&self) -> usize {
        self.layers.iter().filter(|l| l.weight.is_some()).count() * 2
    }

    /// Weight then bias for every parameterized layer, in layer order.
    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        self.layers
            .iter()
            .filter_map(|l| Some([l.weight.as_ref()?, l.bias.as_ref()?]))
            .flatten()
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        self.layers
            .iter_mut()
            .filter_map(|l| Some([l.weight.as_mut()?, l.bias.as_mut()?]))
            .flatten()
            .collect()
    }

    /// Freeze state aligned with [`Sequential::params`].
    pub fn param_freezes(&self) -> Vec<Freeze> {
        self.layers
            .iter()
            .filter(|l| l.weight.is_some())
            .flat_map(|l| [l.freeze, l.freeze])
            .collect()
    }

    /// Names aligned with [`Sequential::params`], e.g. `3.weight`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight.is_some())
            .flat_map(|(i, _)| [format!("{prefix}{i}.weight"), format!("{prefix}{i}.bias")])
            .collect()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn set_freeze(&mut self, freeze: Freeze) {
        for layer in &mut self.layers {
            layer.freeze = freeze;
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Batch-norm running statistics, for checkpointing.
    pub fn buffers(&self) -> Vec<(usize, &ndarray::Array1<f64>, &ndarray::Array1<f64>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.running.as_ref().map(|(m, v)| (i, m, v)))
            .collect()
    }
}

/// Gradient tensors laid out like a network's parameter list.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<ArrayD<f64>>,
}

impl Grads {
    pub fn concat(mut self, other: Grads) -> Grads {
        self.tensors.extend(other.tensors);
        self
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn squared(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| t.mapv(|v| v * v)).collect(),
        }
    }
}

/// Builds an `(n, ...)` batch array from per-sample flat vectors.
pub fn stack_batch(samples: &[Vec<f64>], shape: &[usize]) -> ArrayD<f64> {
    let mut dims = vec![samples.len()];
    dims.extend_from_slice(shape);
    let data: Vec<f64> = samples.iter().flatten().copied().collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data).expect("batch shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> Sequential {
        let specs = vec![
            LayerSpec::Conv {
                channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Tanh,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::BatchNorm,
            LayerSpec::Flatten,
            LayerSpec::Linear { width: 4 },
            LayerSpec::Sigmoid,
            LayerSpec::Linear { width: 2 },
        ];
        Sequential::from_seed(&[2, 4, 4], &specs, 3).unwrap()
    }

    /// Sum of outputs weighted by a fixed vector, so every output contributes.
    fn objective(net: &Sequential, x: &ArrayD<f64>, weights: &ArrayD<f64>) -> f64 {
        let (y, _) = net.forward(x, &mut Ctx::deterministic());
        (&y * weights).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[3, 2, 4, 4]), || rng.random_range(-1.0..1.0));
        let weights = ArrayD::from_shape_simple_fn(IxDyn(&[3, 2]), || rng.random_range(-1.0..1.0));
        let (_, tape) = net.forward(&x, &mut Ctx::deterministic());
        let mut grads = net.zero_grads();
        let dx = net.backward(&tape, weights.clone(), &mut grads, true).unwrap();

        let h = 1e-6;
        for p in 0..net.num_param_tensors() {
            let len = net.params()[p].len();
            for idx in [0, len / 2, len - 1] {
                let orig = net.params()[p].as_slice().unwrap()[idx];
                net.params_mut()[p].as_slice_mut().unwrap()[idx] = orig + h;
                let up = objective(&net, &x, &weights);
                net.params_mut()[p].as_slice_mut().unwrap()[idx] = orig - h;
                let down = objective(&net, &x, &weights);
                net.params_mut()[p].as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.tensors[p].as_slice().unwrap()[idx];
                assert!(
                    (numeric - analytic).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {p}[{idx}]: {numeric} vs {analytic}"
                );
            }
        }

        let mut xp = x.clone();
        for idx in [0, 17, 95] {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let up = objective(&net, &xp, &weights);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let down = objective(&net, &xp, &weights);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - dx.as_slice().unwrap()[idx]).abs() <= 1e-6 * (1.0 + numeric.abs()));
        }
    }

    #[test]
    fn geometry_is_checked() {
        let net = tiny();
        assert!(net.check_input(&ArrayD::zeros(IxDyn(&[1, 2, 4, 4]))).is_ok());
        assert!(matches!(
            net.check_input(&ArrayD::zeros(IxDyn(&[1, 3, 4, 4]))),
            Err(Error::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn param_names_follow_layer_indices() {
        let net = tiny();
        assert_eq!(
            net.param_names("e."),
            ["e.0.weight", "e.0.bias", "e.3.weight", "e.3.bias", "e.5.weight", "e.5.bias", "e.7.weight", "e.7.bias"]
        );
    }
}
