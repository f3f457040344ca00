use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::layer::Freeze;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen entries are skipped entirely, so their
/// values stay bit-identical no matter how many steps are taken.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// `lr_scale`, when given, multiplies the step size entrywise.
    pub fn step(
        &mut self,
        params: Vec<&mut ArrayD<f64>>,
        grads: &[ArrayD<f64>],
        freezes: &[Freeze],
        lr_scale: Option<&[ArrayD<f64>]>,
    ) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        assert_eq!(params.len(), freezes.len(), "one freeze state per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, param) in params.into_iter().enumerate() {
            let channels = param.shape().first().copied().unwrap_or(1);
            let Some(first) = freezes[i].first_trainable(channels) else {
                continue;
            };
            let inner = param.len() / channels.max(1);
            let start = first * inner;
            let p = param.as_slice_mut().expect("contiguous parameter");
            let g = grads[i].as_slice().expect("contiguous gradient");
            let m = self.m[i].as_slice_mut().expect("contiguous");
            let v = self.v[i].as_slice_mut().expect("contiguous");
            let scale = lr_scale.map(|s| s[i].as_slice().expect("contiguous"));
            for j in start..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                p[j] -= scale.map_or(update, |s| update * s[j]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ArrayD::from_elem(IxDyn(&[2, 2]), 1.0);
        let g = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.5, -2.0, 0.0, 3.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(vec![&mut p], &[g], &[Freeze::None], None);
        let got = p.as_slice().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] - 1.1).abs() < 1e-6);
        assert_eq!(got[2], 1.0);
        assert!((got[3] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn leading_channels_never_move() {
        let mut p = ArrayD::from_elem(IxDyn(&[4, 3]), 0.25);
        let g = ArrayD::from_elem(IxDyn(&[4, 3]), 1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            adam.step(vec![&mut p], std::slice::from_ref(&g), &[Freeze::Leading(2)], None);
        }
        assert!(p.as_slice().unwrap()[..6].iter().all(|&v| v == 0.25));
        assert!(p.as_slice().unwrap()[6..].iter().all(|&v| v < 0.25));
    }
}
