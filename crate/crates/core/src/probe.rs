//! Representation-to-domain mutual information via a pair of binary probes.
//!
//! `Θ₀` learns to score samples from domain 0 high and domain 1 low, `Θ₁`
//! the reverse. With near-optimal probes,
//! `I(z; n) ≈ ½·E₀[log 2Θ₀(z)] + ½·E₁[log 2Θ₁(z)]`, which is at most `log 2`.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, AdamConfig, Ctx, LayerSpec, Sequential};

/// Probe outputs are clamped to `[ε, 1 − ε]`.
pub const PROBE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each domain used to fit the probes; the rest is held out.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 32,
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 64,
            train_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeBundle {
    pub theta0: Sequential,
    pub theta1: Sequential,
    /// Feature standardization fitted on the probe training data.
    mean: Array1<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub clipped: f64,
}

impl MiEstimate {
    fn new(value: f64) -> Self {
        MiEstimate {
            value,
            clipped: value.max(0.0),
        }
    }
}

fn probe_net(dim: usize, hidden: usize, seed: u64) -> Result<Sequential> {
    Sequential::from_seed(
        &[dim],
        &[
            LayerSpec::Linear { width: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { width: hidden },
            LayerSpec::Relu,
            LayerSpec::Linear { width: 1 },
        ],
        seed,
    )
}

impl ProbeBundle {
    fn standardize(&self, z: &Array2<f64>) -> Array2<f64> {
        (z - &self.mean) * &self.inv_std
    }

    fn scores(net: &Sequential, z: &Array2<f64>) -> Vec<f64> {
        net.infer(&z.clone().into_dyn())
            .iter()
            .map(|&l| sigmoid(l).clamp(PROBE_EPS, 1.0 - PROBE_EPS))
            .collect()
    }

    /// `Θ₀(z)` per row.
    pub fn theta0_scores(&self, z: &Array2<f64>) -> Vec<f64> {
        Self::scores(&self.theta0, &self.standardize(z))
    }

    /// `Θ₁(z)` per row.
    pub fn theta1_scores(&self, z: &Array2<f64>) -> Vec<f64> {
        Self::scores(&self.theta1, &self.standardize(z))
    }
}

fn check_pair(z0: &Array2<f64>, z1: &Array2<f64>) -> Result<()> {
    if z0.nrows() == 0 || z1.nrows() == 0 {
        return Err(Error::EmptyInput("probes need samples from both domains"));
    }
    if z0.ncols() != z1.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "representation widths {} and {}",
            z0.ncols(),
            z1.ncols()
        )));
    }
    Ok(())
}

/// Random rows of `z`, `n` of them, in a seeded order.
fn subsample(z: &Array2<f64>, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut idx: Vec<usize> = (0..z.nrows()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    z.select(Axis(0), &idx)
}

/// Fits one probe with binary cross-entropy; `positive` rows target 1.
fn fit_probe(net: &mut Sequential, positive: &Array2<f64>, negative: &Array2<f64>, cfg: &ProbeConfig, rng: &mut ChaCha8Rng) {
    let x = ndarray::concatenate(Axis(0), &[positive.view(), negative.view()]).expect("same width");
    let t: Vec<f64> = (0..x.nrows()).map(|i| f64::from(u8::from(i < positive.nrows()))).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), chunk).into_dyn();
            let (logits, tape) = net.forward(&xb, &mut Ctx::deterministic());
            let n = chunk.len() as f64;
            let grad: Vec<f64> = logits.iter().zip(chunk).map(|(&l, &i)| (sigmoid(l) - t[i]) / n).collect();
            let grad = ndarray::ArrayD::from_shape_vec(logits.raw_dim(), grad).expect("one logit per row");
            let mut grads = net.zero_grads();
            net.backward(&tape, grad, &mut grads, false);
            let freezes = net.param_freezes();
            adam.step(net.params_mut(), &grads.tensors, &freezes, None);
        }
    }
}

pub fn train_probes(z0: &Array2<f64>, z1: &Array2<f64>, seed: u64) -> Result<ProbeBundle> {
    train_probes_with(z0, z1, seed, &ProbeConfig::default())
}

/// Trains `Θ₀` and `Θ₁` on equal numbers of samples from each domain (the
/// larger set is subsampled).
pub fn train_probes_with(z0: &Array2<f64>, z1: &Array2<f64>, seed: u64, cfg: &ProbeConfig) -> Result<ProbeBundle> {
    check_pair(z0, z1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = z0.nrows().min(z1.nrows());
    let z0 = subsample(z0, n, &mut rng);
    let z1 = subsample(z1, n, &mut rng);
    let pooled = ndarray::concatenate(Axis(0), &[z0.view(), z1.view()]).expect("same width");
    let mean = pooled.mean_axis(Axis(0)).expect("nonempty");
    let inv_std = pooled
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { 1.0 / s } else { 1.0 });
    let mut bundle = ProbeBundle {
        theta0: probe_net(z0.ncols(), cfg.hidden, seed.wrapping_add(1))?,
        theta1: probe_net(z0.ncols(), cfg.hidden, seed.wrapping_add(2))?,
        mean,
        inv_std,
    };
    let s0 = bundle.standardize(&z0);
    let s1 = bundle.standardize(&z1);
    fit_probe(&mut bundle.theta0, &s0, &s1, cfg, &mut rng);
    fit_probe(&mut bundle.theta1, &s1, &s0, cfg, &mut rng);
    Ok(bundle)
}

/// `½·mean log 2Θ₀(z0) + ½·mean log 2Θ₁(z1)` on held-out representations.
pub fn estimate_mi(bundle: &ProbeBundle, z0: &Array2<f64>, z1: &Array2<f64>) -> Result<MiEstimate> {
    check_pair(z0, z1)?;
    let term = |scores: Vec<f64>| scores.iter().map(|s| (2.0 * s).ln()).sum::<f64>() / scores.len() as f64;
    let value = 0.5 * term(bundle.theta0_scores(z0)) + 0.5 * term(bundle.theta1_scores(z1));
    Ok(MiEstimate::new(value))
}

/// Splits each domain into probe-training and held-out parts, trains, and
/// estimates on the held-out part.
pub fn probe_mi(z0: &Array2<f64>, z1: &Array2<f64>, seed: u64, cfg: &ProbeConfig) -> Result<MiEstimate> {
    check_pair(z0, z1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0B5E_55ED);
    let split = |z: &Array2<f64>, rng: &mut ChaCha8Rng| {
        let shuffled = subsample(z, z.nrows(), rng);
        let cut = ((z.nrows() as f64) * cfg.train_fraction).round() as usize;
        let cut = cut.clamp(1, z.nrows().saturating_sub(1).max(1));
        (
            shuffled.slice(ndarray::s![..cut, ..]).to_owned(),
            shuffled.slice(ndarray::s![cut.., ..]).to_owned(),
        )
    };
    let (fit0, held0) = split(z0, &mut rng);
    let (fit1, held1) = split(z1, &mut rng);
    let bundle = train_probes_with(&fit0, &fit1, seed, cfg)?;
    estimate_mi(&bundle, &held0, &held1)
}

/// Control: the same estimate after randomly permuting domain tags.
pub fn shuffled_control(z0: &Array2<f64>, z1: &Array2<f64>, seed: u64, cfg: &ProbeConfig) -> Result<MiEstimate> {
    check_pair(z0, z1)?;
    let pooled = ndarray::concatenate(Axis(0), &[z0.view(), z1.view()]).expect("same width");
    let mut idx: Vec<usize> = (0..pooled.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED));
    let (a, b) = idx.split_at(z0.nrows());
    probe_mi(&pooled.select(Axis(0), a), &pooled.select(Axis(0), b), seed, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || shift + rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn half_scores_give_zero() {
        let theta = probe_net(2, 4, 0).unwrap();
        let mut bundle = ProbeBundle {
            theta0: theta.clone(),
            theta1: theta,
            mean: Array1::zeros(2),
            inv_std: Array1::ones(2),
        };
        for net in [&mut bundle.theta0, &mut bundle.theta1] {
            for p in net.params_mut() {
                p.fill(0.0);
            }
        }
        let z = Array2::from_elem((5, 2), 0.3);
        let est = estimate_mi(&bundle, &z, &z).unwrap();
        assert!(est.value.abs() < 1e-15);
    }

    #[test]
    fn separated_clusters_are_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = gaussian(300, 1, -3.0, &mut rng);
        let z1 = gaussian(300, 1, 3.0, &mut rng);
        let bundle = train_probes(&z0, &z1, 7).unwrap();
        let t0 = gaussian(200, 1, -3.0, &mut rng);
        let t1 = gaussian(200, 1, 3.0, &mut rng);
        let correct = bundle.theta0_scores(&t0).iter().filter(|&&s| s > 0.5).count()
            + bundle.theta0_scores(&t1).iter().filter(|&&s| s < 0.5).count();
        assert!(correct as f64 / 400.0 >= 0.95);
        let est = estimate_mi(&bundle, &t0, &t1).unwrap();
        assert!(est.value > 0.5 && est.value <= std::f64::consts::LN_2 + 1e-6, "{est:?}");
    }

    #[test]
    fn identical_distributions_stay_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = gaussian(400, 3, 0.0, &mut rng);
        let z1 = gaussian(400, 3, 0.0, &mut rng);
        let bundle = train_probes(&z0, &z1, 3).unwrap();
        let held = gaussian(300, 3, 0.0, &mut rng);
        let mean = bundle.theta0_scores(&held).iter().sum::<f64>() / 300.0;
        assert!((mean - 0.5).abs() < 0.1, "{mean}");
        let est = probe_mi(&z0, &z1, 4, &ProbeConfig::default()).unwrap();
        assert!(est.value < 0.05, "{est:?}");
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let a = Array2::<f64>::zeros((0, 2));
        let b = Array2::<f64>::zeros((3, 2));
        assert!(matches!(train_probes(&a, &b, 0), Err(Error::EmptyInput(_))));
        let c = Array2::<f64>::zeros((3, 4));
        assert!(matches!(train_probes(&b, &c, 0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn estimate_is_bounded_by_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for shift in [0.0, 1.0, 10.0] {
            let z0 = gaussian(100, 2, 0.0, &mut rng);
            let z1 = gaussian(100, 2, shift, &mut rng);
            let est = probe_mi(&z0, &z1, rng.random(), &ProbeConfig::default()).unwrap();
            assert!(est.value <= std::f64::consts::LN_2 + 1e-6);
            assert!(est.clipped >= 0.0);
        }
    }
}
