//! Generative augmentation for source-only training.
//!
//! A label-conditional generator is trained against a discriminator with a
//! shared feature extractor `D_z`, a real/fake head `D_b` and a class head
//! `D_m`. The trained generator is then cloned once per `(dis, dir)` cell,
//! partially frozen, and pushed until its samples sit roughly `dis` away from
//! the source in `D_z` space. The union of all cells is the auxiliary domain.

use ndarray::{Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::domains::{DomainDataset, Provenance};
use crate::error::{Error, Result};
use crate::kernels::{mmd_exp, mmd_exp_with_grad, KernelConfig};
use crate::nn::{softmax, softmax_backward, Adam, AdamConfig, Ctx, Freeze, Grads, LayerSpec, Sequential, Tape};
use crate::objective::kl_class_loss_with_grad;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Ascending MMD upper bounds, one set of cells per entry.
    pub dis_list: Vec<f64>,
    pub num_directions: usize,
    pub gan_epochs: usize,
    pub aug_epochs: usize,
    pub latent_dim: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Weight of the pull toward same-label real samples in the generator step.
    pub mse_weight: f64,
    /// Samples drawn per cell; `None` matches the source size overall.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_cell: Option<usize>,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            dis_list: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            num_directions: 4,
            gan_epochs: 20,
            aug_epochs: 5,
            latent_dim: 256,
            seed: 2021,
            kernel: KernelConfig::default(),
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            mse_weight: 1.0,
            samples_per_cell: None,
        }
    }
}

impl AugConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dis_list.is_empty() {
            v.push("aug.dis_list must not be empty".into());
        }
        if self.dis_list.iter().any(|&d| !(d > 0.0)) {
            v.push("aug.dis_list entries must be > 0".into());
        }
        if self.dis_list.windows(2).any(|w| w[0] >= w[1]) {
            v.push("aug.dis_list must be strictly ascending".into());
        }
        if self.num_directions == 0 {
            v.push("aug.num_directions must be >= 1".into());
        }
        if self.latent_dim == 0 {
            v.push("aug.latent_dim must be >= 1".into());
        }
        if self.batch_size == 0 {
            v.push("aug.batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            v.push("aug.learning_rate must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("aug.beta1 and aug.beta2 must lie in [0, 1)".into());
        }
        if self.mse_weight < 0.0 {
            v.push("aug.mse_weight must be >= 0".into());
        }
        if self.samples_per_cell == Some(0) {
            v.push("aug.samples_per_cell must be >= 1".into());
        }
        if let Err(Error::InvalidConfig(k)) = self.kernel.validate() {
            v.extend(k);
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        })
    }

    /// `(dis, dir)` for every cell in generation order.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.dis_list
            .iter()
            .flat_map(|&d| (0..self.num_directions).map(move |dir| (d, dir)))
            .collect()
    }
}

/// Generator and dual-head discriminator.
#[derive(Debug, Clone)]
pub struct GanBundle {
    pub generator: Sequential,
    pub disc_z: Sequential,
    pub disc_b: Sequential,
    pub disc_m: Sequential,
    pub latent_dim: usize,
    pub num_classes: usize,
}

/// Discriminator outputs and caches for one batch.
pub struct DiscPass {
    pub z: Array2<f64>,
    /// Real/fake score per sample, `(n, 1)`.
    pub b: Array2<f64>,
    pub m: Array2<f64>,
    tz: Tape,
    tb: Tape,
    tm: Tape,
}

struct DiscGrads {
    z: Grads,
    b: Grads,
    m: Grads,
}

fn to_matrix(a: ArrayD<f64>) -> Array2<f64> {
    a.into_dimensionality().expect("2-D activations")
}

pub fn build_gan(image_chw: [usize; 3], num_classes: usize, latent_dim: usize, seed: u64) -> Result<GanBundle> {
    let [c, h, w] = image_chw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaky = LayerSpec::LeakyRelu { slope: 0.2 };
    let generator = Sequential::new(
        &[latent_dim + num_classes],
        &[
            LayerSpec::Linear { width: 256 },
            leaky.clone(),
            LayerSpec::Linear { width: 512 },
            leaky.clone(),
            LayerSpec::Linear { width: c * h * w },
            LayerSpec::Tanh,
            LayerSpec::Reshape { shape: vec![c, h, w] },
        ],
        &mut rng,
    )?;
    let conv = |channels| LayerSpec::Conv {
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let disc_z = Sequential::new(
        &image_chw,
        &[
            conv(16),
            leaky.clone(),
            LayerSpec::MaxPool { size: 2 },
            conv(32),
            leaky.clone(),
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Linear { width: 128 },
            leaky,
        ],
        &mut rng,
    )?;
    let disc_b = Sequential::new(&[128], &[LayerSpec::Linear { width: 1 }, LayerSpec::Sigmoid], &mut rng)?;
    let disc_m = Sequential::new(&[128], &[LayerSpec::Linear { width: num_classes }], &mut rng)?;
    Ok(GanBundle {
        generator,
        disc_z,
        disc_b,
        disc_m,
        latent_dim,
        num_classes,
    })
}

impl GanBundle {
    pub fn image_shape(&self) -> &[usize] {
        self.generator.output_shape()
    }

    pub fn sample_noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.latent_dim), || rng.sample(StandardNormal))
    }

    fn generator_input(&self, noise: &Array2<f64>, labels: &[usize]) -> ArrayD<f64> {
        let mut x = Array2::zeros((noise.nrows(), self.latent_dim + self.num_classes));
        x.slice_mut(ndarray::s![.., ..self.latent_dim]).assign(noise);
        for (i, &y) in labels.iter().enumerate() {
            x[[i, self.latent_dim + y]] = 1.0;
        }
        x.into_dyn()
    }

    /// Images in `[−1, 1]`, `(n, C, H, W)`.
    pub fn generate(&self, noise: &Array2<f64>, labels: &[usize]) -> ArrayD<f64> {
        self.generator.infer(&self.generator_input(noise, labels))
    }

    fn generate_train(&self, noise: &Array2<f64>, labels: &[usize]) -> (ArrayD<f64>, Tape) {
        self.generator
            .forward(&self.generator_input(noise, labels), &mut Ctx::deterministic())
    }

    pub fn discriminate(&self, x: &ArrayD<f64>) -> DiscPass {
        let mut ctx = Ctx::deterministic();
        let (z, tz) = self.disc_z.forward(x, &mut ctx);
        let (b, tb) = self.disc_b.forward(&z, &mut ctx);
        let (logits, tm) = self.disc_m.forward(&z, &mut ctx);
        DiscPass {
            z: to_matrix(z),
            b: to_matrix(b),
            m: softmax(&to_matrix(logits)),
            tz,
            tb,
            tm,
        }
    }

    /// `D_z` features in evaluation mode.
    pub fn features(&self, x: &ArrayD<f64>) -> Array2<f64> {
        to_matrix(self.disc_z.infer(x))
    }

    fn disc_zero_grads(&self) -> DiscGrads {
        DiscGrads {
            z: self.disc_z.zero_grads(),
            b: self.disc_b.zero_grads(),
            m: self.disc_m.zero_grads(),
        }
    }

    /// Backpropagates upstream gradients on `z`, `b` and the class
    /// probabilities. Returns the input gradient when asked.
    fn disc_backward(
        &self,
        pass: &DiscPass,
        gz: Option<&Array2<f64>>,
        gb: Option<&Array2<f64>>,
        gm: Option<&Array2<f64>>,
        grads: &mut DiscGrads,
        need_input_grad: bool,
    ) -> Option<ArrayD<f64>> {
        let mut dz = Array2::zeros(pass.z.raw_dim()).into_dyn();
        if let Some(gz) = gz {
            dz += gz;
        }
        if let Some(gb) = gb {
            let d = self.disc_b.backward(&pass.tb, gb.clone().into_dyn(), &mut grads.b, true);
            dz += &d.expect("input gradient");
        }
        if let Some(gm) = gm {
            let dlogits = softmax_backward(&pass.m, gm);
            let d = self.disc_m.backward(&pass.tm, dlogits.into_dyn(), &mut grads.m, true);
            dz += &d.expect("input gradient");
        }
        self.disc_z.backward(&pass.tz, dz, &mut grads.z, need_input_grad)
    }

    fn disc_params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.disc_z.params_mut();
        p.extend(self.disc_b.params_mut());
        p.extend(self.disc_m.params_mut());
        p
    }

    fn disc_freezes(&self) -> Vec<Freeze> {
        let mut f = self.disc_z.param_freezes();
        f.extend(self.disc_b.param_freezes());
        f.extend(self.disc_m.param_freezes());
        f
    }

    fn step_disc(&mut self, adam: &mut Adam, grads: DiscGrads) {
        let freezes = self.disc_freezes();
        let tensors = grads.z.concat(grads.b).concat(grads.m).tensors;
        adam.step(self.disc_params_mut(), &tensors, &freezes, None);
    }

    fn step_generator(&mut self, adam: &mut Adam, grads: &Grads) {
        let freezes = self.generator.param_freezes();
        adam.step(self.generator.params_mut(), &grads.tensors, &freezes, None);
    }

    /// Whether every discriminator parameter is frozen.
    pub fn discriminator_frozen(&self) -> bool {
        self.disc_freezes().iter().all(|f| *f == Freeze::All)
    }
}

/// Value of the three adversarial losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub l_d: f64,
    pub l_g: f64,
    pub l_gd: f64,
}

fn binary_terms(b: &Array2<f64>, target: f64) -> (f64, Array2<f64>) {
    let n = b.nrows() as f64;
    let value = b.iter().map(|&v| (v - target).powi(2)).sum::<f64>() / n;
    (value, b.mapv(|v| 2.0 * (v - target) / n))
}

/// The adversarial losses for a real batch and a fake batch generated from
/// `uniform_labels`. The fake batch serves both the real/fake terms and the
/// class term on generated data.
pub fn gan_losses(
    real: &ArrayD<f64>,
    labels: &[usize],
    fake: &ArrayD<f64>,
    uniform_labels: &[usize],
    bundle: &GanBundle,
) -> Result<GanLosses> {
    bundle.disc_z.check_input(real)?;
    bundle.disc_z.check_input(fake)?;
    let r = bundle.discriminate(real);
    let f = bundle.discriminate(fake);
    let (real_sq, _) = binary_terms(&r.b, 1.0);
    let (fake_sq, _) = binary_terms(&f.b, 0.0);
    let (class_real, _) = kl_class_loss_with_grad(&r.m, labels)?;
    let (l_g, _) = binary_terms(&f.b, 1.0);
    let (l_gd, _) = kl_class_loss_with_grad(&f.m, uniform_labels)?;
    Ok(GanLosses {
        l_d: 0.5 * (real_sq + fake_sq) + class_real,
        l_g,
        l_gd,
    })
}

fn uniform_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// One record per adversarial epoch (batch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub l_d: f64,
    pub l_g: f64,
    pub l_gd: f64,
    pub mse: f64,
}

pub fn train_gan(source: &DomainDataset, cfg: &AugConfig) -> Result<GanBundle> {
    Ok(train_gan_with_history(source, cfg)?.0)
}

/// Per batch: a generator step on `L_G` plus the real-sample pull, a
/// discriminator step on `L_D`, then a joint step on `L_GD`.
pub fn train_gan_with_history(source: &DomainDataset, cfg: &AugConfig) -> Result<(GanBundle, Vec<GanEpoch>)> {
    cfg.validate()?;
    let mut bundle = build_gan(source.shape.chw(), source.num_classes, cfg.latent_dim, cfg.seed)?;
    let mut history = Vec::new();
    if cfg.gan_epochs == 0 {
        return Ok((bundle, history));
    }
    if source.is_empty() {
        return Err(Error::EmptyInput("GAN training needs source samples"));
    }
    let k = source.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut adam_g = cfg.adam();
    let mut adam_d = cfg.adam();
    let mut order: Vec<usize> = (0..source.len()).collect();
    for epoch in 0..cfg.gan_epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let n = chunk.len();
            let real = source.batch(chunk);
            let labels = source.batch_labels(chunk);

            // Generator step.
            let y_u = uniform_labels(n, k, &mut rng);
            let noise = bundle.sample_noise(n, &mut rng);
            let (fake, fake_tape) = bundle.generate_train(&noise, &y_u);
            let pass = bundle.discriminate(&fake);
            let (l_g, gb) = binary_terms(&pass.b, 1.0);
            let mut scratch = bundle.disc_zero_grads();
            let dfake = bundle
                .disc_backward(&pass, None, Some(&gb), None, &mut scratch, true)
                .expect("input gradient");
            let mut g_grads = bundle.generator.zero_grads();
            bundle.generator.backward(&fake_tape, dfake, &mut g_grads, false);
            let mut mse = 0.0;
            if cfg.mse_weight > 0.0 {
                let noise_r = bundle.sample_noise(n, &mut rng);
                let (paired, paired_tape) = bundle.generate_train(&noise_r, &labels);
                let diff = &paired - &real;
                let numel = diff.len() as f64;
                mse = diff.iter().map(|d| d * d).sum::<f64>() / numel;
                let grad = diff.mapv(|d| cfg.mse_weight * 2.0 * d / numel);
                bundle.generator.backward(&paired_tape, grad, &mut g_grads, false);
            }
            bundle.step_generator(&mut adam_g, &g_grads);

            // Discriminator step on the same fake images, now detached.
            let r = bundle.discriminate(&real);
            let f = bundle.discriminate(&fake);
            let (real_sq, gr) = binary_terms(&r.b, 1.0);
            let (fake_sq, gf) = binary_terms(&f.b, 0.0);
            let (class_real, gm) = kl_class_loss_with_grad(&r.m, &labels)?;
            let mut d_grads = bundle.disc_zero_grads();
            bundle.disc_backward(&r, None, Some(&(gr * 0.5)), Some(&gm), &mut d_grads, false);
            bundle.disc_backward(&f, None, Some(&(gf * 0.5)), None, &mut d_grads, false);
            bundle.step_disc(&mut adam_d, d_grads);

            // Joint class step on freshly generated uniform-label samples.
            let y_j = uniform_labels(n, k, &mut rng);
            let noise_j = bundle.sample_noise(n, &mut rng);
            let (fake_j, tape_j) = bundle.generate_train(&noise_j, &y_j);
            let pj = bundle.discriminate(&fake_j);
            let (l_gd, gmj) = kl_class_loss_with_grad(&pj.m, &y_j)?;
            let mut d_grads = bundle.disc_zero_grads();
            let dx = bundle
                .disc_backward(&pj, None, None, Some(&gmj), &mut d_grads, true)
                .expect("input gradient");
            let mut g_grads = bundle.generator.zero_grads();
            bundle.generator.backward(&tape_j, dx, &mut g_grads, false);
            bundle.step_generator(&mut adam_g, &g_grads);
            bundle.step_disc(&mut adam_d, d_grads);

            let l_d = 0.5 * (real_sq + fake_sq) + class_real;
            for (s, v) in sums.iter_mut().zip([l_d, l_g, l_gd, mse]) {
                *s += v;
            }
            batches += 1.0;
        }
        let rec = GanEpoch {
            epoch,
            l_d: sums[0] / batches,
            l_g: sums[1] / batches,
            l_gd: sums[2] / batches,
            mse: sums[3] / batches,
        };
        log::debug!("gan {rec:?}");
        history.push(rec);
    }
    Ok((bundle, history))
}

/// Accuracy of the class head on real data.
pub fn class_head_accuracy(bundle: &GanBundle, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("accuracy on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let z = bundle.features(&data.batch(chunk));
        let probs = softmax(&to_matrix(bundle.disc_m.infer(&z.into_dyn())));
        let pred = crate::nn::argmax_rows(&probs);
        correct += pred.iter().zip(data.batch_labels(chunk)).filter(|(p, y)| **p == *y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Freezes the whole discriminator and, in every parameterized generator
/// layer, the first `⌊dir·d/DIR⌋` output channels.
pub fn freeze_mask(bundle: &GanBundle, dir: usize, num_directions: usize) -> Result<GanBundle> {
    if dir >= num_directions {
        return Err(Error::DirectionOutOfRange { dir, num_directions });
    }
    let mut out = bundle.clone();
    out.disc_z.set_freeze(Freeze::All);
    out.disc_b.set_freeze(Freeze::All);
    out.disc_m.set_freeze(Freeze::All);
    for layer in out.generator.layers_mut() {
        if let Some(w) = &layer.weight {
            let d = w.shape()[0];
            layer.freeze = Freeze::Leading(dir * d / num_directions);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugLossParts {
    pub mmd: f64,
    pub ce: f64,
    pub total: f64,
}

/// `−min(dis, MMD(D_z(real), D_z(G(noise, y)))) + CE(D_m(G(noise, y)), y)`.
pub fn aug_loss(bundle: &GanBundle, real: &ArrayD<f64>, labels: &[usize], dis: f64, noise: &Array2<f64>) -> Result<AugLossParts> {
    Ok(aug_loss_with_grads(bundle, &bundle.features(real), labels, dis, noise, &KernelConfig::default())?.0)
}

/// Loss parts and generator gradients; `real_z` are precomputed `D_z` features.
fn aug_loss_with_grads(
    bundle: &GanBundle,
    real_z: &Array2<f64>,
    labels: &[usize],
    dis: f64,
    noise: &Array2<f64>,
    kernel: &KernelConfig,
) -> Result<(AugLossParts, Grads)> {
    if !(dis > 0.0) {
        return Err(Error::InvalidConfig(vec![format!("dis must be > 0, got {dis}")]));
    }
    let (fake, tape) = bundle.generate_train(noise, labels);
    let pass = bundle.discriminate(&fake);
    let mmd = mmd_exp_with_grad(real_z, &pass.z, kernel)?;
    let (ce, gm) = kl_class_loss_with_grad(&pass.m, labels)?;
    let clipped = mmd.value < dis;
    let total = -mmd.value.min(dis) + ce;
    let gz = clipped.then(|| mmd.grad_b.mapv(|g| -g));
    let mut scratch = bundle.disc_zero_grads();
    let dx = bundle
        .disc_backward(&pass, gz.as_ref(), None, Some(&gm), &mut scratch, true)
        .expect("input gradient");
    let mut grads = bundle.generator.zero_grads();
    bundle.generator.backward(&tape, dx, &mut grads, false);
    Ok((
        AugLossParts {
            mmd: mmd.value,
            ce,
            total,
        },
        grads,
    ))
}

/// Seed for one cell, independent of the order cells are visited in.
pub fn cell_seed(seed: u64, dis: f64, dir: usize) -> u64 {
    let mut x = seed ^ dis.to_bits().rotate_left(17) ^ (dir as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Summary of one augmentation cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub dis: f64,
    pub dir: usize,
    pub count: usize,
    /// Mean loss parts over the last optimization epoch.
    pub final_mmd: f64,
    pub final_ce: f64,
}

/// Clones `gan`, applies the freeze mask for `dir`, optimizes the distance
/// loss for `aug_epochs`, and samples `count` images with uniform labels.
pub fn run_cell(
    gan: &GanBundle,
    source: &DomainDataset,
    source_z: &Array2<f64>,
    dis: f64,
    dir: usize,
    count: usize,
    cfg: &AugConfig,
) -> Result<(DomainDataset, CellReport)> {
    let mut bundle = freeze_mask(gan, dir, cfg.num_directions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(cfg.seed, dis, dir));
    let mut adam = cfg.adam();
    let mut order: Vec<usize> = (0..source.len()).collect();
    let (mut last_mmd, mut last_ce) = (0.0, 0.0);
    for _ in 0..cfg.aug_epochs {
        order.shuffle(&mut rng);
        let (mut mmd_sum, mut ce_sum, mut batches) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let real_z = source_z.select(Axis(0), chunk);
            let labels = source.batch_labels(chunk);
            let noise = bundle.sample_noise(chunk.len(), &mut rng);
            let (parts, grads) = aug_loss_with_grads(&bundle, &real_z, &labels, dis, &noise, &cfg.kernel)?;
            bundle.step_generator(&mut adam, &grads);
            mmd_sum += parts.mmd;
            ce_sum += parts.ce;
            batches += 1.0;
        }
        if batches > 0.0 {
            last_mmd = mmd_sum / batches;
            last_ce = ce_sum / batches;
        }
    }
    let labels = uniform_labels(count, bundle.num_classes, &mut rng);
    let noise = bundle.sample_noise(count, &mut rng);
    let images = bundle.generate(&noise, &labels);
    let data = DomainDataset::from_signed_batch(
        format!("{}+aug(dis={dis},dir={dir})", source.name),
        &images,
        labels,
        source.num_classes,
        1,
    )?;
    let report = CellReport {
        dis,
        dir,
        count,
        final_mmd: last_mmd,
        final_ce: last_ce,
    };
    Ok((data, report))
}

/// `D_z` features of a whole dataset, in chunks.
pub fn dataset_features(bundle: &GanBundle, data: &DomainDataset) -> Array2<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Array2<f64>> = idx.chunks(256).map(|c| bundle.features(&data.batch(c))).collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same width")
}

/// MMD between two datasets in `D_z` space, on at most `max_n` samples each.
pub fn feature_mmd(bundle: &GanBundle, a: &DomainDataset, b: &DomainDataset, max_n: usize, kernel: &KernelConfig) -> Result<f64> {
    let take = |d: &DomainDataset| d.subset(&(0..d.len().min(max_n)).collect::<Vec<_>>());
    mmd_exp(&dataset_features(bundle, &take(a)), &dataset_features(bundle, &take(b)), kernel)
}

/// The auxiliary domain from an already trained GAN, with per-cell reports.
pub fn augment_with_gan(gan: &GanBundle, source: &DomainDataset, cfg: &AugConfig) -> Result<(DomainDataset, Vec<CellReport>)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyInput("augmentation needs source samples"));
    }
    if gan.image_shape() != source.shape.chw() || gan.num_classes != source.num_classes {
        return Err(Error::IncompatibleDomains("GAN and source geometry differ".into()));
    }
    let cells = cfg.cells();
    let count = cfg
        .samples_per_cell
        .unwrap_or_else(|| source.len().div_ceil(cells.len()));
    let source_z = dataset_features(gan, source);
    let mut parts = Vec::with_capacity(cells.len());
    let mut reports = Vec::with_capacity(cells.len());
    for &(dis, dir) in &cells {
        let (data, report) = run_cell(gan, source, &source_z, dis, dir, count, cfg)?;
        log::debug!("cell {report:?}");
        parts.push(data);
        reports.push(report);
    }
    let refs: Vec<&DomainDataset> = parts.iter().collect();
    let mut aux = DomainDataset::concat(format!("{}+aug", source.name), &refs, 1)?;
    aux.provenance = Some(Provenance {
        cells,
        sample_cells: (0..parts.len()).flat_map(|c| std::iter::repeat_n(c, count)).collect(),
    });
    Ok((aux, reports))
}

/// Trains the GAN and synthesizes the auxiliary domain (tag 1).
pub fn generate_auxiliary(source: &DomainDataset, cfg: &AugConfig) -> Result<DomainDataset> {
    let gan = train_gan(source, cfg)?;
    Ok(augment_with_gan(&gan, source, cfg)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use crate::domains::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes};

    fn zeros_batch(n: usize, chw: [usize; 3]) -> ArrayD<f64> {
        ArrayD::zeros(IxDyn(&[n, chw[0], chw[1], chw[2]]))
    }

    fn tiny_source(n: usize) -> DomainDataset {
        let sizes = SyntheticSizes {
            image_size: 8,
            train: n,
            test: 0,
        };
        make_synthetic_domain_pair(1, &SyntheticShiftSpec::identity(), &sizes).unwrap().0
    }

    fn small_cfg() -> AugConfig {
        AugConfig {
            dis_list: vec![0.2],
            num_directions: 2,
            gan_epochs: 1,
            aug_epochs: 1,
            latent_dim: 8,
            batch_size: 10,
            ..Default::default()
        }
    }

    #[test]
    fn binary_part_at_half() {
        let half = Array2::from_elem((4, 1), 0.5);
        let (real, _) = binary_terms(&half, 1.0);
        let (fake, _) = binary_terms(&half, 0.0);
        assert!((0.5 * (real + fake) - 0.25).abs() < 1e-15);
        assert!((real - 0.25).abs() < 1e-15);
    }

    #[test]
    fn generator_geometry_and_range() {
        let gan = build_gan([3, 8, 8], 10, 8, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = gan.sample_noise(5, &mut rng);
        let x = gan.generate(&noise, &[0, 1, 2, 3, 4]);
        assert_eq!(x.shape(), &[5, 3, 8, 8]);
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        let pass = gan.discriminate(&x);
        assert!(pass.b.iter().all(|v| (0.0..=1.0).contains(v)));
        for row in pass.m.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn freeze_mask_channel_counts() {
        let gan = build_gan([3, 8, 8], 10, 8, 0).unwrap();
        let masked = freeze_mask(&gan, 2, 4).unwrap();
        assert!(masked.discriminator_frozen());
        let first = &masked.generator.layers()[0];
        assert_eq!(first.weight.as_ref().unwrap().shape()[0], 256);
        assert_eq!(first.freeze, Freeze::Leading(128));
        let none = freeze_mask(&gan, 0, 4).unwrap();
        assert!(none.generator.param_freezes().iter().all(|f| *f == Freeze::Leading(0)));
        assert!(matches!(freeze_mask(&gan, 4, 4), Err(Error::DirectionOutOfRange { .. })));
    }

    #[test]
    fn frozen_channels_survive_optimization() {
        let source = tiny_source(20);
        let cfg = small_cfg();
        let gan = build_gan([3, 8, 8], 10, cfg.latent_dim, 3).unwrap();
        let z = dataset_features(&gan, &source);
        let before = freeze_mask(&gan, 1, 2).unwrap();
        let mut masked = before.clone();
        let mut adam = cfg.adam();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let noise = masked.sample_noise(20, &mut rng);
            let (_, grads) = aug_loss_with_grads(&masked, &z, source.labels(), 0.5, &noise, &cfg.kernel).unwrap();
            masked.step_generator(&mut adam, &grads);
        }
        for (old, new) in before.generator.layers().iter().zip(masked.generator.layers()) {
            let (Some(w0), Some(w1)) = (&old.weight, &new.weight) else {
                continue;
            };
            let k = match old.freeze {
                Freeze::Leading(k) => k,
                _ => unreachable!(),
            };
            let inner = w0.len() / w0.shape()[0];
            let s0 = w0.as_slice().unwrap();
            let s1 = w1.as_slice().unwrap();
            assert_eq!(&s0[..k * inner], &s1[..k * inner]);
            assert_ne!(&s0[k * inner..], &s1[k * inner..]);
            let b0 = old.bias.as_ref().unwrap().as_slice().unwrap();
            let b1 = new.bias.as_ref().unwrap().as_slice().unwrap();
            assert_eq!(&b0[..k], &b1[..k]);
        }
    }

    #[test]
    fn aug_loss_clip_bound() {
        let source = tiny_source(20);
        let gan = build_gan([3, 8, 8], 10, 8, 4).unwrap();
        let real = source.batch(&(0..20).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dis in [1e-6, 0.1, 0.5, 3.0] {
            let noise = gan.sample_noise(20, &mut rng);
            let parts = aug_loss(&gan, &real, source.labels(), dis, &noise).unwrap();
            assert!(parts.total - parts.ce >= -dis - 1e-12);
            assert!((parts.total - (-parts.mmd.min(dis) + parts.ce)).abs() < 1e-12);
        }
    }

    #[test]
    fn cells_are_order_independent() {
        let source = tiny_source(20);
        let cfg = AugConfig {
            dis_list: vec![0.1, 0.3],
            ..small_cfg()
        };
        let gan = build_gan([3, 8, 8], 10, cfg.latent_dim, 5).unwrap();
        let z = dataset_features(&gan, &source);
        let a = run_cell(&gan, &source, &z, 0.3, 1, 7, &cfg).unwrap();
        let _ = run_cell(&gan, &source, &z, 0.1, 0, 7, &cfg).unwrap();
        let b = run_cell(&gan, &source, &z, 0.3, 1, 7, &cfg).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn auxiliary_union_layout() {
        let source = tiny_source(30);
        let cfg = small_cfg();
        let aux = generate_auxiliary(&source, &cfg).unwrap();
        assert_eq!(aux.len(), 30);
        assert_eq!(aux.domain_tag, 1);
        assert_eq!(aux.shape, source.shape);
        let prov = aux.provenance.as_ref().unwrap();
        assert_eq!(prov.cells, vec![(0.2, 0), (0.2, 1)]);
        assert_eq!(prov.sample_cells.iter().filter(|&&c| c == 1).count(), 15);
        let again = generate_auxiliary(&source, &cfg).unwrap();
        assert_eq!(aux, again);
    }

    #[test]
    fn gan_loss_examples() {
        let source = tiny_source(10);
        let gan = build_gan([3, 8, 8], 10, 8, 6).unwrap();
        let real = source.batch(&(0..10).collect::<Vec<_>>());
        let losses = gan_losses(&real, source.labels(), &real, source.labels(), &gan).unwrap();
        assert!(losses.l_d > 0.0 && losses.l_g > 0.0 && losses.l_gd > 0.0);
        assert!(gan_losses(&zeros_batch(2, [3, 4, 4]), &[0, 1], &real, source.labels(), &gan).is_err());
        let empty = AugConfig {
            dis_list: vec![],
            ..Default::default()
        };
        assert!(matches!(empty.validate(), Err(Error::InvalidConfig(_))));
        let untrained = train_gan(&source, &AugConfig { gan_epochs: 0, latent_dim: 8, ..Default::default() }).unwrap();
        assert_eq!(untrained.generator.params(), build_gan([3, 8, 8], 10, 8, 2021).unwrap().generator.params());
    }
}
