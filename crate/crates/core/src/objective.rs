//! Non-transferable learning objectives and training loops.
//!
//! `L_S` and `L_A` are KL losses against one-hot labels on the source and
//! auxiliary batches. The clipped objective is `L_S − min(β, α·L_A)`; the full
//! objective weights the auxiliary term by a clipped representation distance,
//! `L_S − min(β, α·L_A·L_dis)` with `L_dis = min(β′, α′·MMD(Φ(source), Φ(aux)))`.

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::{ensure_compatible, DomainDataset};
use crate::error::{Error, Result};
use crate::kernels::{mmd_exp_with_grad, mmd_with_bandwidths, KernelConfig};
use crate::models::{ModelBundle, DEFAULT_BATCH_SIZE};
use crate::nn::{Adam, AdamConfig, Ctx, Grads};

/// Lower clamp applied to probabilities inside the log.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtlConfig {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_prime: f64,
    pub beta_prime: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
}

impl Default for NtlConfig {
    fn default() -> Self {
        NtlConfig {
            alpha: 0.1,
            beta: 1.0,
            alpha_prime: 0.1,
            beta_prime: 1.0,
            learning_rate: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 30,
            seed: 2021,
            kernel: KernelConfig::default(),
        }
    }
}

impl NtlConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("alpha_prime", self.alpha_prime),
            ("beta_prime", self.beta_prime),
            ("learning_rate", self.learning_rate),
        ] {
            if !(value > 0.0) {
                v.push(format!("ntl.{name} must be > 0, got {value}"));
            }
        }
        if self.batch_size == 0 {
            v.push("ntl.batch_size must be > 0".into());
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
}

/// The pieces of the composite loss for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_s: f64,
    pub l_a: f64,
    pub l_dis: f64,
    pub total: f64,
}

/// Which objective a training loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// `L_S` only.
    Supervised,
    /// `L_S − min(β, α·L_A)`.
    Clipped,
    /// `L_S − min(β, α·L_A·L_dis)`.
    #[default]
    Ntl,
}

/// Mean of `−log max(ŷ[y], ε)`, i.e. `KL(onehot(y) ‖ ŷ)`.
pub fn kl_class_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(kl_class_loss_with_grad(probs, labels)?.0)
}

/// Loss value and its gradient with respect to `probs`.
pub fn kl_class_loss_with_grad(probs: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    if probs.nrows() == 0 {
        return Err(Error::EmptyInput("classification loss on an empty batch"));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    let k = probs.ncols();
    let n = probs.nrows() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(probs.raw_dim());
    for (i, (row, &y)) in probs.rows().into_iter().zip(labels).enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: k,
            });
        }
        let sum = row.sum();
        if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDistribution { row: i });
        }
        let p = row[y];
        loss -= p.max(PROB_EPS).ln();
        if p > PROB_EPS {
            grad[[i, y]] = -1.0 / (n * p);
        }
    }
    Ok((loss / n, grad))
}

pub fn ntl_star_loss(l_s: f64, l_a: f64, cfg: &NtlConfig) -> f64 {
    l_s - cfg.beta.min(cfg.alpha * l_a)
}

/// Partial derivatives of the total with respect to `l_a` and the raw MMD.
#[derive(Debug, Clone, Copy)]
struct Partials {
    d_la: f64,
    d_mmd: f64,
}

/// Assembles the full objective from its ingredients.
fn combine(l_s: f64, l_a: f64, raw_mmd: f64, cfg: &NtlConfig) -> (LossParts, Partials) {
    let scaled = cfg.alpha_prime * raw_mmd;
    let (l_dis, d_dis_d_mmd) = if scaled < cfg.beta_prime {
        (scaled, cfg.alpha_prime)
    } else {
        (cfg.beta_prime, 0.0)
    };
    let product = cfg.alpha * l_a * l_dis;
    let (penalty, d_la, d_dis) = if product < cfg.beta {
        (product, -cfg.alpha * l_dis, -cfg.alpha * l_a)
    } else {
        (cfg.beta, 0.0, 0.0)
    };
    (
        LossParts {
            l_s,
            l_a,
            l_dis,
            total: l_s - penalty,
        },
        Partials {
            d_la,
            d_mmd: d_dis * d_dis_d_mmd,
        },
    )
}

/// The composite parts from already-computed ingredients.
pub fn ntl_parts(l_s: f64, l_a: f64, raw_mmd: f64, cfg: &NtlConfig) -> LossParts {
    combine(l_s, l_a, raw_mmd, cfg).0
}

/// A labeled mini-batch in network layout.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: ArrayD<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(data: &DomainDataset, indices: &[usize]) -> Self {
        Batch {
            x: data.batch(indices),
            labels: data.batch_labels(indices),
        }
    }
}

/// Evaluates the full objective on a pair of batches in evaluation mode
/// (no dropout).
pub fn ntl_loss(source: &Batch, aux: &Batch, model: &ModelBundle, cfg: &NtlConfig) -> Result<LossParts> {
    Ok(ntl_loss_with_grads(source, aux, model, cfg, LossMode::Ntl, &mut Ctx::deterministic())?.0)
}

/// Loss parts and parameter gradients (layout of [`ModelBundle::params`]).
pub fn ntl_loss_with_grads(
    source: &Batch,
    aux: &Batch,
    model: &ModelBundle,
    cfg: &NtlConfig,
    mode: LossMode,
    ctx: &mut Ctx<'_>,
) -> Result<(LossParts, Grads)> {
    ntl_loss_with_ladder(source, aux, model, cfg, mode, ctx, None).map(|(p, g, _)| (p, g))
}

/// As [`ntl_loss_with_grads`], optionally with a fixed bandwidth ladder.
/// Also returns the ladder that was used.
pub fn ntl_loss_with_ladder(
    source: &Batch,
    aux: &Batch,
    model: &ModelBundle,
    cfg: &NtlConfig,
    mode: LossMode,
    ctx: &mut Ctx<'_>,
    ladder: Option<&[f64]>,
) -> Result<(LossParts, Grads, Vec<f64>)> {
    if source.labels.is_empty() || aux.labels.is_empty() {
        return Err(Error::EmptyInput("NTL batches must be nonempty"));
    }
    if mode != LossMode::Supervised && source.labels.len() != aux.labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "source batch has {} samples, auxiliary batch {}",
            source.labels.len(),
            aux.labels.len()
        )));
    }
    let (z_s, tape_s) = model.forward_train(&source.x, ctx)?;
    let (l_s, gp_s) = kl_class_loss_with_grad(tape_s.probs(), &source.labels)?;
    if mode == LossMode::Supervised {
        let parts = LossParts {
            l_s,
            total: l_s,
            ..Default::default()
        };
        return Ok((parts, model.backward(&tape_s, Some(&gp_s), None), Vec::new()));
    }
    let (z_a, tape_a) = model.forward_train(&aux.x, ctx)?;
    let (l_a, gp_a) = kl_class_loss_with_grad(tape_a.probs(), &aux.labels)?;

    let mut used = Vec::new();
    let (parts, d_la, mmd_grads) = match mode {
        LossMode::Clipped => {
            let total = ntl_star_loss(l_s, l_a, cfg);
            let d_la = if cfg.alpha * l_a < cfg.beta { -cfg.alpha } else { 0.0 };
            let parts = LossParts {
                l_s,
                l_a,
                l_dis: 0.0,
                total,
            };
            (parts, d_la, None)
        }
        _ => {
            let mmd = match ladder {
                Some(b) => mmd_with_bandwidths(&z_s, &z_a, b.to_vec())?,
                None => mmd_exp_with_grad(&z_s, &z_a, &cfg.kernel)?,
            };
            used = mmd.bandwidths.clone();
            let (parts, partials) = combine(l_s, l_a, mmd.value, cfg);
            let grads = (partials.d_mmd != 0.0).then(|| {
                (
                    mmd.grad_a.mapv(|g| g * partials.d_mmd),
                    mmd.grad_b.mapv(|g| g * partials.d_mmd),
                )
            });
            (parts, partials.d_la, grads)
        }
    };
    let (gz_s, gz_a) = match mmd_grads {
        Some((s, a)) => (Some(s), Some(a)),
        None => (None, None),
    };
    let mut grads = model.backward(&tape_s, Some(&gp_s), gz_s.as_ref());
    let gp_a = gp_a.mapv(|g| g * d_la);
    grads.add(&model.backward(&tape_a, Some(&gp_a), gz_a.as_ref()));
    Ok((parts, grads, used))
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_s: f64,
    pub l_a: f64,
    pub l_dis: f64,
    pub total: f64,
    pub source_acc: f64,
    pub aux_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mi: Option<f64>,
}

pub type History = Vec<EpochRecord>;

/// Held-out sets used for the per-epoch accuracies. Without them the
/// training sets themselves are scored.
#[derive(Clone, Copy)]
pub struct EvalSets<'a> {
    pub source: &'a DomainDataset,
    pub aux: &'a DomainDataset,
}

/// Called after every epoch; the returned value lands in [`EpochRecord::mi`].
pub type EpochHook<'a> = &'a dyn Fn(usize, &ModelBundle) -> Result<Option<f64>>;

#[derive(Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    pub mode: LossMode,
    pub eval: Option<EvalSets<'a>>,
    pub hook: Option<EpochHook<'a>>,
}

/// Shuffled cursor over one dataset that reshuffles when exhausted.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cursor { order, pos: 0 }
    }

    fn take(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Gathers an auxiliary batch with equal shares from every part.
fn mixed_batch(parts: &[&DomainDataset], cursors: &mut [Cursor], size: usize, rng: &mut ChaCha8Rng) -> Batch {
    let k = parts.len();
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for (p, (part, cursor)) in parts.iter().zip(cursors.iter_mut()).enumerate() {
        let share = size / k + usize::from(p < size % k);
        if share == 0 {
            continue;
        }
        let idx = cursor.take(share, rng);
        xs.push(part.batch(&idx));
        labels.extend(part.batch_labels(&idx));
    }
    let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
    Batch {
        x: ndarray::concatenate(ndarray::Axis(0), &views).expect("same geometry"),
        labels,
    }
}

/// Target-specified NTL: the auxiliary domain is given.
pub fn train_target_specified(
    source: &DomainDataset,
    aux: &DomainDataset,
    model: ModelBundle,
    cfg: &NtlConfig,
) -> Result<(ModelBundle, History)> {
    train_ntl(source, &[aux], model, cfg, TrainOptions::default())
}

/// Plain supervised training on `source` (the transferable baseline).
pub fn train_supervised(
    source: &DomainDataset,
    model: ModelBundle,
    cfg: &NtlConfig,
    eval: Option<EvalSets<'_>>,
) -> Result<(ModelBundle, History)> {
    let opts = TrainOptions {
        mode: LossMode::Supervised,
        eval,
        hook: None,
    };
    train_ntl(source, &[source], model, cfg, opts)
}

/// The general loop. Every step pairs one source batch with one auxiliary
/// batch of equal size; the auxiliary batch draws equally from each part of
/// `aux`. An epoch covers `min(|source|, Σ|aux|)` samples.
pub fn train_ntl(
    source: &DomainDataset,
    aux: &[&DomainDataset],
    mut model: ModelBundle,
    cfg: &NtlConfig,
    opts: TrainOptions<'_>,
) -> Result<(ModelBundle, History)> {
    cfg.validate()?;
    if source.is_empty() || aux.iter().any(|a| a.is_empty()) || aux.is_empty() {
        return Err(Error::EmptyInput("training domains must be nonempty"));
    }
    for part in aux {
        ensure_compatible(source, part)?;
    }
    if source.num_classes != model.spec.num_classes() {
        return Err(Error::IncompatibleDomains(format!(
            "model has {} classes, source has {}",
            model.spec.num_classes(),
            source.num_classes
        )));
    }
    let mut history = History::new();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut src_cursor = Cursor::new(source.len(), &mut order_rng);
    let mut aux_cursors: Vec<Cursor> = aux.iter().map(|a| Cursor::new(a.len(), &mut order_rng)).collect();
    let aux_total: usize = aux.iter().map(|a| a.len()).sum();
    let per_epoch = if opts.mode == LossMode::Supervised {
        source.len()
    } else {
        source.len().min(aux_total)
    };
    let steps = per_epoch.div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut sums = LossParts::default();
        let mut seen = 0usize;
        for step in 0..steps {
            let size = cfg.batch_size.min(per_epoch - step * cfg.batch_size);
            let src_idx = src_cursor.take(size, &mut order_rng);
            let src_batch = Batch::from_dataset(source, &src_idx);
            let aux_batch = if opts.mode == LossMode::Supervised {
                src_batch.clone()
            } else {
                mixed_batch(aux, &mut aux_cursors, size, &mut order_rng)
            };
            let mut ctx = Ctx {
                train: true,
                rng: Some(&mut dropout_rng),
            };
            let (parts, grads) = ntl_loss_with_grads(&src_batch, &aux_batch, &model, cfg, opts.mode, &mut ctx)?;
            let freezes = model.param_freezes();
            adam.step(model.params_mut(), &grads.tensors, &freezes, None);
            model.train_step_count += 1;
            let w = size as f64;
            sums.l_s += parts.l_s * w;
            sums.l_a += parts.l_a * w;
            sums.l_dis += parts.l_dis * w;
            sums.total += parts.total * w;
            seen += size;
        }
        let (eval_src, eval_aux) = match opts.eval {
            Some(e) => (e.source, e.aux),
            None => (source, aux[0]),
        };
        let mi = match opts.hook {
            Some(hook) => hook(epoch, &model)?,
            None => None,
        };
        let n = seen as f64;
        history.push(EpochRecord {
            epoch,
            l_s: sums.l_s / n,
            l_a: sums.l_a / n,
            l_dis: sums.l_dis / n,
            total: sums.total / n,
            source_acc: model.accuracy(eval_src)?,
            aux_acc: model.accuracy(eval_aux)?,
            mi,
        });
        log::debug!("epoch {epoch}: {:?}", history.last());
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ArchitectureSpec};
    use crate::nn::{softmax, LayerSpec};
    use ndarray::{array, IxDyn};
    use rand::Rng;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_class_loss(&array![[0.0, 1.0, 0.0]], &[1]).unwrap(), 0.0);
        let half = kl_class_loss(&array![[0.5, 0.5]], &[0]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((half - std::f64::consts::LN_2).abs() < 1e-6);
        let uniform = Array2::from_elem((3, 10), 0.1);
        let chance = kl_class_loss(&uniform, &[0, 4, 9]).unwrap();
        assert!((chance - 10f64.ln()).abs() < 1e-12);
        assert!((chance - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn kl_clamps_zero_probability() {
        let loss = kl_class_loss(&array![[1.0, 0.0]], &[1]).unwrap();
        assert!((loss - (-PROB_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_bad_input() {
        assert!(matches!(
            kl_class_loss(&array![[0.7, 0.7]], &[0]),
            Err(Error::InvalidDistribution { row: 0 })
        ));
        assert!(matches!(
            kl_class_loss(&array![[0.5, 0.5]], &[2]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn clipped_objective_examples() {
        let cfg = NtlConfig::default();
        assert!((ntl_star_loss(0.5, 2.0, &cfg) - 0.3).abs() < 1e-15);
        assert_eq!(ntl_star_loss(0.5, 1e12, &cfg), 0.5 - 1.0);
    }

    #[test]
    fn composite_objective_examples() {
        let cfg = NtlConfig::default();
        let parts = ntl_parts(0.5, 2.0, 0.8, &cfg);
        assert!((parts.l_dis - 0.08).abs() < 1e-15);
        assert!((parts.total - 0.484).abs() < 1e-15);
        let collapsed = ntl_parts(0.5, 2.0, 0.0, &cfg);
        assert_eq!(collapsed.total, 0.5);
        let saturated = ntl_parts(0.5, 1e9, 1e9, &cfg);
        assert_eq!(saturated.l_dis, cfg.beta_prime);
        assert_eq!(saturated.total, 0.5 - cfg.beta);
    }

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            name: "grad-check".into(),
            input: [3, 6, 6],
            extractor_layers: vec![
                LayerSpec::Conv {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Tanh,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
            ],
            classifier_layers: vec![8, 3],
            repr_dim: 36,
            dropout: 0.0,
            stage_split: 0,
        }
    }

    fn random_batch(n: usize, rng: &mut ChaCha8Rng) -> Batch {
        Batch {
            x: ArrayD::from_shape_simple_fn(IxDyn(&[n, 3, 6, 6]), || rng.random_range(-1.0..1.0)),
            labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
        }
    }

    #[test]
    fn identical_representations_collapse_to_source_loss() {
        let model = build_model(&small_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_batch(4, &mut rng);
        let mut aux = src.clone();
        aux.labels = vec![0, 1, 2, 0];
        let parts = ntl_loss(&src, &aux, &model, &NtlConfig::default()).unwrap();
        assert!(parts.l_dis.abs() < 1e-12);
        assert!((parts.total - parts.l_s).abs() < 1e-12);
    }

    #[test]
    fn unequal_batches_rejected() {
        let model = build_model(&small_spec(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = ntl_loss(&random_batch(4, &mut rng), &random_batch(3, &mut rng), &model, &NtlConfig::default());
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut model = build_model(&small_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = random_batch(5, &mut rng);
        let aux = random_batch(5, &mut rng);
        // Large α′ keeps the product inside the clip while making the MMD term matter.
        let cfg = NtlConfig {
            alpha: 0.5,
            alpha_prime: 0.5,
            beta: 10.0,
            ..Default::default()
        };
        let (parts, grads, ladder) =
            ntl_loss_with_ladder(&src, &aux, &model, &cfg, LossMode::Ntl, &mut Ctx::deterministic(), None).unwrap();
        assert!(parts.l_dis > 0.0 && parts.l_dis < cfg.beta_prime);
        let h = 1e-4;
        let mut checked = 0;
        for p in 0..grads.tensors.len() {
            let len = model.params()[p].len();
            for idx in [0, len / 3, len - 1] {
                let orig = model.params()[p].as_slice().unwrap()[idx];
                let mut eval = |v: f64| {
                    model.params_mut()[p].as_slice_mut().unwrap()[idx] = v;
                    // Bandwidths carry no gradient, so they stay fixed here.
                    let mut ctx = Ctx::deterministic();
                    ntl_loss_with_ladder(&src, &aux, &model, &cfg, LossMode::Ntl, &mut ctx, Some(&ladder))
                        .unwrap()
                        .0
                        .total
                };
                let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
                eval(orig);
                let analytic = grads.tensors[p].as_slice().unwrap()[idx];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                assert!(rel <= 1e-4, "param {p}[{idx}]: {numeric} vs {analytic}");
                checked += 1;
            }
        }
        assert!(checked >= 12);
    }

    #[test]
    fn total_never_below_clip_bound() {
        let cfg = NtlConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let l_s = rng.random_range(0.0..5.0);
            let l_a = rng.random_range(0.0..30.0);
            let mmd = rng.random_range(0.0..10.0);
            assert!(ntl_parts(l_s, l_a, mmd, &cfg).total >= l_s - cfg.beta);
        }
    }

    #[test]
    fn kl_matches_negative_log_on_random_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let logits = Array2::from_shape_simple_fn((1, 7), || rng.random_range(-4.0..4.0));
            let probs = softmax(&logits);
            let y = rng.random_range(0..7);
            let loss = kl_class_loss(&probs, &[y]).unwrap();
            assert!((loss + probs[[0, y]].ln()).abs() <= 1e-10);
        }
    }
}
