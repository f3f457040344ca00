//! Watermark-removal attacks: four fine-tuning variants, backdoor
//! overwriting, and layer-wise magnitude pruning.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::error::{Error, Result};
use crate::models::{ModelBundle, DEFAULT_BATCH_SIZE};
use crate::nn::{Adam, AdamConfig, Ctx, LayerSpec};
use crate::objective::{kl_class_loss_with_grad, Batch};
use crate::protection::VerificationReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    /// Fine-tune all layers.
    Ftal,
    /// Re-initialize the classifier, then fine-tune all layers.
    Rtal,
    /// Fine-tune with Fisher-damped learning rates.
    Ewc,
    /// Fine-tune on attacker data plus pseudo-labeled other-domain data.
    Au,
    /// Embed a new corner-trigger backdoor.
    Overwrite,
    /// Layer-wise magnitude pruning.
    Prune,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 6] = [
        AttackMethod::Ftal,
        AttackMethod::Rtal,
        AttackMethod::Ewc,
        AttackMethod::Au,
        AttackMethod::Overwrite,
        AttackMethod::Prune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Ftal => "ftal",
            AttackMethod::Rtal => "rtal",
            AttackMethod::Ewc => "ewc",
            AttackMethod::Au => "au",
            AttackMethod::Overwrite => "overwrite",
            AttackMethod::Prune => "prune",
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// Share of the training set available to the attacker.
    pub data_fraction: f64,
    pub epochs: usize,
    pub prune_ratio: f64,
    pub poison_fraction: f64,
    /// Side of the white square stamped in the bottom-right corner.
    pub trigger_size: usize,
    pub target_label: usize,
    /// Pseudo-labeled samples per attacker sample.
    pub unlabeled_ratio: f64,
    pub ewc_lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            method: AttackMethod::Ftal,
            data_fraction: 0.3,
            epochs: 50,
            prune_ratio: 0.7,
            poison_fraction: 1.0 / 15.0,
            trigger_size: 3,
            target_label: 0,
            unlabeled_ratio: 1.0,
            ewc_lambda: 1.0,
            learning_rate: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 2021,
        }
    }
}

impl AttackConfig {
    pub fn with_method(method: AttackMethod) -> Self {
        AttackConfig {
            method,
            ..Default::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let name = self.method.name();
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            v.push(format!("attack[{name}].data_fraction must lie in (0, 1]"));
        }
        if !(self.prune_ratio > 0.0 && self.prune_ratio < 1.0) {
            v.push(format!("attack[{name}].prune_ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            v.push(format!("attack[{name}].poison_fraction must lie in [0, 1]"));
        }
        if !(self.unlabeled_ratio > 0.0 && self.unlabeled_ratio <= 1.0) {
            v.push(format!("attack[{name}].unlabeled_ratio must lie in (0, 1]"));
        }
        if self.ewc_lambda < 0.0 {
            v.push(format!("attack[{name}].ewc_lambda must be >= 0"));
        }
        if !(self.learning_rate > 0.0) {
            v.push(format!("attack[{name}].learning_rate must be > 0"));
        }
        if self.batch_size == 0 || self.trigger_size == 0 {
            v.push(format!("attack[{name}].batch_size and trigger_size must be >= 1"));
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

/// Plain supervised fine-tuning with optional per-entry step scaling.
fn fine_tune(
    mut model: ModelBundle,
    data: &DomainDataset,
    cfg: &AttackConfig,
    lr_scale: Option<&[ArrayD<f64>]>,
) -> Result<ModelBundle> {
    if cfg.epochs == 0 || data.is_empty() {
        return Ok(model);
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_dataset(data, chunk);
            let mut ctx = Ctx {
                train: true,
                rng: Some(&mut dropout_rng),
            };
            let (_, tape) = model.forward_train(&batch.x, &mut ctx)?;
            let (_, gp) = kl_class_loss_with_grad(tape.probs(), &batch.labels)?;
            let grads = model.backward(&tape, Some(&gp), None);
            let freezes = model.param_freezes();
            adam.step(model.params_mut(), &grads.tensors, &freezes, lr_scale);
            model.train_step_count += 1;
        }
    }
    Ok(model)
}

/// Diagonal empirical Fisher: mean of per-sample squared gradients of the
/// classification loss, in evaluation mode.
pub fn diagonal_fisher(model: &ModelBundle, data: &DomainDataset) -> Result<Vec<ArrayD<f64>>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("Fisher estimate needs samples"));
    }
    let mut acc = model.zero_grads();
    for i in 0..data.len() {
        let batch = Batch::from_dataset(data, &[i]);
        let (_, tape) = model.forward_train(&batch.x, &mut Ctx::eval())?;
        let (_, gp) = kl_class_loss_with_grad(tape.probs(), &batch.labels)?;
        acc.add(&model.backward(&tape, Some(&gp), None).squared());
    }
    acc.scale(1.0 / data.len() as f64);
    Ok(acc.tensors)
}

/// The attacker's share of `train`, class-stratified.
pub fn attacker_subset(train: &DomainDataset, cfg: &AttackConfig) -> DomainDataset {
    if cfg.data_fraction >= 1.0 {
        return train.clone();
    }
    train.stratified_fraction(cfg.data_fraction, cfg.seed)
}

/// Fine-tuning attacks. `train` is the full training set, of which the
/// attacker sees `data_fraction`. `other_domain` supplies the unlabeled
/// samples for `au`.
pub fn finetune_attack(
    model: &ModelBundle,
    train: &DomainDataset,
    other_domain: Option<&DomainDataset>,
    cfg: &AttackConfig,
) -> Result<ModelBundle> {
    cfg.validate()?;
    let data = attacker_subset(train, cfg);
    let mut model = model.clone();
    match cfg.method {
        AttackMethod::Ftal => fine_tune(model, &data, cfg, None),
        AttackMethod::Rtal => {
            model.reinit_classifier(cfg.seed)?;
            fine_tune(model, &data, cfg, None)
        }
        AttackMethod::Ewc => {
            let fisher = diagonal_fisher(&model, &data)?;
            let scale: Vec<ArrayD<f64>> = fisher
                .into_iter()
                .map(|f| f.mapv(|v| 1.0 / (1.0 + cfg.ewc_lambda * v)))
                .collect();
            fine_tune(model, &data, cfg, Some(&scale))
        }
        AttackMethod::Au => {
            let other = other_domain.ok_or(Error::EmptyInput("the au attack needs other-domain samples"))?;
            if other.is_empty() {
                return Err(Error::EmptyInput("the au attack needs other-domain samples"));
            }
            let want = ((data.len() as f64) * cfg.unlabeled_ratio).round() as usize;
            let mut idx: Vec<usize> = (0..other.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5));
            idx.truncate(want.min(other.len()));
            let pool = other.subset(&idx);
            let pseudo = model.predict(&pool)?;
            let pool = DomainDataset::new(
                format!("{}+pseudo", pool.name),
                pool.shape,
                pool.num_classes,
                pool.domain_tag,
                pool.images().to_vec(),
                pseudo,
            )?;
            let union = DomainDataset::concat(format!("{}+au", data.name), &[&data, &pool], data.domain_tag)?;
            fine_tune(model, &union, cfg, None)
        }
        other => Err(Error::UnknownMethod(format!("{other} is not a fine-tuning attack"))),
    }
}

/// Stamps the white corner trigger into every image of `data`.
pub fn stamp_trigger(data: &DomainDataset, size: usize) -> DomainDataset {
    let indices: Vec<usize> = (0..data.len()).collect();
    stamp_subset(data, &indices, size, None)
}

fn stamp_subset(data: &DomainDataset, indices: &[usize], size: usize, relabel: Option<usize>) -> DomainDataset {
    let shape = data.shape;
    let mut images = data.images().to_vec();
    let mut labels = data.labels().to_vec();
    let size = size.min(shape.height).min(shape.width);
    for &i in indices {
        let img = &mut images[i * shape.pixels()..(i + 1) * shape.pixels()];
        for y in shape.height - size..shape.height {
            for x in shape.width - size..shape.width {
                let at = (y * shape.width + x) * shape.channels;
                img[at..at + shape.channels].fill(255);
            }
        }
        if let Some(t) = relabel {
            labels[i] = t;
        }
    }
    let mut out = DomainDataset::new(
        format!("{}+corner", data.name),
        shape,
        data.num_classes,
        data.domain_tag,
        images,
        labels,
    )
    .expect("geometry preserved");
    out.provenance = data.provenance.clone();
    out
}

/// Embeds a new backdoor: `poison_fraction` of the attacker data gets the
/// corner trigger and the target label, then the model is fine-tuned.
pub fn overwrite_attack(model: &ModelBundle, train: &DomainDataset, cfg: &AttackConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    if cfg.target_label >= train.num_classes {
        return Err(Error::LabelOutOfRange {
            label: cfg.target_label,
            num_classes: train.num_classes,
        });
    }
    let data = attacker_subset(train, cfg);
    let count = ((data.len() as f64) * cfg.poison_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A));
    idx.truncate(count);
    let poisoned = stamp_subset(&data, &idx, cfg.trigger_size, Some(cfg.target_label));
    fine_tune(model.clone(), &poisoned, cfg, None)
}

/// Share of triggered non-target test samples classified as the target.
pub fn trigger_accuracy(model: &ModelBundle, test: &DomainDataset, cfg: &AttackConfig) -> Result<f64> {
    let keep: Vec<usize> = (0..test.len()).filter(|&i| test.labels()[i] != cfg.target_label).collect();
    if keep.is_empty() {
        return Err(Error::EmptyInput("no non-target samples to trigger"));
    }
    let stamped = stamp_trigger(&test.subset(&keep), cfg.trigger_size);
    let pred = model.predict(&stamped)?;
    Ok(pred.iter().filter(|&&p| p == cfg.target_label).count() as f64 / pred.len() as f64)
}

/// Zeroes, in every convolutional and linear layer, the `⌊ratio·count⌋`
/// weights of smallest magnitude. Biases are left alone.
pub fn prune_attack(model: &ModelBundle, cfg: &AttackConfig) -> Result<ModelBundle> {
    if !(cfg.prune_ratio > 0.0 && cfg.prune_ratio < 1.0) {
        return Err(Error::InvalidConfig(vec!["prune_ratio must lie in (0, 1)".into()]));
    }
    let mut out = model.clone();
    for net in [&mut out.extractor, &mut out.classifier] {
        for layer in net.layers_mut() {
            if !matches!(layer.spec, LayerSpec::Conv { .. } | LayerSpec::Linear { .. }) {
                continue;
            }
            let Some(w) = layer.weight.as_mut() else { continue };
            let values = w.as_slice_mut().expect("contiguous weights");
            let k = (cfg.prune_ratio * values.len() as f64).floor() as usize;
            let mut order: Vec<usize> = (0..values.len()).collect();
            order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
            for &i in &order[..k] {
                values[i] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Dispatches any of the six attacks.
pub fn run_attack(
    model: &ModelBundle,
    train: &DomainDataset,
    other_domain: Option<&DomainDataset>,
    cfg: &AttackConfig,
) -> Result<ModelBundle> {
    match cfg.method {
        AttackMethod::Overwrite => overwrite_attack(model, train, cfg),
        AttackMethod::Prune => prune_attack(model, cfg),
        _ => finetune_attack(model, train, other_domain, cfg),
    }
}

/// Verification before and after one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub method: AttackMethod,
    pub config: AttackConfig,
    pub before: VerificationReport,
    pub after: VerificationReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_accuracy: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes};
    use crate::models::{build_model, ArchitectureSpec};

    fn setup() -> (ModelBundle, DomainDataset, DomainDataset) {
        let sizes = SyntheticSizes {
            image_size: 16,
            train: 40,
            test: 0,
        };
        let (s, t) = make_synthetic_domain_pair(3, &SyntheticShiftSpec::strong_tint(), &sizes).unwrap();
        let m = build_model(&ArchitectureSpec::tiny([3, 16, 16], 10).unwrap(), 1).unwrap();
        (m, s, t)
    }

    #[test]
    fn method_names_round_trip() {
        for m in AttackMethod::ALL {
            assert_eq!(m.name().parse::<AttackMethod>().unwrap(), m);
        }
        assert!(matches!("distill".parse::<AttackMethod>(), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (m, s, t) = setup();
        for method in [AttackMethod::Ftal, AttackMethod::Ewc, AttackMethod::Au] {
            let cfg = AttackConfig {
                epochs: 0,
                ..AttackConfig::with_method(method)
            };
            let out = run_attack(&m, &s, Some(&t), &cfg).unwrap();
            assert_eq!(out.params(), m.params());
        }
    }

    #[test]
    fn prune_counts_per_layer() {
        let (m, _, _) = setup();
        let cfg = AttackConfig::with_method(AttackMethod::Prune);
        let pruned = prune_attack(&m, &cfg).unwrap();
        for net in [&pruned.extractor, &pruned.classifier] {
            for layer in net.layers() {
                if let Some(w) = &layer.weight {
                    let zeros = w.iter().filter(|&&v| v == 0.0).count();
                    assert_eq!(zeros, (0.7 * w.len() as f64).floor() as usize);
                }
            }
        }
        let tiny = AttackConfig {
            prune_ratio: 1e-9,
            ..cfg
        };
        assert_eq!(prune_attack(&m, &tiny).unwrap().params(), m.params());
    }

    #[test]
    fn attacks_are_reproducible() {
        let (m, s, t) = setup();
        for method in AttackMethod::ALL {
            let cfg = AttackConfig {
                epochs: 1,
                data_fraction: 0.5,
                ..AttackConfig::with_method(method)
            };
            let a = run_attack(&m, &s, Some(&t), &cfg).unwrap();
            let b = run_attack(&m, &s, Some(&t), &cfg).unwrap();
            assert_eq!(a.params(), b.params(), "{method}");
        }
    }

    #[test]
    fn zero_poison_matches_ftal() {
        let (m, s, _) = setup();
        let cfg = AttackConfig {
            epochs: 1,
            poison_fraction: 0.0,
            ..AttackConfig::with_method(AttackMethod::Overwrite)
        };
        let over = overwrite_attack(&m, &s, &cfg).unwrap();
        let ftal = finetune_attack(&m, &s, None, &AttackConfig { method: AttackMethod::Ftal, ..cfg }).unwrap();
        assert_eq!(over.params(), ftal.params());
    }

    #[test]
    fn trigger_is_a_white_corner() {
        let (_, s, _) = setup();
        let stamped = stamp_trigger(&s, 3);
        let img = stamped.image(0);
        assert!(img[(15 * 16 + 15) * 3..].iter().all(|&v| v == 255));
        assert_eq!(img[..3], s.image(0)[..3]);
        assert_eq!(stamped.labels(), s.labels());
    }

    #[test]
    fn au_requires_other_domain() {
        let (m, s, _) = setup();
        let err = finetune_attack(&m, &s, None, &AttackConfig::with_method(AttackMethod::Au));
        assert!(matches!(err, Err(Error::EmptyInput(_))));
    }
}
