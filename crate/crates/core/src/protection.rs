//! Ownership verification and applicability authorization.
//!
//! Ownership: train with the patched source as the auxiliary domain, so the
//! model fails on patched inputs and the accuracy gap identifies it.
//! Authorization: the patched source is the only domain the model should
//! serve; clean source and generated neighbors (with and without the patch)
//! form the auxiliary domain.

use serde::{Deserialize, Serialize};

use crate::augmentation::{generate_auxiliary, AugConfig};
use crate::domains::{apply_patch, DomainDataset, PatchSpec};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::objective::{train_ntl, EvalSets, History, NtlConfig, TrainOptions};

pub const DEFAULT_VERIFY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub acc_without_patch: f64,
    pub acc_with_patch: f64,
    pub gap: f64,
    pub threshold: f64,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorizationCell {
    pub domain: String,
    pub patched: bool,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuthorizationReport {
    pub authorized_acc: f64,
    pub unauthorized: Vec<AuthorizationCell>,
    pub max_unauthorized: f64,
}

impl AuthorizationReport {
    pub fn unauthorized_accs(&self) -> Vec<f64> {
        self.unauthorized.iter().map(|c| c.accuracy).collect()
    }
}

/// The patched copy of `data`, tagged as an auxiliary domain.
fn patched(data: &DomainDataset, patch: &PatchSpec) -> DomainDataset {
    apply_patch(data, patch).with_tag(1)
}

/// Target-specified training against the patched source. `source_test`, when
/// given, is scored clean and patched after every epoch.
pub fn train_ownership(
    source: &DomainDataset,
    patch: &PatchSpec,
    model: ModelBundle,
    cfg: &NtlConfig,
    source_test: Option<&DomainDataset>,
) -> Result<(ModelBundle, History)> {
    if patch.is_identity() {
        return Err(Error::DegenerateAuxiliary);
    }
    let aux = patched(source, patch);
    let eval_aux = source_test.map(|t| patched(t, patch));
    let opts = TrainOptions {
        eval: source_test.zip(eval_aux.as_ref()).map(|(s, a)| EvalSets { source: s, aux: a }),
        ..Default::default()
    };
    train_ntl(source, &[&aux], model, cfg, opts)
}

pub fn verify_ownership(
    model: &ModelBundle,
    source_test: &DomainDataset,
    patch: &PatchSpec,
    threshold: f64,
) -> Result<VerificationReport> {
    let acc_without_patch = model.accuracy(source_test)?;
    let acc_with_patch = model.accuracy(&apply_patch(source_test, patch))?;
    let gap = acc_without_patch - acc_with_patch;
    Ok(VerificationReport {
        acc_without_patch,
        acc_with_patch,
        gap,
        threshold,
        verified: gap >= threshold,
    })
}

/// Authorization training from an already generated neighborhood.
///
/// The authorized domain is the patched source. Each auxiliary batch holds
/// equal thirds of clean source, `generated`, and patched `generated`.
pub fn train_authorized_with_aux(
    source: &DomainDataset,
    generated: &DomainDataset,
    patch: &PatchSpec,
    model: ModelBundle,
    cfg: &NtlConfig,
    source_test: Option<&DomainDataset>,
) -> Result<(ModelBundle, History)> {
    if patch.is_identity() {
        return Err(Error::DegenerateAuxiliary);
    }
    let authorized = apply_patch(source, patch).with_tag(0);
    let clean = source.clone().with_tag(1);
    let generated = generated.clone().with_tag(1);
    let generated_patched = patched(&generated, patch);
    let eval = source_test.map(|t| (apply_patch(t, patch), t.clone()));
    let opts = TrainOptions {
        eval: eval.as_ref().map(|(s, a)| EvalSets { source: s, aux: a }),
        ..Default::default()
    };
    train_ntl(&authorized, &[&clean, &generated, &generated_patched], model, cfg, opts)
}

/// Generates the neighborhood with `aug_cfg`, then trains for authorization.
pub fn train_authorized(
    source: &DomainDataset,
    patch: &PatchSpec,
    aug_cfg: &AugConfig,
    model: ModelBundle,
    cfg: &NtlConfig,
) -> Result<(ModelBundle, History)> {
    aug_cfg.validate()?;
    cfg.validate()?;
    let generated = generate_auxiliary(source, aug_cfg)?;
    train_authorized_with_aux(source, &generated, patch, model, cfg, None)
}

/// Source-only training: the generated neighborhood is the auxiliary domain.
pub fn train_source_only(
    source: &DomainDataset,
    generated: &DomainDataset,
    model: ModelBundle,
    cfg: &NtlConfig,
    eval: Option<EvalSets<'_>>,
) -> Result<(ModelBundle, History)> {
    let opts = TrainOptions {
        eval,
        ..Default::default()
    };
    train_ntl(source, &[generated], model, cfg, opts)
}

/// Scores every `(domain, patch state)` pair. The first domain is the
/// source; its patched version is the authorized cell.
pub fn evaluate_authorization(
    model: &ModelBundle,
    domains: &[&DomainDataset],
    patch: &PatchSpec,
) -> Result<AuthorizationReport> {
    let first = domains.first().ok_or(Error::EmptyInput("no domains to evaluate"))?;
    if let Some(other) = domains.iter().find(|d| d.num_classes != first.num_classes) {
        return Err(Error::IncompatibleDomains(format!(
            "{} has {} classes, {} has {}",
            first.name, first.num_classes, other.name, other.num_classes
        )));
    }
    let mut authorized_acc = 0.0;
    let mut unauthorized = Vec::new();
    for (i, domain) in domains.iter().enumerate() {
        for patched in [true, false] {
            let accuracy = if patched {
                model.accuracy(&apply_patch(domain, patch))?
            } else {
                model.accuracy(domain)?
            };
            if i == 0 && patched {
                authorized_acc = accuracy;
            } else {
                unauthorized.push(AuthorizationCell {
                    domain: domain.name.clone(),
                    patched,
                    accuracy,
                });
            }
        }
    }
    let max_unauthorized = unauthorized.iter().map(|c| c.accuracy).fold(0.0, f64::max);
    Ok(AuthorizationReport {
        authorized_acc,
        unauthorized,
        max_unauthorized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::{make_synthetic_domain_pair, SyntheticShiftSpec, SyntheticSizes};
    use crate::models::{build_model, ArchitectureSpec};

    fn pair() -> (DomainDataset, DomainDataset) {
        let sizes = SyntheticSizes {
            image_size: 16,
            train: 40,
            test: 0,
        };
        make_synthetic_domain_pair(3, &SyntheticShiftSpec::strong_tint(), &sizes).unwrap()
    }

    fn model() -> ModelBundle {
        build_model(&ArchitectureSpec::tiny([3, 16, 16], 10).unwrap(), 1).unwrap()
    }

    #[test]
    fn identity_patch_is_degenerate() {
        let (src, _) = pair();
        let err = train_ownership(&src, &PatchSpec::new(0), model(), &NtlConfig::default(), None);
        assert!(matches!(err, Err(Error::DegenerateAuxiliary)));
    }

    #[test]
    fn verification_threshold_is_recorded() {
        let (src, _) = pair();
        let report = verify_ownership(&model(), &src, &PatchSpec::DIGITS, 0.5).unwrap();
        assert_eq!(report.threshold, 0.5);
        assert!(!report.verified);
        assert!((report.gap - (report.acc_without_patch - report.acc_with_patch)).abs() < 1e-15);
    }

    #[test]
    fn authorization_grid_shape() {
        let (src, tgt) = pair();
        let m = model();
        let single = evaluate_authorization(&m, &[&src], &PatchSpec::DIGITS).unwrap();
        assert_eq!(single.unauthorized.len(), 1);
        assert!(!single.unauthorized[0].patched);
        let both = evaluate_authorization(&m, &[&src, &tgt], &PatchSpec::DIGITS).unwrap();
        assert_eq!(both.unauthorized.len(), 3);
        assert!(both.unauthorized_accs().iter().all(|a| (0.0..=1.0).contains(a)));
        // Pure evaluation: a second pass is bit-identical.
        assert_eq!(both, evaluate_authorization(&m, &[&src, &tgt], &PatchSpec::DIGITS).unwrap());
    }

    #[test]
    fn empty_distance_list_rejected() {
        let (src, _) = pair();
        let aug = AugConfig {
            dis_list: vec![],
            ..Default::default()
        };
        let err = train_authorized(&src, &PatchSpec::DIGITS, &aug, model(), &NtlConfig::default());
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
    }
}
