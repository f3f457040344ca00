//! Experiment configuration, orchestration, run directories and reports.
//!
//! A run directory looks like
//!
//! ```text
//! <output_dir>/<UTC timestamp>-<mode>/
//!   config.toml          snapshot of the experiment config
//!   summary.json         mean and sample deviation of every metric over seeds
//!   report.txt           rendered tables
//!   report.csv
//!   seed-<s>/
//!     history.jsonl      one record per epoch
//!     report.json        metrics for this seed
//!     model.ckpt
//!     supervised.ckpt    ownership runs only
//!     aux/               generated auxiliary domain, source-only and authorization runs
//! ```
//!
//! `NTL_OUTPUT_DIR` overrides `output_dir`; `NTL_THREADS` lets seeds run in
//! parallel (default 1).

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, trigger_accuracy, AttackConfig, AttackMethod, AttackReport};
use crate::augmentation::{augment_with_gan, train_gan, AugConfig, CellReport};
use crate::domains::{
    ingest_dataset, make_synthetic_domain_pair, save_dataset, DatasetManifest, DomainDataset, PatchSpec,
    SyntheticShiftSpec, SyntheticSizes,
};
use crate::error::{Error, Result, ResultExt};
use crate::models::{build_model, ArchitectureSpec, ModelBundle};
use crate::objective::{train_ntl, EpochRecord, EvalSets, History, LossMode, NtlConfig, TrainOptions};
use crate::probe::{probe_mi, ProbeConfig};
use crate::protection::{
    evaluate_authorization, train_authorized_with_aux, train_ownership, train_source_only, verify_ownership,
    AuthorizationReport, VerificationReport, DEFAULT_VERIFY_THRESHOLD,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    TargetSpecified,
    SourceOnly,
    Ownership,
    Authorization,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::TargetSpecified => "target-specified",
            Mode::SourceOnly => "source-only",
            Mode::Ownership => "ownership",
            Mode::Authorization => "authorization",
        }
    }
}

/// One dataset read through [`ingest_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRef {
    pub name: String,
    #[serde(default)]
    pub root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// The glyph pair; the first `train` samples of each domain train, the rest test.
    Synthetic {
        data_seed: u64,
        image_size: usize,
        train: usize,
        test: usize,
        shift: SyntheticShiftSpec,
    },
    Ingest {
        source: IngestRef,
        source_test: IngestRef,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<IngestRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_test: Option<IngestRef>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            data_seed: 2021,
            image_size: 16,
            train: 2000,
            test: 500,
            shift: SyntheticShiftSpec::strong_tint(),
        }
    }
}

/// Train and test splits of the source and, optionally, target domains.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source_train: DomainDataset,
    pub source_test: DomainDataset,
    pub target_train: Option<DomainDataset>,
    pub target_test: Option<DomainDataset>,
}

impl DatasetSpec {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            DatasetSpec::Synthetic {
                image_size,
                train,
                test,
                shift,
                ..
            } => {
                if *image_size < 8 {
                    v.push("dataset.image_size must be >= 8".into());
                }
                if *train == 0 || *test == 0 {
                    v.push("dataset.train and dataset.test must be >= 1".into());
                }
                if let Err(e) = shift.validate() {
                    v.push(format!("dataset.shift: {e}"));
                }
            }
            DatasetSpec::Ingest {
                target, target_test, ..
            } => {
                if target.is_some() != target_test.is_some() {
                    v.push("dataset.target and dataset.target_test must be given together".into());
                }
            }
        }
        v
    }

    fn has_target(&self) -> bool {
        match self {
            DatasetSpec::Synthetic { .. } => true,
            DatasetSpec::Ingest { target, .. } => target.is_some(),
        }
    }

    pub fn load(&self) -> Result<Domains> {
        match self {
            DatasetSpec::Synthetic {
                data_seed,
                image_size,
                train,
                test,
                shift,
            } => {
                let sizes = SyntheticSizes {
                    image_size: *image_size,
                    train: *train,
                    test: *test,
                };
                let (source, target) = make_synthetic_domain_pair(*data_seed, shift, &sizes)?;
                let (source_train, source_test) = source.split_at(*train);
                let (target_train, target_test) = target.split_at(*train);
                Ok(Domains {
                    source_train,
                    source_test,
                    target_train: Some(target_train),
                    target_test: Some(target_test),
                })
            }
            DatasetSpec::Ingest {
                source,
                source_test,
                target,
                target_test,
            } => {
                let load = |r: &IngestRef, tag: u8| {
                    ingest_dataset(&r.name, &r.root)
                        .map(|d| d.with_tag(tag))
                        .context(|| format!("loading dataset `{}` from {}", r.name, r.root.display()))
                };
                Ok(Domains {
                    source_train: load(source, 0)?,
                    source_test: load(source_test, 0)?,
                    target_train: target.as_ref().map(|t| load(t, 1)).transpose()?,
                    target_test: target_test.as_ref().map(|t| load(t, 1)).transpose()?,
                })
            }
        }
    }
}

/// Per-epoch MI tracing between the two evaluation domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub per_epoch: bool,
    pub config: ProbeConfig,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            per_epoch: true,
            config: ProbeConfig::default(),
        }
    }
}

fn default_threshold() -> f64 {
    DEFAULT_VERIFY_THRESHOLD
}

fn default_arch() -> String {
    "tiny".into()
}

/// The whole experiment. Per-run seeds replace the `seed` fields of the
/// sub-configs and also seed model initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_threshold")]
    pub verify_threshold: f64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub ntl: NtlConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aug: Option<AugConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<PatchSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeSettings>,
}

impl ExperimentConfig {
    pub fn new(mode: Mode) -> Self {
        ExperimentConfig {
            mode,
            seeds: vec![2021, 2022, 2023],
            output_dir: PathBuf::from("runs"),
            arch: default_arch(),
            verify_threshold: DEFAULT_VERIFY_THRESHOLD,
            dataset: DatasetSpec::default(),
            ntl: NtlConfig::default(),
            aug: None,
            patch: None,
            attacks: Vec::new(),
            probe: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(vec![e.message().to_string()]))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Every violated field, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".into());
        }
        if self.arch != "tiny" {
            v.push(format!("arch `{}` is not supported (expected `tiny`)", self.arch));
        }
        if !(self.verify_threshold > 0.0 && self.verify_threshold <= 1.0) {
            v.push("verify_threshold must lie in (0, 1]".into());
        }
        v.extend(self.dataset.violations());
        v.extend(self.ntl.violations());
        if let Some(aug) = &self.aug {
            v.extend(aug.violations());
        }
        let needs_patch = matches!(self.mode, Mode::Ownership | Mode::Authorization);
        match &self.patch {
            None if needs_patch => v.push(format!("mode {} requires [patch]", self.mode.name())),
            Some(p) if needs_patch && p.is_identity() => v.push("patch.increment must be > 0".into()),
            Some(p) if p.channel > 2 => v.push("patch.channel must be 0, 1 or 2".into()),
            _ => {}
        }
        if matches!(self.mode, Mode::SourceOnly | Mode::Authorization) && self.aug.is_none() {
            v.push(format!("mode {} requires [aug]", self.mode.name()));
        }
        if self.mode == Mode::TargetSpecified && !self.dataset.has_target() {
            v.push("mode target-specified requires a target domain".into());
        }
        if !self.attacks.is_empty() && self.mode != Mode::Ownership {
            v.push("[[attacks]] only apply to ownership runs".into());
        }
        if self
            .attacks
            .iter()
            .any(|a| a.method == AttackMethod::Au && !self.dataset.has_target())
        {
            v.push("the au attack needs a target domain for unlabeled samples".into());
        }
        for a in &self.attacks {
            v.extend(a.violations());
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

    /// Applies `NTL_OUTPUT_DIR` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(dir) = std::env::var("NTL_OUTPUT_DIR") {
            if !dir.is_empty() {
                self.output_dir = PathBuf::from(dir);
            }
        }
        self
    }

    /// Sets one dotted key (`ntl.epochs`, `patch.increment`, `seeds`) from a
    /// TOML literal or a bare string.
    pub fn set_key(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::format("config", e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().ok_or_else(|| Error::InvalidConfig(vec!["empty key".into()]))?;
        let mut table = &mut doc;
        for part in path {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(vec![format!("`{part}` in `{key}` is not a table")]))?;
        }
        table.insert(last.to_string(), parsed);
        let text = toml::to_string(&doc).map_err(|e| Error::format("config", e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(mut v) => {
                v.insert(0, format!("while setting `{key}`"));
                Error::InvalidConfig(v)
            }
            other => other,
        })
    }

    fn architecture(&self, data: &DomainDataset) -> Result<ArchitectureSpec> {
        ArchitectureSpec::tiny(data.shape.chw(), data.num_classes)
    }
}

/// Metrics for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub mode: Mode,
    pub epochs: usize,
    pub source_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_verification: Option<VerificationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub authorization: Option<AuthorizationReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux_cells: Vec<CellReport>,
}

impl SeedReport {
    /// Every scalar metric, in a stable order.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut m = vec![("source_acc".to_string(), self.source_acc)];
        if let Some(t) = self.target_acc {
            m.push(("target_acc".into(), t));
        }
        if let Some(v) = &self.baseline_verification {
            m.push(("supervised_with_patch".into(), v.acc_with_patch));
            m.push(("supervised_without_patch".into(), v.acc_without_patch));
        }
        if let Some(v) = &self.verification {
            m.push(("ntl_with_patch".into(), v.acc_with_patch));
            m.push(("ntl_without_patch".into(), v.acc_without_patch));
            m.push(("ntl_gap".into(), v.gap));
        }
        for a in &self.attacks {
            m.push((format!("{}_with_patch", a.method), a.after.acc_with_patch));
            m.push((format!("{}_without_patch", a.method), a.after.acc_without_patch));
            m.push((format!("{}_gap", a.method), a.after.gap));
        }
        if let Some(a) = &self.authorization {
            m.push(("authorized_acc".into(), a.authorized_acc));
            m.push(("max_unauthorized".into(), a.max_unauthorized));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricSummary>,
}

pub fn summarize(mode: Mode, reports: &[SeedReport]) -> Summary {
    let mut names: Vec<String> = Vec::new();
    for r in reports {
        for (name, _) in r.metrics() {
            if !names.contains(&name) {
                names.push(name);
            }
        }
    }
    let metrics = names
        .into_iter()
        .map(|name| {
            let values: Vec<f64> = reports
                .iter()
                .filter_map(|r| r.metrics().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            MetricSummary { name, mean, std, n }
        })
        .collect();
    Summary {
        mode,
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
    }
}

/// Everything one seed produced, in memory.
#[derive(Debug, Clone)]
pub struct SeedArtifacts {
    pub report: SeedReport,
    pub history: History,
    pub model: ModelBundle,
    pub baseline: Option<ModelBundle>,
    pub aux: Option<DomainDataset>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub seeds: Vec<SeedReport>,
    pub summary: Summary,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for record in history {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<History> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn seeded<T: Clone>(value: &T, set: impl FnOnce(&mut T)) -> T {
    let mut v = value.clone();
    set(&mut v);
    v
}

/// Runs one seed of the experiment entirely in memory.
pub fn run_seed(config: &ExperimentConfig, domains: &Domains, seed: u64) -> Result<SeedArtifacts> {
    let Domains {
        source_train,
        source_test,
        target_train,
        target_test,
    } = domains;
    let ntl = seeded(&config.ntl, |c| c.seed = seed);
    let arch = config.architecture(source_train)?;
    let model = build_model(&arch, seed)?;
    let probe = config.probe.filter(|p| p.per_epoch);
    let mut report = SeedReport {
        seed,
        mode: config.mode,
        epochs: ntl.epochs,
        source_acc: 0.0,
        target_acc: None,
        verification: None,
        baseline_verification: None,
        attacks: Vec::new(),
        authorization: None,
        aux_cells: Vec::new(),
    };
    let mi_hook = |a: DomainDataset, b: DomainDataset| {
        move |epoch: usize, m: &ModelBundle| -> Result<Option<f64>> {
            let Some(p) = probe else { return Ok(None) };
            let z0 = m.embed_and_predict(&a)?.0;
            let z1 = m.embed_and_predict(&b)?.0;
            Ok(Some(probe_mi(&z0, &z1, seed.wrapping_add(epoch as u64), &p.config)?.value))
        }
    };
    let generate = |source: &DomainDataset| -> Result<(DomainDataset, Vec<CellReport>)> {
        let aug = seeded(config.aug.as_ref().expect("validated"), |c| c.seed = seed);
        let gan = train_gan(source, &aug).context(|| "training the GAN".into())?;
        augment_with_gan(&gan, source, &aug).context(|| "generating the auxiliary domain".into())
    };

    let (model, history, baseline, aux) = match config.mode {
        Mode::Supervised | Mode::TargetSpecified => {
            let mode = if config.mode == Mode::Supervised {
                LossMode::Supervised
            } else {
                LossMode::Ntl
            };
            let aux_train = target_train.as_ref().unwrap_or(source_train);
            let aux_test = target_test.as_ref().unwrap_or(source_test);
            let hook = mi_hook(source_test.clone(), aux_test.clone());
            let opts = TrainOptions {
                mode,
                eval: Some(EvalSets {
                    source: source_test,
                    aux: aux_test,
                }),
                hook: Some(&hook),
            };
            let (m, h) = train_ntl(source_train, &[aux_train], model, &ntl, opts)?;
            (m, h, None, None)
        }
        Mode::SourceOnly => {
            let (aux, cells) = generate(source_train)?;
            report.aux_cells = cells;
            let eval_aux = target_test.as_ref().unwrap_or(source_test);
            let (m, h) = train_source_only(
                source_train,
                &aux,
                model,
                &ntl,
                Some(EvalSets {
                    source: source_test,
                    aux: eval_aux,
                }),
            )?;
            (m, h, None, Some(aux))
        }
        Mode::Ownership => {
            let patch = config.patch.expect("validated");
            let (m, h) = train_ownership(source_train, &patch, model, &ntl, Some(source_test))?;
            let sup_opts = TrainOptions {
                mode: LossMode::Supervised,
                ..Default::default()
            };
            let (sup, _) = train_ntl(source_train, &[source_train], build_model(&arch, seed)?, &ntl, sup_opts)
                .context(|| "training the supervised baseline".into())?;
            report.baseline_verification = Some(verify_ownership(&sup, source_test, &patch, config.verify_threshold)?);
            let before = verify_ownership(&m, source_test, &patch, config.verify_threshold)?;
            for attack in &config.attacks {
                let acfg = seeded(attack, |c| c.seed = seed);
                let attacked = run_attack(&m, source_train, target_train.as_ref(), &acfg)
                    .context(|| format!("running the {} attack", acfg.method))?;
                let trigger = (acfg.method == AttackMethod::Overwrite)
                    .then(|| trigger_accuracy(&attacked, source_test, &acfg))
                    .transpose()?;
                report.attacks.push(AttackReport {
                    method: acfg.method,
                    config: acfg.clone(),
                    before: before.clone(),
                    after: verify_ownership(&attacked, source_test, &patch, config.verify_threshold)?,
                    trigger_accuracy: trigger,
                });
            }
            report.verification = Some(before);
            (m, h, Some(sup), None)
        }
        Mode::Authorization => {
            let patch = config.patch.expect("validated");
            let (aux, cells) = generate(source_train)?;
            report.aux_cells = cells;
            let (m, h) = train_authorized_with_aux(source_train, &aux, &patch, model, &ntl, Some(source_test))?;
            let mut grid: Vec<&DomainDataset> = vec![source_test];
            grid.extend(target_test.as_ref());
            report.authorization = Some(evaluate_authorization(&m, &grid, &patch)?);
            (m, h, None, Some(aux))
        }
    };
    report.source_acc = model.accuracy(source_test)?;
    report.target_acc = target_test.as_ref().map(|t| model.accuracy(t)).transpose()?;
    Ok(SeedArtifacts {
        report,
        history,
        model,
        baseline,
        aux,
    })
}

/// A fresh directory under `root`; never reuses an existing one.
fn fresh_run_dir(root: &Path, mode: Mode) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", mode.name());
    fs::create_dir_all(root)?;
    for attempt in 0.. {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("the attempt counter is unbounded")
}

fn write_seed(dir: &Path, art: &SeedArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_history(&dir.join("history.jsonl"), &art.history)?;
    art.model.save(&dir.join("model.ckpt"))?;
    if let Some(b) = &art.baseline {
        b.save(&dir.join("supervised.ckpt"))?;
    }
    if let Some(aux) = &art.aux {
        save_dataset(aux, &dir.join("aux"), Some(DatasetManifest::describe(aux)))?;
    }
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&art.report)?)?;
    Ok(())
}

fn thread_count() -> usize {
    std::env::var("NTL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or(1)
}

/// Validates, runs every seed, and writes the run directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let domains = config.dataset.load()?;
    let dir = fresh_run_dir(&config.output_dir, config.mode)?;
    fs::write(dir.join("config.toml"), config.to_toml()?)?;

    let threads = thread_count().min(config.seeds.len());
    let mut results: Vec<Result<SeedArtifacts>> = Vec::with_capacity(config.seeds.len());
    for group in config.seeds.chunks(threads) {
        if group.len() == 1 {
            results.push(run_seed(config, &domains, group[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .map(|&seed| {
                    let domains = &domains;
                    s.spawn(move || run_seed(config, domains, seed))
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("seed thread panicked"));
            }
        });
    }

    let mut reports = Vec::new();
    for (seed, result) in config.seeds.iter().zip(results) {
        let art = result.context(|| format!("seed {seed}"))?;
        write_seed(&dir.join(format!("seed-{seed}")), &art)?;
        reports.push(art.report);
    }
    let summary = summarize(config.mode, &reports);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let rendered = render(&[(dir.clone(), config.clone(), reports.clone(), summary.clone())]);
    fs::write(dir.join("report.txt"), &rendered.text)?;
    fs::write(dir.join("report.csv"), &rendered.csv)?;
    Ok(RunArtifacts {
        dir,
        seeds: reports,
        summary,
    })
}

/// Reads back a finished run directory.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, Vec<SeedReport>, Summary)> {
    let missing = |what: &str| Error::IncompleteRun {
        path: dir.to_path_buf(),
        missing: what.to_string(),
    };
    let config_path = dir.join("config.toml");
    if !config_path.exists() {
        return Err(missing("config.toml"));
    }
    let config = ExperimentConfig::load(&config_path)?;
    let mut reports = Vec::new();
    for seed in &config.seeds {
        let path = dir.join(format!("seed-{seed}")).join("report.json");
        if !path.exists() {
            return Err(missing(&format!("seed-{seed}/report.json")));
        }
        reports.push(serde_json::from_str(&fs::read_to_string(path)?)?);
    }
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        return Err(missing("summary.json"));
    }
    let summary = serde_json::from_str(&fs::read_to_string(summary_path)?)?;
    Ok((config, reports, summary))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
}

/// Column order of the ownership table.
pub const OWNERSHIP_COLUMNS: [&str; 8] = ["supervised", "ntl", "ftal", "rtal", "ewc", "au", "overwrite", "prune"];

fn pair(v: &VerificationReport) -> String {
    format!("{:.4}/{:.4}", v.acc_with_patch, v.acc_without_patch)
}

/// Header and rows (label first) for one run.
fn table(mode: Mode, reports: &[SeedReport], summary: &Summary) -> (Vec<String>, Vec<Vec<String>>) {
    let mean = |name: &str| {
        summary
            .metrics
            .iter()
            .find(|m| m.name == name)
            .map(|m| format!("{:.4}±{:.4}", m.mean, m.std))
            .unwrap_or_else(|| "-".into())
    };
    match mode {
        Mode::Ownership => {
            let header = std::iter::once("seed".to_string())
                .chain(OWNERSHIP_COLUMNS.iter().map(|c| c.to_string()))
                .collect();
            let mut rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    let mut row = vec![r.seed.to_string()];
                    for col in OWNERSHIP_COLUMNS {
                        let cell = match col {
                            "supervised" => r.baseline_verification.as_ref().map(pair),
                            "ntl" => r.verification.as_ref().map(pair),
                            m => r.attacks.iter().find(|a| a.method.name() == m).map(|a| pair(&a.after)),
                        };
                        row.push(cell.unwrap_or_else(|| "-".into()));
                    }
                    row
                })
                .collect();
            let mut mean_row = vec!["mean".to_string()];
            for col in OWNERSHIP_COLUMNS {
                let with = format!("{col}_with_patch");
                let without = format!("{col}_without_patch");
                let find = |n: &str| summary.metrics.iter().find(|m| m.name == n).map(|m| m.mean);
                mean_row.push(match (find(&with), find(&without)) {
                    (Some(w), Some(o)) => format!("{w:.4}/{o:.4}"),
                    _ => "-".into(),
                });
            }
            rows.push(mean_row);
            (header, rows)
        }
        Mode::Authorization => {
            let mut header = vec!["seed".to_string(), "authorized".to_string()];
            if let Some(a) = reports.first().and_then(|r| r.authorization.as_ref()) {
                for c in &a.unauthorized {
                    header.push(format!("{}{}", c.domain, if c.patched { "+patch" } else { "" }));
                }
            }
            header.push("max_unauthorized".into());
            let mut rows: Vec<Vec<String>> = reports
                .iter()
                .filter_map(|r| {
                    let a = r.authorization.as_ref()?;
                    let mut row = vec![r.seed.to_string(), format!("{:.4}", a.authorized_acc)];
                    row.extend(a.unauthorized.iter().map(|c| format!("{:.4}", c.accuracy)));
                    row.push(format!("{:.4}", a.max_unauthorized));
                    Some(row)
                })
                .collect();
            let width = header.len();
            let mut mean_row = vec!["mean".to_string(), mean("authorized_acc")];
            mean_row.resize(width - 1, String::new());
            mean_row.push(mean("max_unauthorized"));
            rows.push(mean_row);
            (header, rows)
        }
        _ => {
            let header = vec!["seed".to_string(), "source".to_string(), "target".to_string()];
            let mut rows: Vec<Vec<String>> = reports
                .iter()
                .map(|r| {
                    vec![
                        r.seed.to_string(),
                        format!("{:.4}", r.source_acc),
                        r.target_acc.map_or("-".into(), |t| format!("{t:.4}")),
                    ]
                })
                .collect();
            rows.push(vec!["mean".into(), mean("source_acc"), mean("target_acc")]);
            (header, rows)
        }
    }
}

fn render(runs: &[(PathBuf, ExperimentConfig, Vec<SeedReport>, Summary)]) -> RenderedReport {
    let mut text = String::new();
    let mut csv = String::new();
    for (dir, config, reports, summary) in runs {
        let (header, rows) = table(config.mode, reports, summary);
        let _ = writeln!(text, "run {} ({}, {} epochs)", dir.display(), config.mode.name(), config.ntl.epochs);
        if config.mode == Mode::Ownership {
            let _ = writeln!(text, "cells are accuracy with patch / without patch");
            if let Some(a) = config.attacks.first() {
                let _ = writeln!(text, "attack budget: {} epochs on {:.0}% of the training set", a.epochs, a.data_fraction * 100.0);
            }
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                rows.iter()
                    .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                    .chain(std::iter::once(header[c].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(text, "{}", line(&header));
        for row in &rows {
            let _ = writeln!(text, "{}", line(row));
        }
        text.push('\n');
        let _ = writeln!(csv, "run,{}", header.join(","));
        for row in &rows {
            let _ = writeln!(csv, "{},{}", dir.display(), row.join(","));
        }
    }
    RenderedReport { text, csv }
}

/// Renders tables for finished run directories.
pub fn report(run_dirs: &[PathBuf]) -> Result<RenderedReport> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidConfig(vec!["report needs at least one run directory".into()]));
    }
    let mut runs = Vec::new();
    for dir in run_dirs {
        let (config, reports, summary) = load_run(dir)?;
        runs.push((dir.clone(), config, reports, summary));
    }
    Ok(render(&runs))
}
