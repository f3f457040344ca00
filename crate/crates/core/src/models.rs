//! Classifier networks: a feature extractor producing the representation
//! `z`, and a classifier head producing class probabilities.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::DomainDataset;
use crate::error::{Error, Result};
use crate::nn::{self, argmax_rows, softmax, Ctx, Freeze, Grads, LayerSpec, Sequential, Tape};

pub const DEFAULT_BATCH_SIZE: usize = 32;
const EVAL_BATCH: usize = 256;

/// Declarative description of a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Input geometry `(C, H, W)`.
    pub input: [usize; 3],
    pub extractor_layers: Vec<LayerSpec>,
    /// Linear widths of the classifier; the last equals the class count.
    pub classifier_layers: Vec<usize>,
    /// Flattened extractor output width.
    pub repr_dim: usize,
    /// Dropout after each hidden classifier layer.
    #[serde(default)]
    pub dropout: f64,
    /// Index of the first extractor layer of the second backbone stage.
    #[serde(default)]
    pub stage_split: usize,
}

impl ArchitectureSpec {
    /// Four conv blocks (3×3 conv, ReLU, 2×2 max-pool) followed by a
    /// `repr_dim → 256 → 256 → K` classifier.
    pub fn tiny(input: [usize; 3], num_classes: usize) -> Result<Self> {
        let mut extractor_layers = Vec::new();
        for channels in [16, 32, 32, 64] {
            extractor_layers.extend([
                LayerSpec::Conv {
                    channels,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
            ]);
        }
        extractor_layers.push(LayerSpec::Flatten);
        let mut spec = ArchitectureSpec {
            name: "tiny".into(),
            input,
            extractor_layers,
            classifier_layers: vec![256, 256, num_classes],
            repr_dim: 0,
            dropout: 0.5,
            stage_split: 6,
        };
        spec.repr_dim = spec.extractor_output_dim()?;
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_layers.last().copied().unwrap_or(0)
    }

    fn extractor_output_dim(&self) -> Result<usize> {
        let mut shape = self.input.to_vec();
        for layer in &self.extractor_layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "extractor must end flat, ends with shape {shape:?}"
            )));
        }
        Ok(shape[0])
    }

    pub fn validate(&self) -> Result<()> {
        let out = self.extractor_output_dim()?;
        if out != self.repr_dim {
            return Err(Error::InvalidSpec(format!(
                "extractor produces {out} features but repr_dim is {}",
                self.repr_dim
            )));
        }
        if self.classifier_layers.is_empty() || self.num_classes() < 2 {
            return Err(Error::InvalidSpec("classifier must end in K >= 2 outputs".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidSpec(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.stage_split > self.extractor_layers.len() {
            return Err(Error::InvalidSpec("stage split beyond the extractor".into()));
        }
        Ok(())
    }

    fn classifier_specs(&self) -> Vec<LayerSpec> {
        let (last, hidden) = self.classifier_layers.split_last().expect("validated");
        let mut specs = Vec::new();
        for &width in hidden {
            specs.push(LayerSpec::Linear { width });
            specs.push(LayerSpec::Relu);
            if self.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { rate: self.dropout });
            }
        }
        specs.push(LayerSpec::Linear { width: *last });
        specs
    }
}

/// Which half of the model to freeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Extractor,
    Classifier,
    None,
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub spec: ArchitectureSpec,
    pub extractor: Sequential,
    pub classifier: Sequential,
    pub seed: u64,
    pub train_step_count: u64,
}

/// Caches of one training forward pass through both halves.
pub struct ModelTape {
    extractor: Tape,
    classifier: Tape,
    probs: Array2<f64>,
}

impl ModelTape {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }
}

pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<ModelBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = Sequential::new(&spec.input, &spec.extractor_layers, &mut rng)?;
    let classifier = Sequential::new(&[spec.repr_dim], &spec.classifier_specs(), &mut rng)?;
    Ok(ModelBundle {
        spec: spec.clone(),
        extractor,
        classifier,
        seed,
        train_step_count: 0,
    })
}

fn to_matrix(a: ArrayD<f64>) -> Array2<f64> {
    a.into_dimensionality::<Ix2>().expect("2-D activations")
}

impl ModelBundle {
    /// Evaluation-mode forward: representations `z` and class probabilities.
    pub fn forward(&self, batch: &ArrayD<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.extractor.check_input(batch)?;
        let z = to_matrix(self.extractor.infer(batch));
        let logits = to_matrix(self.classifier.infer(&z.clone().into_dyn()));
        Ok((z, softmax(&logits)))
    }

    pub fn forward_train(&self, batch: &ArrayD<f64>, ctx: &mut Ctx<'_>) -> Result<(Array2<f64>, ModelTape)> {
        self.extractor.check_input(batch)?;
        let (z, extractor) = self.extractor.forward(batch, ctx);
        let (logits, classifier) = self.classifier.forward(&z, ctx);
        let probs = softmax(&to_matrix(logits));
        Ok((
            to_matrix(z),
            ModelTape {
                extractor,
                classifier,
                probs,
            },
        ))
    }

    /// Gradients (extractor then classifier) for upstream gradients on the
    /// probabilities and, optionally, directly on `z`.
    pub fn backward(&self, tape: &ModelTape, grad_probs: Option<&Array2<f64>>, grad_z: Option<&Array2<f64>>) -> Grads {
        let mut cgrads = self.classifier.zero_grads();
        let mut egrads = self.extractor.zero_grads();
        let mut dz: Option<ArrayD<f64>> = None;
        if let Some(gp) = grad_probs {
            let dlogits = nn::softmax_backward(&tape.probs, gp);
            dz = self
                .classifier
                .backward(&tape.classifier, dlogits.into_dyn(), &mut cgrads, true);
        }
        if let Some(gz) = grad_z {
            let gz = gz.clone().into_dyn();
            dz = Some(match dz {
                Some(d) => d + gz,
                None => gz,
            });
        }
        if let Some(dz) = dz {
            self.extractor.backward(&tape.extractor, dz, &mut egrads, false);
        }
        egrads.concat(cgrads)
    }

    pub fn absorb_batch_stats(&mut self, tape: &ModelTape) {
        self.extractor.absorb_batch_stats(&tape.extractor);
        self.classifier.absorb_batch_stats(&tape.classifier);
    }

    pub fn zero_grads(&self) -> Grads {
        self.extractor.zero_grads().concat(self.classifier.zero_grads())
    }

    pub fn params(&self) -> Vec<&ArrayD<f64>> {
        let mut p = self.extractor.params();
        p.extend(self.classifier.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<f64>> {
        let mut p = self.extractor.params_mut();
        p.extend(self.classifier.params_mut());
        p
    }

    pub fn param_freezes(&self) -> Vec<Freeze> {
        let mut f = self.extractor.param_freezes();
        f.extend(self.classifier.param_freezes());
        f
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.extractor.param_names("extractor.");
        n.extend(self.classifier.param_names("classifier."));
        n
    }

    /// Disables updates for `part`; `Part::None` makes everything trainable.
    pub fn freeze(&mut self, part: Part) {
        let (e, c) = match part {
            Part::Extractor => (Freeze::All, Freeze::None),
            Part::Classifier => (Freeze::None, Freeze::All),
            Part::None => (Freeze::None, Freeze::None),
        };
        self.extractor.set_freeze(e);
        self.classifier.set_freeze(c);
    }

    /// Replaces the classifier with a freshly initialized one.
    pub fn reinit_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.classifier = Sequential::new(&[self.spec.repr_dim], &self.spec.classifier_specs(), &mut rng)?;
        Ok(())
    }

    /// Evaluation-mode probabilities for a whole dataset.
    pub fn predict_probs(&self, data: &DomainDataset) -> Result<Array2<f64>> {
        let (_, probs) = self.embed_and_predict(data)?;
        Ok(probs)
    }

    /// Evaluation-mode representations and probabilities for a whole dataset.
    pub fn embed_and_predict(&self, data: &DomainDataset) -> Result<(Array2<f64>, Array2<f64>)> {
        let k = self.spec.num_classes();
        let mut z = Array2::zeros((data.len(), self.spec.repr_dim));
        let mut probs = Array2::zeros((data.len(), k));
        let indices: Vec<usize> = (0..data.len()).collect();
        for (b, chunk) in indices.chunks(EVAL_BATCH).enumerate() {
            let (zb, pb) = self.forward(&data.batch(chunk))?;
            let start = b * EVAL_BATCH;
            z.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&zb);
            probs.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&pb);
        }
        Ok((z, probs))
    }

    pub fn predict(&self, data: &DomainDataset) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_probs(data)?))
    }

    /// Fraction of samples whose argmax prediction equals the label.
    pub fn accuracy(&self, data: &DomainDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyInput("accuracy on an empty dataset"));
        }
        if data.num_classes != self.spec.num_classes() {
            return Err(Error::IncompatibleDomains(format!(
                "model has {} classes, {} has {}",
                self.spec.num_classes(),
                data.name,
                data.num_classes
            )));
        }
        let pred = self.predict(data)?;
        let hits = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out)?;
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        read_checkpoint(&mut bytes.as_slice())
    }
}

const MAGIC: &[u8; 8] = b"NTLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (little endian):
/// magic, `u32` version, `u32` + UTF-8 JSON architecture spec, `u64` seed,
/// `u64` train step count, `u32` tensor count, then per tensor `u16` + UTF-8
/// name, `u8` rank, `u64` dims, `f64` values in row-major order.
pub fn write_checkpoint(model: &ModelBundle, out: &mut impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let spec = serde_json::to_vec(&model.spec)?;
    out.write_all(&(spec.len() as u32).to_le_bytes())?;
    out.write_all(&spec)?;
    out.write_all(&model.seed.to_le_bytes())?;
    out.write_all(&model.train_step_count.to_le_bytes())?;
    let tensors = named_tensors(model);
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[tensor.ndim() as u8])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in tensor.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn named_tensors(model: &ModelBundle) -> Vec<(String, ArrayD<f64>)> {
    let mut tensors: Vec<(String, ArrayD<f64>)> = model
        .param_names()
        .into_iter()
        .zip(model.params().into_iter().cloned())
        .collect();
    for (prefix, net) in [("extractor.", &model.extractor), ("classifier.", &model.classifier)] {
        for (i, mean, var) in net.buffers() {
            tensors.push((format!("{prefix}{i}.running_mean"), mean.clone().into_dyn()));
            tensors.push((format!("{prefix}{i}.running_var"), var.clone().into_dyn()));
        }
    }
    tensors
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelBundle> {
    let bad = |detail: &str| Error::format("checkpoint", detail);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let spec_len = read_u32(input)? as usize;
    let mut spec = vec![0u8; spec_len];
    input.read_exact(&mut spec)?;
    let spec: ArchitectureSpec = serde_json::from_slice(&spec)?;
    let seed = read_u64(input)?;
    let steps = read_u64(input)?;
    let mut model = build_model(&spec, seed)?;
    model.train_step_count = steps;
    let count = read_u32(input)? as usize;
    let mut loaded = std::collections::HashMap::new();
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut rank = [0u8; 1];
        input.read_exact(&mut rank)?;
        let dims = (0..rank[0])
            .map(|_| read_u64(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(&e.to_string()))?;
        loaded.insert(name, tensor);
    }
    let names = model.param_names();
    for (name, param) in names.iter().zip(model.params_mut()) {
        let tensor = loaded
            .remove(name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        if tensor.shape() != param.shape() {
            return Err(bad(&format!("tensor {name} has shape {:?}", tensor.shape())));
        }
        *param = tensor;
    }
    for (prefix, net) in [("extractor.", &mut model.extractor), ("classifier.", &mut model.classifier)] {
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            if let Some((mean, var)) = layer.running.as_mut() {
                let mut take = |suffix: &str| -> Result<Array1<f64>> {
                    loaded
                        .remove(&format!("{prefix}{i}.{suffix}"))
                        .and_then(|t| t.into_dimensionality().ok())
                        .ok_or_else(|| bad(&format!("missing {prefix}{i}.{suffix}")))
                };
                *mean = take("running_mean")?;
                *var = take("running_var")?;
            }
        }
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(bad(&format!("unexpected tensor {extra}")));
    }
    Ok(model)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    input.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_simple_fn(IxDyn(&[n, shape[0], shape[1], shape[2]]), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tiny_dimensions() {
        let spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        // 16 → 8 → 4 → 2 → 1 spatially, 64 channels at the end.
        assert_eq!(spec.repr_dim, 64);
        assert_eq!(spec.classifier_layers, vec![256, 256, 10]);
        let spec32 = ArchitectureSpec::tiny([3, 32, 32], 10).unwrap();
        assert_eq!(spec32.repr_dim, 64 * 2 * 2);
        let model = build_model(&spec, 1).unwrap();
        let widths: Vec<_> = model
            .classifier
            .layers()
            .iter()
            .filter_map(|l| match l.spec {
                LayerSpec::Linear { width } => Some((l.in_shape[0], width)),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![(64, 256), (256, 256), (256, 10)]);
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let mut spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        spec.repr_dim = 65;
        assert!(matches!(build_model(&spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        let c = build_model(&spec, 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn probabilities_are_distributions_and_batch_independent() {
        let spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        let model = build_model(&spec, 3).unwrap();
        let batch = random_batch(DEFAULT_BATCH_SIZE, [3, 16, 16], 4);
        let (z, probs) = model.forward(&batch).unwrap();
        assert_eq!(z.shape(), &[32, 64]);
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        let single = batch.slice(ndarray::s![5..6, .., .., ..]).to_owned().into_dyn();
        let (_, p1) = model.forward(&single).unwrap();
        for k in 0..10 {
            assert!((p1[[0, k]] - probs[[5, k]]).abs() < 1e-5);
        }
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        let model = build_model(&spec, 3).unwrap();
        assert!(matches!(
            model.forward(&random_batch(2, [3, 8, 8], 1)),
            Err(Error::GeometryMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let mut spec = ArchitectureSpec::tiny([3, 16, 16], 10).unwrap();
        spec.extractor_layers.insert(1, LayerSpec::BatchNorm);
        spec.stage_split += 1;
        let mut model = build_model(&spec, 11).unwrap();
        model.train_step_count = 17;
        if let Some((m, v)) = model.extractor.layers_mut()[1].running.as_mut() {
            m.fill(0.25);
            v.fill(1.5);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = ModelBundle::load(&path).unwrap();
        assert_eq!(loaded.train_step_count, 17);
        assert_eq!(loaded.spec, model.spec);
        let batch = random_batch(8, [3, 16, 16], 2);
        let (za, pa) = model.forward(&batch).unwrap();
        let (zb, pb) = loaded.forward(&batch).unwrap();
        assert_eq!(za, zb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let err = read_checkpoint(&mut &b"NOTACKPTxxxx"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
