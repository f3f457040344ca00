//! Layer descriptors and their forward/backward kernels.
//!
//! Activations are dense `f64` arrays in `(batch, ...)` layout; convolutional
//! layers use `(batch, channels, height, width)`.

use ndarray::{s, Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a sequential architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Linear {
        width: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Sigmoid,
    MaxPool {
        size: usize,
    },
    /// Per-channel (4-D input) or per-feature (2-D input) batch normalization.
    BatchNorm,
    Dropout {
        rate: f64,
    },
    Flatten,
    Upsample {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        match *self {
            LayerSpec::Conv {
                channels,
                kernel,
                stride,
                padding,
            } => {
                let &[_, h, w] = input else {
                    return bad(format!("conv expects (C,H,W) input, got {input:?}"));
                };
                if channels == 0 || kernel == 0 || stride == 0 {
                    return bad("conv channels, kernel and stride must be positive".into());
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("conv kernel {kernel} larger than padded input {input:?}"));
                }
                Ok(vec![
                    channels,
                    (h + 2 * padding - kernel) / stride + 1,
                    (w + 2 * padding - kernel) / stride + 1,
                ])
            }
            LayerSpec::Linear { width } => {
                if input.len() != 1 {
                    return bad(format!("linear expects flat input, got {input:?}"));
                }
                if width == 0 {
                    return bad("linear width must be positive".into());
                }
                Ok(vec![width])
            }
            LayerSpec::MaxPool { size } => {
                let &[c, h, w] = input else {
                    return bad(format!("pooling expects (C,H,W) input, got {input:?}"));
                };
                if size == 0 || h < size || w < size {
                    return bad(format!("pool size {size} invalid for {input:?}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Upsample { factor } => {
                let &[c, h, w] = input else {
                    return bad(format!("upsample expects (C,H,W) input, got {input:?}"));
                };
                if factor == 0 {
                    return bad("upsample factor must be positive".into());
                }
                Ok(vec![c, h * factor, w * factor])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Reshape { ref shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return bad(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
            LayerSpec::BatchNorm => {
                if input.len() != 1 && input.len() != 3 {
                    return bad(format!("batch norm expects flat or (C,H,W) input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} outside [0,1)"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Tanh | LayerSpec::Sigmoid => {
                Ok(input.to_vec())
            }
        }
    }

    /// Whether the layer owns a weight tensor (and bias).
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Linear { .. } | LayerSpec::BatchNorm
        )
    }
}

/// Trainability of a layer's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Freeze {
    #[default]
    None,
    All,
    /// The first `n` output channels (axis 0 of weight and bias) are frozen.
    Leading(usize),
}

impl Freeze {
    /// Index along axis 0 from which updates are allowed, or `None` if nothing may change.
    pub fn first_trainable(self, channels: usize) -> Option<usize> {
        match self {
            Freeze::None => Some(0),
            Freeze::All => None,
            Freeze::Leading(n) if n >= channels => None,
            Freeze::Leading(n) => Some(n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    /// Conv `(out, in, k, k)`, linear `(out, in)`, batch norm gamma `(C)`.
    pub weight: Option<ArrayD<f64>>,
    /// Bias `(out)`; batch norm beta.
    pub bias: Option<ArrayD<f64>>,
    /// Batch-norm running mean and variance.
    pub running: Option<(Array1<f64>, Array1<f64>)>,
    pub freeze: Freeze,
}

pub(crate) const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Saved state needed by a layer's backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    Conv { cols: Array2<f64>, batch: usize },
    Linear { input: Array2<f64> },
    Relu { output: ArrayD<f64> },
    LeakyRelu { input: ArrayD<f64> },
    Tanh { output: ArrayD<f64> },
    Sigmoid { output: ArrayD<f64> },
    MaxPool { argmax: Vec<usize>, input_len: usize },
    BatchNorm { normalized: ArrayD<f64>, inv_std: Array1<f64>, mean: Array1<f64>, var: Array1<f64> },
    Dropout { mask: Option<ArrayD<f64>> },
    Shape { input: Vec<usize> },
}

/// Forward context: batch-norm statistics come from the batch when `train`
/// is set; dropout is active only when an RNG is supplied as well.
pub struct Ctx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval() -> Ctx<'static> {
        Ctx {
            train: false,
            rng: None,
        }
    }

    /// Training statistics without dropout noise.
    pub fn deterministic() -> Ctx<'static> {
        Ctx {
            train: true,
            rng: None,
        }
    }
}

impl Layer {
    pub fn new(spec: LayerSpec, in_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let out_shape = spec.output_shape(in_shape)?;
        let mut layer = Layer {
            spec,
            in_shape: in_shape.to_vec(),
            out_shape,
            weight: None,
            bias: None,
            running: None,
            freeze: Freeze::None,
        };
        layer.reset_parameters(rng);
        Ok(layer)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn reset_parameters(&mut self, rng: &mut ChaCha8Rng) {
        let (wshape, fan_in): (Vec<usize>, usize) = match self.spec {
            LayerSpec::Conv {
                channels, kernel, ..
            } => {
                let cin = self.in_shape[0];
                (vec![channels, cin, kernel, kernel], cin * kernel * kernel)
            }
            LayerSpec::Linear { width } => (vec![width, self.in_shape[0]], self.in_shape[0]),
            LayerSpec::BatchNorm => {
                let c = self.in_shape[0];
                self.weight = Some(ArrayD::ones(IxDyn(&[c])));
                self.bias = Some(ArrayD::zeros(IxDyn(&[c])));
                self.running = Some((Array1::zeros(c), Array1::ones(c)));
                return;
            }
            _ => return,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let out = wshape[0];
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&wshape), || rng.random_range(-bound..bound));
        let bias = ArrayD::from_shape_simple_fn(IxDyn(&[out]), || rng.random_range(-bound..bound));
        self.weight = Some(weight);
        self.bias = Some(bias);
    }

    pub fn forward(&self, x: &ArrayD<f64>, ctx: &mut Ctx<'_>) -> (ArrayD<f64>, Cache) {
        if x.is_standard_layout() {
            self.forward_standard(x, ctx)
        } else {
            self.forward_standard(&x.as_standard_layout().into_owned(), ctx)
        }
    }

    fn forward_standard(&self, x: &ArrayD<f64>, ctx: &mut Ctx<'_>) -> (ArrayD<f64>, Cache) {
        let n = x.shape()[0];
        match self.spec {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = self.weight.as_ref().expect("conv weight");
                let b = self.bias.as_ref().expect("conv bias");
                let (c, h, wd) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (o, ho, wo) = (self.out_shape[0], self.out_shape[1], self.out_shape[2]);
                let x = x.as_standard_layout();
                let cols = im2col(
                    x.as_slice().expect("contiguous"),
                    Geometry {
                        n,
                        c,
                        h,
                        w: wd,
                        k: kernel,
                        stride,
                        pad: padding,
                        ho,
                        wo,
                    },
                );
                let w2 = w
                    .view()
                    .into_shape_with_order((o, c * kernel * kernel))
                    .expect("conv weight shape");
                let y = w2.dot(&cols);
                let plane = ho * wo;
                let mut out = vec![0.0; n * o * plane];
                let ys = y.as_slice().expect("contiguous");
                let bs = b.as_slice().expect("contiguous");
                for ni in 0..n {
                    for oi in 0..o {
                        let src = &ys[oi * n * plane + ni * plane..oi * n * plane + (ni + 1) * plane];
                        let dst = &mut out[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s + bs[oi];
                        }
                    }
                }
                let out = ArrayD::from_shape_vec(IxDyn(&[n, o, ho, wo]), out).expect("conv output");
                (out, Cache::Conv { cols, batch: n })
            }
            LayerSpec::Linear { width } => {
                let w = self.weight.as_ref().expect("linear weight");
                let b = self.bias.as_ref().expect("linear bias");
                let input = x
                    .view()
                    .into_shape_with_order((n, self.in_shape[0]))
                    .expect("linear input")
                    .to_owned();
                let w2 = w
                    .view()
                    .into_shape_with_order((width, self.in_shape[0]))
                    .expect("linear weight");
                let mut y = input.dot(&w2.t());
                let b1 = b.view().into_shape_with_order(width).expect("bias");
                y += &b1;
                (y.into_dyn(), Cache::Linear { input })
            }
            LayerSpec::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                (y.clone(), Cache::Relu { output: y })
            }
            LayerSpec::LeakyRelu { slope } => {
                let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
                (y, Cache::LeakyRelu { input: x.clone() })
            }
            LayerSpec::Tanh => {
                let y = x.mapv(f64::tanh);
                (y.clone(), Cache::Tanh { output: y })
            }
            LayerSpec::Sigmoid => {
                let y = x.mapv(sigmoid);
                (y.clone(), Cache::Sigmoid { output: y })
            }
            LayerSpec::MaxPool { size } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (ho, wo) = (self.out_shape[1], self.out_shape[2]);
                let x = x.as_standard_layout();
                let xs = x.as_slice().expect("contiguous");
                let mut out = Vec::with_capacity(n * c * ho * wo);
                let mut argmax = Vec::with_capacity(n * c * ho * wo);
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = base + oy * size * w + ox * size;
                            for dy in 0..size {
                                for dx in 0..size {
                                    let idx = base + (oy * size + dy) * w + ox * size + dx;
                                    if xs[idx] > xs[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(xs[best]);
                            argmax.push(best);
                        }
                    }
                }
                let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).expect("pool output");
                (
                    out,
                    Cache::MaxPool {
                        argmax,
                        input_len: xs.len(),
                    },
                )
            }
            LayerSpec::Upsample { factor } => {
                let (c, h, w) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut out = ArrayD::zeros(IxDyn(&[n, c, ho, wo]));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..ho {
                            for xx in 0..wo {
                                out[[ni, ci, y, xx]] = x[[ni, ci, y / factor, xx / factor]];
                            }
                        }
                    }
                }
                (
                    out,
                    Cache::Shape {
                        input: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Flatten | LayerSpec::Reshape { .. } => {
                let mut shape = vec![n];
                shape.extend_from_slice(&self.out_shape);
                let y = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("reshape");
                (
                    y,
                    Cache::Shape {
                        input: x.shape().to_vec(),
                    },
                )
            }
            LayerSpec::Dropout { rate } => match ctx.rng.as_deref_mut() {
                Some(rng) if ctx.train && rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask = ArrayD::from_shape_simple_fn(x.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    (x * &mask, Cache::Dropout { mask: Some(mask) })
                }
                _ => (x.clone(), Cache::Dropout { mask: None }),
            },
            LayerSpec::BatchNorm => self.batch_norm_forward(x, ctx.train),
        }
    }

    fn batch_norm_forward(&self, x: &ArrayD<f64>, train: bool) -> (ArrayD<f64>, Cache) {
        let gamma = self.weight.as_ref().expect("bn gamma");
        let beta = self.bias.as_ref().expect("bn beta");
        let c = self.in_shape[0];
        // View as (N, C, S) with S = spatial positions (1 for flat input).
        let n = x.shape()[0];
        let spatial: usize = self.in_shape[1..].iter().product();
        let x3 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, spatial))
            .expect("bn input");
        let (mean, var) = if train {
            let count = (n * spatial) as f64;
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ci in 0..c {
                let sl = x3.slice(s![.., ci, ..]);
                let m = sl.sum() / count;
                mean[ci] = m;
                var[ci] = sl.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / count;
            }
            (mean, var)
        } else {
            let (m, v) = self.running.as_ref().expect("bn running stats");
            (m.clone(), v.clone())
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut normalized = x3.clone();
        let mut out = x3;
        for ci in 0..c {
            let (m, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            normalized.slice_mut(s![.., ci, ..]).mapv_inplace(|v| (v - m) * is);
            out.slice_mut(s![.., ci, ..]).mapv_inplace(|v| (v - m) * is * g + b);
        }
        let out = out.into_shape_with_order(x.raw_dim()).expect("bn output");
        let normalized = normalized.into_dyn();
        (
            out,
            Cache::BatchNorm {
                normalized,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// Returns the input gradient and, for parameterized layers, `(dW, db)`.
    pub fn backward(
        &self,
        cache: &Cache,
        grad: &ArrayD<f64>,
        need_input_grad: bool,
    ) -> (Option<ArrayD<f64>>, Option<(ArrayD<f64>, ArrayD<f64>)>) {
        if grad.is_standard_layout() {
            self.backward_standard(cache, grad, need_input_grad)
        } else {
            self.backward_standard(cache, &grad.as_standard_layout().into_owned(), need_input_grad)
        }
    }

    fn backward_standard(
        &self,
        cache: &Cache,
        grad: &ArrayD<f64>,
        need_input_grad: bool,
    ) -> (Option<ArrayD<f64>>, Option<(ArrayD<f64>, ArrayD<f64>)>) {
        match (&self.spec, cache) {
            (
                LayerSpec::Conv {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv { cols, batch },
            ) => {
                let n = *batch;
                let w = self.weight.as_ref().expect("conv weight");
                let (c, h, wd) = (self.in_shape[0], self.in_shape[1], self.in_shape[2]);
                let (o, ho, wo) = (self.out_shape[0], self.out_shape[1], self.out_shape[2]);
                let plane = ho * wo;
                let grad = grad.as_standard_layout();
                let gs = grad.as_slice().expect("contiguous");
                let mut gmat = vec![0.0; o * n * plane];
                for ni in 0..n {
                    for oi in 0..o {
                        gmat[oi * n * plane + ni * plane..oi * n * plane + (ni + 1) * plane]
                            .copy_from_slice(&gs[(ni * o + oi) * plane..(ni * o + oi + 1) * plane]);
                    }
                }
                let gmat = Array2::from_shape_vec((o, n * plane), gmat).expect("grad matrix");
                let dw = gmat.dot(&cols.t());
                let db = gmat.sum_axis(Axis(1));
                let dw = dw
                    .into_shape_with_order(IxDyn(&[o, c, *kernel, *kernel]))
                    .expect("dw");
                let dx = need_input_grad.then(|| {
                    let w2 = w
                        .view()
                        .into_shape_with_order((o, c * kernel * kernel))
                        .expect("conv weight");
                    let dcols = w2.t().dot(&gmat);
                    let dx = col2im(
                        dcols.as_slice().expect("contiguous"),
                        Geometry {
                            n,
                            c,
                            h,
                            w: wd,
                            k: *kernel,
                            stride: *stride,
                            pad: *padding,
                            ho,
                            wo,
                        },
                    );
                    ArrayD::from_shape_vec(IxDyn(&[n, c, h, wd]), dx).expect("dx")
                });
                (dx, Some((dw, db.into_dyn())))
            }
            (LayerSpec::Linear { width }, Cache::Linear { input }) => {
                let n = input.nrows();
                let g = grad
                    .view()
                    .into_shape_with_order((n, *width))
                    .expect("linear grad");
                let dw = g.t().dot(input);
                let db = g.sum_axis(Axis(0));
                let dx = need_input_grad.then(|| {
                    let w = self.weight.as_ref().expect("linear weight");
                    let w2 = w
                        .view()
                        .into_shape_with_order((*width, self.in_shape[0]))
                        .expect("linear weight");
                    g.dot(&w2).into_dyn()
                });
                (dx, Some((dw.into_dyn(), db.into_dyn())))
            }
            (LayerSpec::Relu, Cache::Relu { output }) => {
                let mut dx = grad.clone();
                dx.zip_mut_with(output, |g, &y| {
                    if y <= 0.0 {
                        *g = 0.0
                    }
                });
                (Some(dx), None)
            }
            (LayerSpec::LeakyRelu { slope }, Cache::LeakyRelu { input }) => {
                let mut dx = grad.clone();
                dx.zip_mut_with(input, |g, &x| {
                    if x <= 0.0 {
                        *g *= slope
                    }
                });
                (Some(dx), None)
            }
            (LayerSpec::Tanh, Cache::Tanh { output }) => {
                let mut dx = grad.clone();
                dx.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y);
                (Some(dx), None)
            }
            (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
                let mut dx = grad.clone();
                dx.zip_mut_with(output, |g, &y| *g *= y * (1.0 - y));
                (Some(dx), None)
            }
            (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax, input_len }) => {
                let mut dx = vec![0.0; *input_len];
                let grad = grad.as_standard_layout();
                for (&idx, &g) in argmax.iter().zip(grad.iter()) {
                    dx[idx] += g;
                }
                let mut shape = vec![grad.shape()[0]];
                shape.extend_from_slice(&self.in_shape);
                (
                    Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("pool dx")),
                    None,
                )
            }
            (LayerSpec::Upsample { factor }, Cache::Shape { input }) => {
                let mut dx = ArrayD::zeros(IxDyn(input));
                let (n, c, ho, wo) = (grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]);
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..ho {
                            for x in 0..wo {
                                dx[[ni, ci, y / factor, x / factor]] += grad[[ni, ci, y, x]];
                            }
                        }
                    }
                }
                (Some(dx), None)
            }
            (LayerSpec::Flatten | LayerSpec::Reshape { .. }, Cache::Shape { input }) => {
                let dx = grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(input))
                    .expect("reshape grad");
                (Some(dx), None)
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => match mask {
                Some(mask) => (Some(grad * mask), None),
                None => (Some(grad.clone()), None),
            },
            (
                LayerSpec::BatchNorm,
                Cache::BatchNorm {
                    normalized,
                    inv_std,
                    ..
                },
            ) => self.batch_norm_backward(grad, normalized, inv_std),
            (spec, _) => panic!("cache does not belong to layer {spec:?}"),
        }
    }

    fn batch_norm_backward(
        &self,
        grad: &ArrayD<f64>,
        normalized: &ArrayD<f64>,
        inv_std: &Array1<f64>,
    ) -> (Option<ArrayD<f64>>, Option<(ArrayD<f64>, ArrayD<f64>)>) {
        let gamma = self.weight.as_ref().expect("bn gamma");
        let c = self.in_shape[0];
        let n = grad.shape()[0];
        let spatial: usize = self.in_shape[1..].iter().product();
        let count = (n * spatial) as f64;
        let g3 = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, spatial))
            .expect("bn grad");
        let xh = normalized
            .view()
            .into_shape_with_order((n, c, spatial))
            .expect("bn cache");
        let mut dgamma = ArrayD::zeros(IxDyn(&[c]));
        let mut dbeta = ArrayD::zeros(IxDyn(&[c]));
        let mut dx = g3.clone();
        for ci in 0..c {
            let g = g3.slice(s![.., ci, ..]);
            let xc = xh.slice(s![.., ci, ..]);
            let sum_g = g.sum();
            let sum_gx = (&g * &xc).sum();
            dgamma[ci] = sum_gx;
            dbeta[ci] = sum_g;
            let k = gamma[ci] * inv_std[ci] / count;
            let mut d = dx.slice_mut(s![.., ci, ..]);
            ndarray::Zip::from(&mut d)
                .and(&g)
                .and(&xc)
                .for_each(|d, &g, &x| *d = k * (count * g - sum_g - x * sum_gx));
        }
        let dx = dx.into_shape_with_order(grad.raw_dim()).expect("bn dx");
        (Some(dx), Some((dgamma, dbeta)))
    }

    /// Folds the batch statistics of a training forward pass into the running estimates.
    pub fn absorb_batch_stats(&mut self, cache: &Cache) {
        if let (Some((rm, rv)), Cache::BatchNorm { mean, var, .. }) = (self.running.as_mut(), cache) {
            rm.zip_mut_with(mean, |r, &m| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
            rv.zip_mut_with(var, |r, &v| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Rows index `(channel, ky, kx)`, columns index `(sample, oy, ox)`.
fn im2col(x: &[f64], g: Geometry) -> Array2<f64> {
    let rows = g.c * g.k * g.k;
    let cols = g.n * g.ho * g.wo;
    let mut out = vec![0.0; rows * cols];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &mut out[r * cols..(r + 1) * cols];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &x[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        let dst = &mut row[(ni * g.ho + oy) * g.wo..(ni * g.ho + oy + 1) * g.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((rows, cols), out).expect("im2col")
}

fn col2im(cols: &[f64], g: Geometry) -> Vec<f64> {
    let ncols = g.n * g.ho * g.wo;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[(ni * g.ho + oy) * g.wo..(ni * g.ho + oy + 1) * g.wo];
                        let dst = &mut x[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_shapes() {
        let spec = LayerSpec::Conv {
            channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(spec.output_shape(&[3, 16, 16]).unwrap(), vec![8, 16, 16]);
        let strided = LayerSpec::Conv {
            channels: 4,
            kernel: 4,
            stride: 2,
            padding: 1,
        };
        assert_eq!(strided.output_shape(&[3, 32, 32]).unwrap(), vec![4, 16, 16]);
        assert!(spec.output_shape(&[10]).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = LayerSpec::Conv {
            channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let layer = Layer::new(spec, &[2, 5, 5], &mut rng).unwrap();
        let x = ArrayD::from_shape_simple_fn(IxDyn(&[2, 2, 5, 5]), || rng.random_range(-1.0..1.0));
        let (y, _) = layer.forward(&x, &mut Ctx::eval());
        let w = layer.weight.as_ref().unwrap();
        let b = layer.bias.as_ref().unwrap();
        for n in 0..2 {
            for o in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        acc += w[[o, c, ky, kx]] * x[[n, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((acc - y[[n, o, oy, ox]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn leading_freeze_boundary() {
        assert_eq!(Freeze::Leading(32).first_trainable(64), Some(32));
        assert_eq!(Freeze::Leading(64).first_trainable(64), None);
        assert_eq!(Freeze::None.first_trainable(64), Some(0));
        assert_eq!(Freeze::All.first_trainable(64), None);
    }
}
