//! Layer building blocks shared by the three networks.
//!
//! Each layer owns its [`Param`]s under a dotted name (`block1.conv.weight`)
//! and knows how to place itself on a [`Graph`]. Batch-norm running state
//! lives outside the graph and is folded in after each training step via
//! [`Module::absorb_batch_stats`].

use glcn_tensor::{Float, Graph, NormMode, Padding, Param, Tensor, TensorError, Var};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative description of one layer, used for validation and echoed into
/// checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        same_padding: bool,
    },
    Dense {
        inputs: usize,
        units: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Sigmoid,
    AvgPool2,
    Gap,
    Center,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv {
                in_channels,
                filters,
                kernel,
                ..
            } => {
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("conv kernel {kernel} must be odd")));
                }
                if in_channels == 0 || filters == 0 {
                    return Err(Error::Config("conv channel counts must be positive".into()));
                }
            }
            LayerSpec::Dense { inputs, units } => {
                if inputs == 0 || units == 0 {
                    return Err(Error::Config("dense unit counts must be positive".into()));
                }
            }
            LayerSpec::BatchNorm { channels } if channels == 0 => {
                return Err(Error::Config("batch norm needs at least one channel".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Zero-mean Gaussian with variance `2 / fan_in`.
pub fn he_init<T: Float>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    assert!(fan_in > 0, "fan_in must be positive");
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub padding: Padding,
}

impl<T: Float> Conv2dLayer<T> {
    pub fn new(name: &str, in_channels: usize, filters: usize, kernel: usize, padding: Padding, rng: &mut Rng) -> Self {
        let weight = he_init(&[kernel, kernel, in_channels, filters], kernel * kernel * in_channels, rng);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![filters])),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn filters(&self) -> usize {
        self.weight.value.shape()[3]
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec::Conv {
            in_channels: self.in_channels(),
            filters: self.filters(),
            kernel: self.weight.value.shape()[0],
            same_padding: self.padding == Padding::Same,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let b = g.param(&self.bias.name, &self.bias.value);
        Ok(g.conv2d(x, w, b, self.padding)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> DenseLayer<T> {
    pub fn new(name: &str, inputs: usize, units: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), he_init(&[inputs, units], inputs, rng)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![units])),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let s = self.weight.value.shape();
        LayerSpec::Dense {
            inputs: s[0],
            units: s[1],
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight.name, &self.weight.value);
        let b = g.param(&self.bias.name, &self.bias.value);
        Ok(g.dense(x, w, b)?)
    }
}

/// Running mean/variance. `None` until the first training batch is seen.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: RunningStats<T>,
}

impl<T: Float> BatchNormLayer<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running: RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
                initialized: false,
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.gamma.name, &self.gamma.value);
        let beta = g.param(&self.beta.name, &self.beta.value);
        let eps = T::from_f64_lossy(BN_EPS);
        let out = match mode {
            Mode::Train => g.batch_norm(&self.name, x, gamma, beta, NormMode::Train, eps)?,
            Mode::Eval => {
                if !self.running.initialized {
                    return Err(TensorError::UninitializedRunningStats(self.name.clone()).into());
                }
                let mode = NormMode::Eval {
                    mean: &self.running.mean,
                    var: &self.running.var,
                };
                g.batch_norm(&self.name, x, gamma, beta, mode, eps)?
            }
        };
        Ok(out)
    }

    /// Fold the batch statistics recorded on `g` into the running state.
    /// The first update copies them; later ones use an EMA with unbiased variance.
    pub fn absorb(&mut self, g: &Graph<T>) {
        let Some(stats) = g.batch_stats(&self.name) else {
            return;
        };
        let n = stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            let m = stats.mean[c];
            let v = stats.var[c] * correction;
            if self.running.initialized {
                let old_m = self.running.mean[c].to_f64_lossy();
                let old_v = self.running.var[c].to_f64_lossy();
                self.running.mean[c] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * old_m + BN_MOMENTUM * m);
                self.running.var[c] = T::from_f64_lossy((1.0 - BN_MOMENTUM) * old_v + BN_MOMENTUM * v);
            } else {
                self.running.mean[c] = T::from_f64_lossy(m);
                self.running.var[c] = T::from_f64_lossy(v);
            }
        }
        self.running.initialized = true;
    }
}

/// conv -> batch norm -> ReLU -> optional 2x2 mean downsample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2dLayer<T>,
    pub norm: BatchNormLayer<T>,
    pub pool: bool,
}

impl<T: Float> ConvBlock<T> {
    pub fn new(name: &str, in_channels: usize, filters: usize, pool: bool, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2dLayer::new(&format!("{name}.conv"), in_channels, filters, 3, Padding::Same, rng),
            norm: BatchNormLayer::new(&format!("{name}.bn"), filters),
            pool,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.norm.forward(g, y, mode)?;
        let y = g.relu(y);
        if self.pool {
            Ok(g.avg_pool2(y)?)
        } else {
            Ok(y)
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut out = vec![
            self.conv.spec(),
            LayerSpec::BatchNorm {
                channels: self.norm.channels(),
            },
            LayerSpec::Relu,
        ];
        if self.pool {
            out.push(LayerSpec::AvgPool2);
        }
        out
    }
}

/// A named state tensor as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Common plumbing over a network's parameters and normalization state.
pub trait Module<T: Float> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    fn norms(&self) -> Vec<&BatchNormLayer<T>>;
    fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>>;

    fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn collect_grads(&mut self, g: &Graph<T>) {
        for p in self.params_mut() {
            p.grad = g.param_grad(&p.name);
        }
    }

    fn absorb_batch_stats(&mut self, g: &Graph<T>) {
        for bn in self.norms_mut() {
            bn.absorb(g);
        }
    }

    fn uninitialized_norms(&self) -> Vec<String> {
        self.norms()
            .iter()
            .filter(|bn| !bn.running.initialized)
            .map(|bn| bn.name.clone())
            .collect()
    }

    /// Parameters in declaration order, then each norm's running mean and variance.
    fn export_state(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect();
        for bn in self.norms() {
            for (suffix, values) in [("running_mean", &bn.running.mean), ("running_var", &bn.running.var)] {
                out.push(NamedTensor {
                    name: format!("{}.{suffix}", bn.name),
                    shape: vec![values.len()],
                    data: values.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                });
            }
        }
        out
    }

    /// Inverse of [`Module::export_state`]. Tensors are matched positionally;
    /// the first name or shape disagreement is reported.
    fn import_state(&mut self, tensors: &[NamedTensor], uninitialized: &[String]) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = self
            .export_state()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        for (i, (name, shape)) in expected.iter().enumerate() {
            let Some(found) = tensors.get(i) else {
                return Err(crate::checkpoint::CheckpointError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: format!("{name} {shape:?}"),
                    found: "no tensor".into(),
                }
                .into());
            };
            if &found.name != name || &found.shape != shape {
                return Err(crate::checkpoint::CheckpointError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: format!("{name} {shape:?}"),
                    found: format!("{} {:?}", found.name, found.shape),
                }
                .into());
            }
        }
        if tensors.len() != expected.len() {
            let extra = &tensors[expected.len()];
            return Err(crate::checkpoint::CheckpointError::ShapeMismatch {
                tensor: extra.name.clone(),
                expected: format!("{} tensors", expected.len()),
                found: format!("{} tensors", tensors.len()),
            }
            .into());
        }
        let to_t = |d: &[f32]| d.iter().map(|&v| T::from_f64_lossy(v as f64)).collect::<Vec<T>>();
        let n_params = self.params().len();
        for (p, t) in self.params_mut().into_iter().zip(tensors) {
            p.value = Tensor::new(t.shape.clone(), to_t(&t.data))?;
            p.grad = None;
        }
        for (k, bn) in self.norms_mut().into_iter().enumerate() {
            bn.running.mean = to_t(&tensors[n_params + 2 * k].data);
            bn.running.var = to_t(&tensors[n_params + 2 * k + 1].data);
            bn.running.initialized = !uninitialized.contains(&bn.name);
        }
        Ok(())
    }
}

/// Package a module's state with its metadata.
pub fn to_checkpoint<T: Float, M: Module<T>>(
    module: &M,
    kind: &str,
    network: serde_json::Value,
    class_order: &[&str],
    training: crate::checkpoint::TrainingMeta,
) -> crate::checkpoint::Checkpoint {
    let tensors = module.export_state();
    crate::checkpoint::Checkpoint {
        meta: crate::checkpoint::CheckpointMeta {
            kind: kind.to_string(),
            network,
            class_order: class_order.iter().map(|s| s.to_string()).collect(),
            uninitialized_norms: module.uninitialized_norms(),
            training,
            tensor_count: tensors.len(),
        },
        tensors,
    }
}

/// Uniform draw used by several samplers; kept here to avoid repeating the
/// `rand` import dance.
pub(crate) fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn layer_spec_rejects_even_kernels_and_zero_units() {
        let even = LayerSpec::Conv {
            in_channels: 1,
            filters: 1,
            kernel: 2,
            same_padding: true,
        };
        assert!(even.validate().is_err());
        assert!(LayerSpec::Dense { inputs: 3, units: 0 }.validate().is_err());
        assert!(LayerSpec::Relu.validate().is_ok());
    }

    #[test]
    fn first_absorb_copies_then_ema() {
        let mut bn = BatchNormLayer::<f64>::new("bn", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        bn.forward(&mut g, x, Mode::Train).unwrap();
        bn.absorb(&g);
        assert!(bn.running.initialized);
        assert_eq!(bn.running.mean, vec![2.5]);
        // unbiased variance of 1..4
        assert!((bn.running.var[0] - 5.0 / 3.0).abs() < 1e-12);

        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 1], vec![10.0, 10.0]).unwrap());
        bn.forward(&mut g, x, Mode::Train).unwrap();
        bn.absorb(&g);
        assert!((bn.running.mean[0] - (0.9 * 2.5 + 1.0)).abs() < 1e-12);
        assert!((bn.running.var[0] - 0.9 * 5.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn eval_on_fresh_norm_is_rejected() {
        let bn = BatchNormLayer::<f64>::new("bn", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let err = bn.forward(&mut g, x, Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("bn"), "{err}");
    }

    #[test]
    fn he_init_is_seeded() {
        let a: Tensor<f32> = he_init(&[3, 3, 2, 4], 18, &mut stream(1, &[]));
        let b: Tensor<f32> = he_init(&[3, 3, 2, 4], 18, &mut stream(1, &[]));
        let c: Tensor<f32> = he_init(&[3, 3, 2, 4], 18, &mut stream(2, &[]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
