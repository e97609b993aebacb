//! Aggregation network: `[BN -> ReLU -> conv 3x3 (32)] x 2 -> GAP -> dense(4)`.

use glcn_tensor::{Float, Graph, Padding, Param, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, TrainingMeta};
use crate::error::{Error, Result};
use crate::local::NUM_CLASSES;
use crate::maps::MapSelection;
use crate::nn::{self, BatchNormLayer, Conv2dLayer, DenseLayer, LayerSpec, Mode, Module};
use crate::patch::CLASS_NAMES;
use crate::rng::{keys, stream};

pub const KIND: &str = "agg";
pub const AGG_FILTERS: usize = 32;
pub const AGG_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggNetConfig {
    pub selection: MapSelection,
}

impl AggNetConfig {
    pub fn in_channels(&self) -> usize {
        self.selection.channels()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggNet<T> {
    pub config: AggNetConfig,
    pub bn1: BatchNormLayer<T>,
    pub conv1: Conv2dLayer<T>,
    pub bn2: BatchNormLayer<T>,
    pub conv2: Conv2dLayer<T>,
    pub head: DenseLayer<T>,
}

impl<T: Float> AggNet<T> {
    pub fn new(config: AggNetConfig, seed: u64) -> Self {
        let m = config.in_channels();
        let mut rng = stream(seed, &[keys::INIT]);
        Self {
            config,
            bn1: BatchNormLayer::new("bn1", m),
            conv1: Conv2dLayer::new("conv1", m, AGG_FILTERS, AGG_KERNEL, Padding::Same, &mut rng),
            bn2: BatchNormLayer::new("bn2", AGG_FILTERS),
            conv2: Conv2dLayer::new("conv2", AGG_FILTERS, AGG_FILTERS, AGG_KERNEL, Padding::Same, &mut rng),
            head: DenseLayer::new("head", AGG_FILTERS, NUM_CLASSES, &mut rng),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::BatchNorm {
                channels: self.config.in_channels(),
            },
            LayerSpec::Relu,
            self.conv1.spec(),
            LayerSpec::BatchNorm { channels: AGG_FILTERS },
            LayerSpec::Relu,
            self.conv2.spec(),
            LayerSpec::Gap,
            self.head.spec(),
        ]
    }

    /// `x` is `[N,h,w,M]`; returns logits `[N,4]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        let m = self.config.in_channels();
        if shape.len() != 4 || shape[3] != m {
            return Err(Error::InvalidInput(format!(
                "aggregation net expects M = {m} input channels, got {} (shape {shape:?})",
                shape.last().copied().unwrap_or(0)
            )));
        }
        let y = self.bn1.forward(g, x, mode)?;
        let y = g.relu(y);
        let y = self.conv1.forward(g, y)?;
        let y = self.bn2.forward(g, y, mode)?;
        let y = g.relu(y);
        let y = self.conv2.forward(g, y)?;
        let y = g.global_avg_pool(y)?;
        self.head.forward(g, y)
    }

    /// Eval-mode logits for a stacked `[N,h,w,M]` input.
    pub fn infer(&self, x: Tensor<T>) -> Result<Vec<[f64; NUM_CLASSES]>> {
        let mut g = Graph::new();
        let x = g.input(x);
        let z = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(z)
            .data()
            .chunks_exact(NUM_CLASSES)
            .map(|c| std::array::from_fn(|i| c[i].to_f64_lossy()))
            .collect())
    }

    pub fn to_checkpoint(&self, training: TrainingMeta) -> Checkpoint {
        let network = serde_json::to_value(self.config).expect("config serializes");
        nn::to_checkpoint(self, KIND, network, &CLASS_NAMES, training)
    }

    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.import_state(&ck.tensors, &ck.meta.uninitialized_norms)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: AggNetConfig = serde_json::from_value(ck.meta.network.clone())
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut net = Self::new(config, 0);
        net.load_state(ck)?;
        Ok(net)
    }
}

impl<T: Float> Module<T> for AggNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.conv1.weight,
            &self.conv1.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    fn norms(&self) -> Vec<&BatchNormLayer<T>> {
        vec![&self.bn1, &self.bn2]
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        vec![&mut self.bn1, &mut self.bn2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv1_weight_count_for_embedding_plus_saliency() {
        let net = AggNet::<f32>::new(
            AggNetConfig {
                selection: MapSelection::EMBEDDING_SALIENCY,
            },
            0,
        );
        assert_eq!(net.conv1.weight.value.numel(), 9_792);
    }
}
