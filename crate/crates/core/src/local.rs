//! The patch classifier: conv backbone, 32-unit embedding, 4-class head.
//!
//! Each patch is mean-centred before the backbone, so the network only sees
//! local structure and never the absolute brightness of the surrounding tissue.

use glcn_tensor::{Float, Graph, Param, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, TrainingMeta};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormLayer, ConvBlock, DenseLayer, LayerSpec, Mode, Module};
use crate::patch::CLASS_NAMES;
use crate::rng::{keys, stream};

pub const EMBED_DIM: usize = 32;
pub const NUM_CLASSES: usize = 4;
pub const KIND: &str = "local";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalNetConfig {
    pub patch_size: usize,
    pub widths: Vec<usize>,
}

impl Default for LocalNetConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl LocalNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config("local net needs at least two blocks".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("local net widths must be positive".into()));
        }
        let stride = 1usize << self.widths.len();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "patch size {} is not divisible by the backbone stride {stride}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LocalOutputs {
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalNet<T> {
    pub config: LocalNetConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub embed: DenseLayer<T>,
    pub head: DenseLayer<T>,
}

impl<T: Float> LocalNet<T> {
    pub fn new(config: LocalNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[keys::INIT]);
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ConvBlock::new(&format!("block{}", i + 1), cin, w, true, &mut rng));
            cin = w;
        }
        let embed = DenseLayer::new("embed", cin, EMBED_DIM, &mut rng);
        let head = DenseLayer::new("head", EMBED_DIM, NUM_CLASSES, &mut rng);
        Ok(Self {
            config,
            blocks,
            embed,
            head,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut out = vec![LayerSpec::Center];
        for b in &self.blocks {
            out.extend(b.specs());
        }
        out.extend([LayerSpec::Gap, self.embed.spec(), self.head.spec()]);
        out
    }

    /// `x` is `[N,S,S,1]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<LocalOutputs> {
        let s = self.config.patch_size;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 1 {
            return Err(Error::InvalidInput(format!(
                "local net expects patches [N,{s},{s},1], got {shape:?}"
            )));
        }
        let mut y = g.center_samples(x);
        for b in &self.blocks {
            y = b.forward(g, y, mode)?;
        }
        let pooled = g.global_avg_pool(y)?;
        let embedding = self.embed.forward(g, pooled)?;
        let logits = self.head_from_embedding(g, embedding)?;
        Ok(LocalOutputs { embedding, logits })
    }

    /// The classification layer applied directly to `h`.
    pub fn head_from_embedding(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        self.head.forward(g, h)
    }

    /// Eval-mode embeddings and logits for a batch of `S*S` patches.
    pub fn infer(&self, patches: &[&[f32]]) -> Result<(Vec<[f32; EMBED_DIM]>, Vec<[f32; NUM_CLASSES]>)> {
        let s = self.config.patch_size;
        let mut data = Vec::with_capacity(patches.len() * s * s);
        for p in patches {
            if p.len() != s * s {
                return Err(Error::InvalidInput(format!(
                    "patch has {} pixels, expected {}",
                    p.len(),
                    s * s
                )));
            }
            data.extend(p.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        if patches.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![patches.len(), s, s, 1], data)?);
        let out = self.forward(&mut g, x, Mode::Eval)?;
        let to_arr = |v: &[T]| -> Vec<f32> { v.iter().map(|x| x.to_f64_lossy() as f32).collect() };
        let h = to_arr(g.value(out.embedding).data());
        let z = to_arr(g.value(out.logits).data());
        Ok((
            h.chunks_exact(EMBED_DIM).map(|c| c.try_into().expect("32 wide")).collect(),
            z.chunks_exact(NUM_CLASSES).map(|c| c.try_into().expect("4 wide")).collect(),
        ))
    }

    pub fn to_checkpoint(&self, training: TrainingMeta) -> Checkpoint {
        let network = serde_json::to_value(&self.config).expect("config serializes");
        nn::to_checkpoint(self, KIND, network, &CLASS_NAMES, training)
    }

    /// Load weights into this network; shapes must match its current layout.
    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.import_state(&ck.tensors, &ck.meta.uninitialized_norms)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: LocalNetConfig = serde_json::from_value(ck.meta.network.clone())
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        if ck.meta.class_order != CLASS_NAMES {
            return Err(CheckpointError::Metadata(format!("unexpected class order {:?}", ck.meta.class_order)).into());
        }
        let mut net = Self::new(config, 0)?;
        net.load_state(ck)?;
        Ok(net)
    }
}

impl<T: Float> Module<T> for LocalNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv.weight, &b.conv.bias, &b.norm.gamma, &b.norm.beta]);
        }
        out.extend([&self.embed.weight, &self.embed.bias, &self.head.weight, &self.head.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.conv.weight, &mut b.conv.bias, &mut b.norm.gamma, &mut b.norm.beta]);
        }
        out.extend([
            &mut self.embed.weight,
            &mut self.embed.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]);
        out
    }

    fn norms(&self) -> Vec<&BatchNormLayer<T>> {
        self.blocks.iter().map(|b| &b.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        self.blocks.iter_mut().map(|b| &mut b.norm).collect()
    }
}
