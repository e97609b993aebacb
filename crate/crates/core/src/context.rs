//! Context network: whole image -> two coarse saliency maps.
//!
//! A plain stack of conv blocks, each halving resolution with a 2x2 mean
//! downsample, followed by a 1x1 convolution and a sigmoid. Image-level
//! scores are the mean of the top `t` fraction of each map.

use glcn_tensor::{Float, Graph, Padding, Param, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError, TrainingMeta};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormLayer, Conv2dLayer, ConvBlock, LayerSpec, Mode, Module};
use crate::rng::{keys, stream};

pub const KIND: &str = "context";
pub const SALIENCY_CLASSES: [&str; 2] = ["malignant", "benign"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextNetConfig {
    pub widths: Vec<usize>,
    /// Image pixels per saliency cell along each axis.
    pub grid_factor: usize,
    /// Mean-pool factor applied to the image before the backbone (1 = none).
    pub input_downsample: usize,
    /// Fraction of cells averaged for the image-level score.
    pub pool_fraction: f64,
}

impl Default for ContextNetConfig {
    fn default() -> Self {
        Self {
            widths: vec![8, 16, 16, 32],
            grid_factor: 16,
            input_downsample: 1,
            pool_fraction: 0.02,
        }
    }
}

impl ContextNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("context net widths must be non-empty and positive".into()));
        }
        if !matches!(self.input_downsample, 1 | 2 | 4) {
            return Err(Error::Config("context input downsample must be 1, 2 or 4".into()));
        }
        let stride = self.input_downsample << self.widths.len();
        if stride != self.grid_factor {
            return Err(Error::Config(format!(
                "context net stride {stride} does not equal the grid factor {}",
                self.grid_factor
            )));
        }
        if !(self.pool_fraction > 0.0 && self.pool_fraction <= 1.0) {
            return Err(Error::Config("pool fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Two `h x w` maps in row-major order, entries in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPair {
    pub height: usize,
    pub width: usize,
    pub malignant: Vec<f32>,
    pub benign: Vec<f32>,
}

impl SaliencyPair {
    pub fn new(height: usize, width: usize, malignant: Vec<f32>, benign: Vec<f32>) -> Result<Self> {
        if malignant.len() != height * width || benign.len() != height * width {
            return Err(Error::InvalidInput(format!("saliency maps must have {height}x{width} entries")));
        }
        Ok(Self {
            height,
            width,
            malignant,
            benign,
        })
    }
}

/// Number of cells averaged by the top-fraction pool.
pub fn top_k(t: f64, cells: usize) -> usize {
    ((t * cells as f64 - 1e-9).ceil() as usize).clamp(1, cells)
}

fn top_mean(map: &[f32], k: usize) -> f64 {
    let mut v: Vec<f64> = map.iter().map(|&x| x as f64).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v[..k].iter().sum::<f64>() / k as f64
}

/// `(p_malignant, p_benign)`: mean of the top `ceil(t*h*w)` entries of each map.
pub fn image_scores(s: &SaliencyPair, t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidInput(format!("pool fraction {t} outside (0, 1]")));
    }
    let k = top_k(t, s.height * s.width);
    Ok((top_mean(&s.malignant, k), top_mean(&s.benign, k)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextNet<T> {
    pub config: ContextNetConfig,
    pub blocks: Vec<ConvBlock<T>>,
    pub out: Conv2dLayer<T>,
}

impl<T: Float> ContextNet<T> {
    pub fn new(config: ContextNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[keys::INIT]);
        let mut blocks = Vec::new();
        let mut cin = 1;
        for (i, &w) in config.widths.iter().enumerate() {
            blocks.push(ConvBlock::new(&format!("block{}", i + 1), cin, w, true, &mut rng));
            cin = w;
        }
        let out = Conv2dLayer::new("saliency", cin, 2, 1, Padding::Same, &mut rng);
        Ok(Self { config, blocks, out })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for _ in 1..self.config.input_downsample {
            out.push(LayerSpec::AvgPool2);
        }
        for b in &self.blocks {
            out.extend(b.specs());
        }
        out.extend([self.out.spec(), LayerSpec::Sigmoid]);
        out
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.config.grid_factor;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image {height}x{width} is not divisible by the grid factor {f}"
            )));
        }
        Ok((height / f, width / f))
    }

    /// `x` is `[N,H,W,1]`; returns sigmoid maps `[N,H/f,W/f,2]`.
    pub fn saliency_forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[3] != 1 {
            return Err(Error::InvalidInput(format!("context net expects [N,H,W,1], got {shape:?}")));
        }
        self.grid_dims(shape[1], shape[2])?;
        let mut y = x;
        let mut d = self.config.input_downsample;
        while d > 1 {
            y = g.avg_pool2(y)?;
            d /= 2;
        }
        for b in &self.blocks {
            y = b.forward(g, y, mode)?;
        }
        let z = self.out.forward(g, y)?;
        Ok(g.sigmoid(z))
    }

    /// `[N,2]` image-level scores from saliency maps.
    pub fn scores_forward(&self, g: &mut Graph<T>, saliency: Var) -> Result<Var> {
        let s = g.value(saliency).shape().to_vec();
        let k = top_k(self.config.pool_fraction, s[1] * s[2]);
        Ok(g.top_k_mean(saliency, k)?)
    }

    /// Eval-mode saliency for a batch of images, each `height*width` pixels.
    pub fn infer(&self, images: &[&[f32]], height: usize, width: usize) -> Result<Vec<SaliencyPair>> {
        let (gh, gw) = self.grid_dims(height, width)?;
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(images.len() * height * width);
        for im in images {
            if im.len() != height * width {
                return Err(Error::InvalidInput("image size does not match".into()));
            }
            data.extend(im.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![images.len(), height, width, 1], data)?);
        let s = self.saliency_forward(&mut g, x, Mode::Eval)?;
        let vals = g.value(s).data();
        let cells = gh * gw;
        let mut out = Vec::with_capacity(images.len());
        for n in 0..images.len() {
            let chunk = &vals[n * cells * 2..(n + 1) * cells * 2];
            let m = chunk.iter().step_by(2).map(|v| v.to_f64_lossy() as f32).collect();
            let b = chunk.iter().skip(1).step_by(2).map(|v| v.to_f64_lossy() as f32).collect();
            out.push(SaliencyPair::new(gh, gw, m, b)?);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, training: TrainingMeta) -> Checkpoint {
        let network = serde_json::to_value(&self.config).expect("config serializes");
        nn::to_checkpoint(self, KIND, network, &SALIENCY_CLASSES, training)
    }

    pub fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        self.import_state(&ck.tensors, &ck.meta.uninitialized_norms)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND)?;
        let config: ContextNetConfig = serde_json::from_value(ck.meta.network.clone())
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let mut net = Self::new(config, 0)?;
        net.load_state(ck)?;
        Ok(net)
    }
}

impl<T: Float> Module<T> for ContextNet<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.conv.weight, &b.conv.bias, &b.norm.gamma, &b.norm.beta]);
        }
        out.extend([&self.out.weight, &self.out.bias]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.conv.weight, &mut b.conv.bias, &mut b.norm.gamma, &mut b.norm.beta]);
        }
        out.extend([&mut self.out.weight, &mut self.out.bias]);
        out
    }

    fn norms(&self) -> Vec<&BatchNormLayer<T>> {
        self.blocks.iter().map(|b| &b.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer<T>> {
        self.blocks.iter_mut().map(|b| &mut b.norm).collect()
    }
}
