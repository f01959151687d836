//! Residual CNN backbone producing the shared face feature map.
//!
//! A pre-activation residual net standing in for a large production
//! backbone: a stem convolution, then one stage per channel width, each
//! entered through a stride-2 convolution that halves the spatial size.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2dLayer, Conv2dLayer};
use crate::rng::RngStream;
use crate::tensor::ops::{self, Mode};
use crate::tensor::{HasParams, Parameter, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Input image size (H, W).
    pub input_size: (usize, usize),
    /// Output channels per stage; each stage halves the spatial dims.
    pub channel_widths: Vec<usize>,
    /// Residual blocks per stage (two 3x3 convs each).
    pub blocks_per_stage: usize,
    /// Per-channel batch norm inside residual blocks (off by default to keep
    /// forward passes instanceless and deterministic per sample).
    pub batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: (32, 32),
            channel_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            batch_norm: false,
        }
    }
}

fn half(x: usize) -> usize {
    // Stride-2 3x3 convolution with padding 1: (x + 2 - 3) / 2 + 1.
    (x - 1) / 2 + 1
}

impl BackboneConfig {
    /// Validate and return the output feature-map shape (c_f, h_f, w_f).
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        if self.channel_widths.is_empty() {
            return Err(Error::Config("channel_widths must be non-empty".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be >= 1".into()));
        }
        let (mut h, mut w) = self.input_size;
        if h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "input size {h}x{w} too small"
            )));
        }
        for _ in &self.channel_widths {
            h = half(h);
            w = half(w);
        }
        if h < 4 || w < 4 {
            return Err(Error::Config(format!(
                "feature map {h}x{w} after {} stages is smaller than 4x4; \
                 use a larger input or fewer stages",
                self.channel_widths.len()
            )));
        }
        Ok((*self.channel_widths.last().unwrap(), h, w))
    }
}

struct ResidualBlock<T: Scalar> {
    conv1: Conv2dLayer<T>,
    conv2: Conv2dLayer<T>,
    bn1: Option<BatchNorm2dLayer<T>>,
    bn2: Option<BatchNorm2dLayer<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(prefix: &str, width: usize, batch_norm: bool, rng: &RngStream) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::new(&format!("{prefix}.conv1"), width, width, 3, 1, rng),
            conv2: Conv2dLayer::new(&format!("{prefix}.conv2"), width, width, 3, 1, rng),
            bn1: batch_norm.then(|| BatchNorm2dLayer::new(&format!("{prefix}.bn1"), width)),
            bn2: batch_norm.then(|| BatchNorm2dLayer::new(&format!("{prefix}.bn2"), width)),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut t = match &self.bn1 {
            Some(bn) => bn.forward(x, mode)?,
            None => x.clone(),
        };
        t = self.conv1.forward(&ops::relu(&t))?;
        if let Some(bn) = &self.bn2 {
            t = bn.forward(&t, mode)?;
        }
        t = self.conv2.forward(&ops::relu(&t))?;
        ops::add(x, &t)
    }
}

impl<T: Scalar> HasParams<T> for ResidualBlock<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.for_each_param(f);
        self.conv2.for_each_param(f);
        if let Some(bn) = &self.bn1 {
            bn.for_each_param(f);
        }
        if let Some(bn) = &self.bn2 {
            bn.for_each_param(f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.for_each_param_mut(f);
        self.conv2.for_each_param_mut(f);
        if let Some(bn) = &mut self.bn1 {
            bn.for_each_param_mut(f);
        }
        if let Some(bn) = &mut self.bn2 {
            bn.for_each_param_mut(f);
        }
    }
}

struct Stage<T: Scalar> {
    entry: Conv2dLayer<T>,
    blocks: Vec<ResidualBlock<T>>,
}

pub struct BackboneNet<T: Scalar> {
    pub cfg: BackboneConfig,
    stem: Conv2dLayer<T>,
    stages: Vec<Stage<T>>,
    feature_shape: (usize, usize, usize),
}

/// Deterministically build a backbone from the config and a seed stream.
pub fn build_backbone<T: Scalar>(cfg: &BackboneConfig, rng: &RngStream) -> Result<BackboneNet<T>> {
    let feature_shape = cfg.feature_shape()?;
    let rng = rng.substream("backbone");
    let stem = Conv2dLayer::new("backbone.stem", 3, cfg.channel_widths[0], 3, 1, &rng);
    let mut stages = Vec::new();
    let mut prev = cfg.channel_widths[0];
    for (si, &width) in cfg.channel_widths.iter().enumerate() {
        let entry = Conv2dLayer::new(&format!("backbone.stage{si}.entry"), prev, width, 3, 2, &rng);
        let blocks = (0..cfg.blocks_per_stage)
            .map(|bi| {
                ResidualBlock::new(
                    &format!("backbone.stage{si}.block{bi}"),
                    width,
                    cfg.batch_norm,
                    &rng,
                )
            })
            .collect();
        stages.push(Stage { entry, blocks });
        prev = width;
    }
    Ok(BackboneNet {
        cfg: cfg.clone(),
        stem,
        stages,
        feature_shape,
    })
}

impl<T: Scalar> BackboneNet<T> {
    /// (c_f, h_f, w_f) of the produced feature map.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.feature_shape
    }

    /// Visit the batch-norm layers, if the config enabled them.
    pub fn for_each_bn_layer(&self, f: &mut dyn FnMut(&BatchNorm2dLayer<T>)) {
        for s in &self.stages {
            for b in &s.blocks {
                if let Some(bn) = &b.bn1 {
                    f(bn);
                }
                if let Some(bn) = &b.bn2 {
                    f(bn);
                }
            }
        }
    }

    /// Images [N,3,H,W] -> feature maps [N,c_f,h_f,w_f].
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, h, w) = images.dims4("backbone")?;
        let (eh, ew) = self.cfg.input_size;
        if c != 3 || h != eh || w != ew {
            return Err(Error::BadShape {
                op: "backbone",
                shape: images.shape().to_vec(),
                reason: format!("expected [N,3,{eh},{ew}] input"),
            });
        }
        let mut x = self.stem.forward(images)?;
        for stage in &self.stages {
            x = stage.entry.forward(&ops::relu(&x))?;
            for block in &stage.blocks {
                x = block.forward(&x, mode)?;
            }
        }
        Ok(ops::relu(&x))
    }
}

impl<T: Scalar> HasParams<T> for BackboneNet<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.stem.for_each_param(f);
        for s in &self.stages {
            s.entry.for_each_param(f);
            for b in &s.blocks {
                b.for_each_param(f);
            }
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.stem.for_each_param_mut(f);
        for s in &mut self.stages {
            s.entry.for_each_param_mut(f);
            for b in &mut s.blocks {
                b.for_each_param_mut(f);
            }
        }
    }
}
