//! Multi-head multi-scale local feature extraction.
//!
//! Each head (MSNet) runs one same-padding convolution per kernel scale,
//! gates every scale's map with a LANet spatial attention map, concatenates
//! the scales on the channel axis, applies squeeze-excitation channel
//! attention, and projects the flattened result to the head embedding.
//! Heads are concatenated on the feature axis into the local embedding.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm1dLayer, Conv2dLayer, LinearLayer};
use crate::rng::RngStream;
use crate::tensor::ops::{self, Mode};
use crate::tensor::{HasParams, Parameter, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhmsConfig {
    /// Odd kernel sizes, one per scale branch.
    pub scales: Vec<usize>,
    /// Number of parallel heads; the embedding dim must divide evenly.
    pub heads: usize,
    /// Channel reduction inside the LANet attention bottleneck.
    pub lanet_reduction: usize,
    /// Channel reduction inside the squeeze-excitation bottleneck.
    pub se_reduction: usize,
    /// Output channels of each per-scale convolution (None: keep c_f).
    pub scale_channels: Option<usize>,
}

impl Default for MhmsConfig {
    fn default() -> Self {
        MhmsConfig {
            scales: vec![1, 3, 5],
            heads: 4,
            lanet_reduction: 8,
            se_reduction: 16,
            scale_channels: None,
        }
    }
}

impl MhmsConfig {
    pub fn validate(&self, in_channels: usize, embed_dim: usize) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("mhms: scales must be non-empty".into()));
        }
        for &s in &self.scales {
            if s % 2 == 0 {
                return Err(Error::Config(format!("mhms: scale {s} must be odd")));
            }
        }
        if self.heads == 0 || embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "mhms: embedding dim {embed_dim} must be divisible by heads {}",
                self.heads
            )));
        }
        let cs = self.scale_channels.unwrap_or(in_channels);
        if cs == 0 || cs % self.lanet_reduction != 0 {
            return Err(Error::Config(format!(
                "mhms: scale channels {cs} must be divisible by lanet_reduction {}",
                self.lanet_reduction
            )));
        }
        let concat = cs * self.scales.len();
        if concat % self.se_reduction != 0 {
            return Err(Error::Config(format!(
                "mhms: concatenated channels {concat} must be divisible by se_reduction {}",
                self.se_reduction
            )));
        }
        Ok(())
    }
}

/// Diagnostic override forcing attention gates to a constant (used by the
/// gating-collapse checks; `None` fields leave the learned gates active).
#[derive(Debug, Clone, Copy, Default)]
pub struct GateOverride {
    pub lanet: Option<f64>,
    pub se: Option<f64>,
}

/// Two-layer 1x1 convolution spatial attention producing a single-channel
/// gate map in (0,1).
pub struct LaNet<T: Scalar> {
    conv1: Conv2dLayer<T>,
    conv2: Conv2dLayer<T>,
}

impl<T: Scalar> LaNet<T> {
    fn new(prefix: &str, channels: usize, reduction: usize, rng: &RngStream) -> Self {
        LaNet {
            conv1: Conv2dLayer::new(
                &format!("{prefix}.conv1"),
                channels,
                channels / reduction,
                1,
                1,
                rng,
            ),
            conv2: Conv2dLayer::new(&format!("{prefix}.conv2"), channels / reduction, 1, 1, 1, rng),
        }
    }

    /// The attention map [N,1,H,W].
    pub fn attention_map(&self, fmap: &Tensor<T>) -> Result<Tensor<T>> {
        let t = ops::relu(&self.conv1.forward(fmap)?);
        Ok(ops::sigmoid(&self.conv2.forward(&t)?))
    }
}

impl<T: Scalar> HasParams<T> for LaNet<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.for_each_param(f);
        self.conv2.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.for_each_param_mut(f);
        self.conv2.for_each_param_mut(f);
    }
}

/// Gate a feature map with a LANet attention map.
///
/// Exposed standalone so tests can force or replay gates.
pub fn lanet_apply<T: Scalar>(fmap: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mul_spatial_gate(fmap, gate)
}

/// Squeeze-excitation channel attention.
pub struct SeGate<T: Scalar> {
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
}

impl<T: Scalar> SeGate<T> {
    fn new(prefix: &str, channels: usize, reduction: usize, rng: &RngStream) -> Self {
        SeGate {
            fc1: LinearLayer::new(&format!("{prefix}.fc1"), channels, channels / reduction, rng),
            fc2: LinearLayer::new(&format!("{prefix}.fc2"), channels / reduction, channels, rng),
        }
    }

    /// Per-channel gates [N,C], each strictly in (0,1).
    pub fn gates(&self, fmap: &Tensor<T>) -> Result<Tensor<T>> {
        let squeezed = ops::global_avg_pool(fmap)?;
        let t = ops::relu(&self.fc1.forward(&squeezed)?);
        Ok(ops::sigmoid(&self.fc2.forward(&t)?))
    }
}

impl<T: Scalar> HasParams<T> for SeGate<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.fc1.for_each_param(f);
        self.fc2.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.fc1.for_each_param_mut(f);
        self.fc2.for_each_param_mut(f);
    }
}

/// Scale a feature map by per-channel gates.
pub fn se_apply<T: Scalar>(fmap: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mul_channel_gate(fmap, gates)
}

/// Captured attention values from one forward pass.
pub struct HeadAttention<T: Scalar> {
    /// One [N,1,H,W] map per scale, in scale order.
    pub lanet_maps: Vec<Tensor<T>>,
    /// [N, scales*c_s] squeeze-excitation gates.
    pub se_gates: Tensor<T>,
}

/// One multi-scale head.
pub struct MsNetHead<T: Scalar> {
    scale_convs: Vec<Conv2dLayer<T>>,
    lanets: Vec<LaNet<T>>,
    se: SeGate<T>,
    proj: LinearLayer<T>,
    bn: Option<BatchNorm1dLayer<T>>,
    scales: Vec<usize>,
}

impl<T: Scalar> MsNetHead<T> {
    fn new(
        prefix: &str,
        cfg: &MhmsConfig,
        in_shape: (usize, usize, usize),
        head_dim: usize,
        batch_norm: bool,
        rng: &RngStream,
    ) -> Self {
        let (c, h, w) = in_shape;
        let cs = cfg.scale_channels.unwrap_or(c);
        let scale_convs = cfg
            .scales
            .iter()
            .map(|&k| Conv2dLayer::new(&format!("{prefix}.scale{k}.conv"), c, cs, k, 1, rng))
            .collect();
        let lanets = cfg
            .scales
            .iter()
            .map(|&k| {
                LaNet::new(
                    &format!("{prefix}.scale{k}.lanet"),
                    cs,
                    cfg.lanet_reduction,
                    rng,
                )
            })
            .collect();
        let concat_channels = cs * cfg.scales.len();
        let se = SeGate::new(&format!("{prefix}.se"), concat_channels, cfg.se_reduction, rng);
        let proj = LinearLayer::new(&format!("{prefix}.proj"), concat_channels * h * w, head_dim, rng);
        let bn = batch_norm.then(|| BatchNorm1dLayer::new(&format!("{prefix}.bn"), head_dim));
        MsNetHead {
            scale_convs,
            lanets,
            se,
            proj,
            bn,
            scales: cfg.scales.clone(),
        }
    }

    fn forward_collect(
        &self,
        fmap: &Tensor<T>,
        mode: Mode,
        force: Option<GateOverride>,
        mut capture: Option<&mut Vec<HeadAttention<T>>>,
    ) -> Result<Tensor<T>> {
        let (n, _, h, w) = fmap.dims4("msnet")?;
        let mut gated = Vec::with_capacity(self.scales.len());
        let mut maps = Vec::new();
        for (conv, lanet) in self.scale_convs.iter().zip(&self.lanets) {
            let y = conv.forward(fmap)?;
            let a = match force.and_then(|f| f.lanet) {
                Some(v) => Tensor::full(&[n, 1, h, w], T::from_f64(v)),
                None => lanet.attention_map(&y)?,
            };
            if capture.is_some() {
                maps.push(a.clone());
            }
            gated.push(lanet_apply(&y, &a)?);
        }
        let stacked = ops::concat(&gated, 1)?;
        let g = match force.and_then(|f| f.se) {
            Some(v) => Tensor::full(&[n, stacked.shape()[1]], T::from_f64(v)),
            None => self.se.gates(&stacked)?,
        };
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(HeadAttention {
                lanet_maps: maps,
                se_gates: g.clone(),
            });
        }
        let refined = se_apply(&stacked, &g)?;
        let mut out = self.proj.forward(&ops::flatten(&refined)?)?;
        if let Some(bn) = &self.bn {
            out = bn.forward(&out, mode)?;
        }
        Ok(out)
    }

    /// Feature map -> head embedding [N, d_h].
    pub fn forward(
        &self,
        fmap: &Tensor<T>,
        mode: Mode,
        force: Option<GateOverride>,
    ) -> Result<Tensor<T>> {
        self.forward_collect(fmap, mode, force, None)
    }
}

impl<T: Scalar> HasParams<T> for MsNetHead<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for c in &self.scale_convs {
            c.for_each_param(f);
        }
        for l in &self.lanets {
            l.for_each_param(f);
        }
        self.se.for_each_param(f);
        self.proj.for_each_param(f);
        if let Some(bn) = &self.bn {
            bn.for_each_param(f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for c in &mut self.scale_convs {
            c.for_each_param_mut(f);
        }
        for l in &mut self.lanets {
            l.for_each_param_mut(f);
        }
        self.se.for_each_param_mut(f);
        self.proj.for_each_param_mut(f);
        if let Some(bn) = &mut self.bn {
            bn.for_each_param_mut(f);
        }
    }
}

/// The multi-head extractor: `heads` MSNets concatenated on the feature axis.
pub struct Mhms<T: Scalar> {
    pub cfg: MhmsConfig,
    heads: Vec<MsNetHead<T>>,
    embed_dim: usize,
}

impl<T: Scalar> Mhms<T> {
    pub fn new(
        cfg: &MhmsConfig,
        in_shape: (usize, usize, usize),
        embed_dim: usize,
        batch_norm: bool,
        rng: &RngStream,
    ) -> Result<Self> {
        cfg.validate(in_shape.0, embed_dim)?;
        let rng = rng.substream("mhms");
        let head_dim = embed_dim / cfg.heads;
        let heads = (0..cfg.heads)
            .map(|i| {
                MsNetHead::new(
                    &format!("mhms.head{i}"),
                    cfg,
                    in_shape,
                    head_dim,
                    batch_norm,
                    &rng,
                )
            })
            .collect();
        Ok(Mhms {
            cfg: cfg.clone(),
            heads,
            embed_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn head(&self, i: usize) -> &MsNetHead<T> {
        &self.heads[i]
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Feature maps [N,c_f,h_f,w_f] -> local embeddings [N,D].
    pub fn forward(
        &self,
        fmap: &Tensor<T>,
        mode: Mode,
        force: Option<GateOverride>,
    ) -> Result<Tensor<T>> {
        let outs: Vec<Tensor<T>> = self
            .heads
            .iter()
            .map(|h| h.forward(fmap, mode, force))
            .collect::<Result<_>>()?;
        ops::concat(&outs, 1)
    }

    /// Visit per-head projection batch-norm layers, if enabled.
    pub fn for_each_bn_layer(&self, f: &mut dyn FnMut(&crate::nn::BatchNorm1dLayer<T>)) {
        for h in &self.heads {
            if let Some(bn) = &h.bn {
                f(bn);
            }
        }
    }

    /// Run the normal forward path capturing every LANet map and SE gate
    /// vector; values are bit-identical to what `forward` used.
    pub fn attention_dump(&self, fmap: &Tensor<T>) -> Result<AttentionDump> {
        let mut captured: Vec<HeadAttention<T>> = Vec::new();
        crate::tensor::no_grad(|| -> Result<()> {
            for h in &self.heads {
                h.forward_collect(fmap, Mode::Eval, None, Some(&mut captured))?;
            }
            Ok(())
        })?;
        let mut entries = Vec::new();
        for (hi, att) in captured.iter().enumerate() {
            for (si, map) in att.lanet_maps.iter().enumerate() {
                entries.push(DumpEntry {
                    name: format!("head{hi}.scale{}.lanet", self.cfg.scales[si]),
                    head: hi,
                    scale: Some(self.cfg.scales[si]),
                    shape: map.shape().to_vec(),
                    values: map.to_f32_vec(),
                });
            }
            entries.push(DumpEntry {
                name: format!("head{hi}.se"),
                head: hi,
                scale: None,
                shape: att.se_gates.shape().to_vec(),
                values: att.se_gates.to_f32_vec(),
            });
        }
        Ok(AttentionDump { entries })
    }
}

impl<T: Scalar> HasParams<T> for Mhms<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        for h in &self.heads {
            h.for_each_param(f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for h in &mut self.heads {
            h.for_each_param_mut(f);
        }
    }
}

/// One dumped attention array.
pub struct DumpEntry {
    pub name: String,
    pub head: usize,
    pub scale: Option<usize>,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Attention maps and gate vectors captured from a forward pass, writable as
/// a JSON manifest plus a flat little-endian f32 blob.
pub struct AttentionDump {
    pub entries: Vec<DumpEntry>,
}

#[derive(Serialize, Deserialize)]
struct DumpManifestEntry {
    name: String,
    head: usize,
    scale: Option<usize>,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct DumpManifest {
    blob: String,
    entries: Vec<DumpManifestEntry>,
}

impl AttentionDump {
    /// Write `attention.json` and `attention.bin` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = DumpManifest {
            blob: "attention.bin".into(),
            entries: Vec::new(),
        };
        let mut offset = 0usize;
        for e in &self.entries {
            manifest.entries.push(DumpManifestEntry {
                name: e.name.clone(),
                head: e.head,
                scale: e.scale,
                shape: e.shape.clone(),
                offset,
                len: e.values.len(),
            });
            for v in &e.values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += e.values.len();
        }
        let mut f = std::fs::File::create(dir.join("attention.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        std::fs::write(dir.join("attention.bin"), blob)?;
        Ok(())
    }
}
