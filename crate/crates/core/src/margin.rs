//! Margin-softmax classification heads (CosFace / ArcFace).
//!
//! Embeddings and class weights are L2-normalized, so logits are cosines.
//! The target-class cosine is penalized by a cosine margin (CosFace) or an
//! additive angular margin (ArcFace) and everything is scaled by `s` before
//! the softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::ops;
use crate::tensor::{HasParams, Parameter, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    /// Plain normalized softmax: s * cos(theta).
    None,
    /// s * (cos(theta) - m) on the target class.
    CosFace,
    /// s * cos(theta + m) on the target class, with a linear fallback past
    /// the angular validity threshold.
    ArcFace,
}

impl std::str::FromStr for MarginKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MarginKind::None),
            "cosface" => Ok(MarginKind::CosFace),
            "arcface" => Ok(MarginKind::ArcFace),
            other => Err(Error::Config(format!(
                "unknown margin kind '{other}' (expected none|cosface|arcface)"
            ))),
        }
    }
}

impl MarginKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MarginKind::None => "none",
            MarginKind::CosFace => "cosface",
            MarginKind::ArcFace => "arcface",
        }
    }

    /// Conventional default margin for the kind.
    pub fn default_margin(&self) -> f64 {
        match self {
            MarginKind::None => 0.0,
            MarginKind::CosFace => 0.4,
            MarginKind::ArcFace => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub kind: MarginKind,
    pub s: f64,
    pub m: f64,
}

impl MarginConfig {
    pub fn new(kind: MarginKind, s: f64, m: Option<f64>) -> Self {
        MarginConfig {
            kind,
            s,
            m: m.unwrap_or_else(|| kind.default_margin()),
        }
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig::new(MarginKind::ArcFace, 64.0, None)
    }
}

/// Cosine logits: row-normalized embeddings against column-normalized class
/// weights, so every entry lies in [-1, 1]. Errors on a zero-norm embedding.
pub fn cosine_logits<T: Scalar>(embed: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let e = ops::l2_normalize_rows(embed).map_err(|err| match err {
        Error::ZeroNormRow { row, .. } => Error::ZeroNormRow {
            op: "cosine_logits",
            row,
        },
        other => other,
    })?;
    let w = ops::l2_normalize_cols(weight)?;
    ops::matmul(&e, &w)
}

/// Apply the margin transform to the target entries and scale everything by
/// `s`. The ArcFace branch switches to a slope-1 linear continuation through
/// the point (cos(pi - m), -1), which keeps the target logit continuous and
/// decreasing where cos(theta + m) would turn back up.
pub fn margin_logits<T: Scalar>(
    cos: &Tensor<T>,
    labels: &[usize],
    kind: MarginKind,
    s: f64,
    m: f64,
) -> Result<Tensor<T>> {
    let (n, k) = cos.dims2("margin_logits")?;
    if labels.len() != n {
        return Err(Error::DimMismatch {
            op: "margin_logits",
            axis: 0,
            left: n,
            right: labels.len(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                classes: k,
            });
        }
    }
    let sv = T::from_f64(s);
    let cos_m = m.cos();
    let sin_m = m.sin();
    let threshold = (std::f64::consts::PI - m).cos();
    let cd = cos.data();
    let mut out: Vec<T> = cd.iter().map(|&c| c * sv).collect();
    for (i, &l) in labels.iter().enumerate() {
        let c = cd[i * k + l].as_f64();
        let adjusted = match kind {
            MarginKind::None => c,
            MarginKind::CosFace => c - m,
            MarginKind::ArcFace => {
                if c > threshold {
                    c * cos_m - (1.0 - c * c).max(0.0).sqrt() * sin_m
                } else {
                    c - (1.0 - cos_m)
                }
            }
        };
        out[i * k + l] = T::from_f64(s * adjusted);
    }
    let need = cos.is_requires_grad();
    let labels_owned = labels.to_vec();
    let cos_saved: Vec<f64> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| cd[i * k + l].as_f64())
        .collect();
    Ok(Tensor::from_op(
        vec![n, k],
        out,
        vec![cos.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let mut gx: Vec<T> = g.iter().map(|&gv| gv * sv).collect();
                for (i, &l) in labels_owned.iter().enumerate() {
                    let c = cos_saved[i];
                    let slope = match kind {
                        MarginKind::None | MarginKind::CosFace => 1.0,
                        MarginKind::ArcFace => {
                            if c > threshold {
                                // d/dc [c cos m - sqrt(1-c^2) sin m]
                                let sin_t = (1.0 - c * c).max(1e-12).sqrt();
                                cos_m + c * sin_m / sin_t
                            } else {
                                1.0
                            }
                        }
                    };
                    gx[i * k + l] = g[i * k + l] * T::from_f64(s * slope);
                }
                gx
            })]
        }),
    ))
}

pub struct MarginHead<T: Scalar> {
    /// Class weights [D, n_classes], consumed in column-normalized form.
    pub weight: Parameter<T>,
    pub cfg: MarginConfig,
    pub n_classes: usize,
}

impl<T: Scalar> MarginHead<T> {
    pub fn new(embed_dim: usize, n_classes: usize, cfg: MarginConfig, rng: &RngStream) -> Self {
        let mut r = rng.substream("margin.weight");
        let data: Vec<T> = (0..embed_dim * n_classes)
            .map(|_| T::from_f64(r.normal()))
            .collect();
        MarginHead {
            weight: Parameter::new(
                "margin.weight",
                Tensor::from_vec(&[embed_dim, n_classes], data).unwrap(),
            ),
            cfg,
            n_classes,
        }
    }

    pub fn cosines(&self, embed: &Tensor<T>) -> Result<Tensor<T>> {
        cosine_logits(embed, &self.weight.value)
    }

    /// Margin loss and the raw cosine logits (for accuracy bookkeeping).
    pub fn loss(&self, embed: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let cos = self.cosines(embed)?;
        let logits = margin_logits(&cos, labels, self.cfg.kind, self.cfg.s, self.cfg.m)?;
        let loss = ops::softmax_cross_entropy(&logits, labels)?;
        Ok((loss, cos))
    }
}

impl<T: Scalar> HasParams<T> for MarginHead<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
    }
}
