//! Global feature extraction: fully connected projection of the flattened
//! backbone feature map to the global embedding.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm1dLayer, LinearLayer};
use crate::rng::RngStream;
use crate::tensor::ops::{self, Mode};
use crate::tensor::{HasParams, Parameter, Scalar, Tensor};

pub struct GlobalHead<T: Scalar> {
    proj: LinearLayer<T>,
    bn: Option<BatchNorm1dLayer<T>>,
    in_shape: (usize, usize, usize),
    embed_dim: usize,
}

impl<T: Scalar> GlobalHead<T> {
    pub fn new(
        feature_shape: (usize, usize, usize),
        embed_dim: usize,
        batch_norm: bool,
        rng: &RngStream,
    ) -> Self {
        let (c, h, w) = feature_shape;
        let rng = rng.substream("gfe");
        GlobalHead {
            proj: LinearLayer::new("gfe.proj", c * h * w, embed_dim, &rng),
            bn: batch_norm.then(|| BatchNorm1dLayer::new("gfe.bn", embed_dim)),
            in_shape: feature_shape,
            embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn bn_layer(&self) -> Option<&BatchNorm1dLayer<T>> {
        self.bn.as_ref()
    }

    /// Feature maps [N,c_f,h_f,w_f] -> raw embeddings [N,D].
    ///
    /// The output is deliberately not L2-normalized: the fusion stage reads
    /// quality off the embedding norms, and the margin head normalizes.
    pub fn forward(&self, fmap: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, h, w) = fmap.dims4("global_embed")?;
        if (c, h, w) != self.in_shape {
            return Err(Error::BadShape {
                op: "global_embed",
                shape: fmap.shape().to_vec(),
                reason: format!("head was built for {:?}", self.in_shape),
            });
        }
        let flat = ops::flatten(fmap)?;
        let mut y = self.proj.forward(&flat)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(&y, mode)?;
        }
        Ok(y)
    }
}

impl<T: Scalar> HasParams<T> for GlobalHead<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.proj.for_each_param(f);
        if let Some(bn) = &self.bn {
            bn.for_each_param(f);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.proj.for_each_param_mut(f);
        if let Some(bn) = &mut self.bn {
            bn.for_each_param_mut(f);
        }
    }
}
