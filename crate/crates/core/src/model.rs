//! Full face-representation model: backbone, branch extractors, fusion, and
//! margin head, assembled per fusion mode.

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, BackboneNet};
use crate::error::{Error, Result};
use crate::gfe::GlobalHead;
use crate::lgf::{
    feature_quality, fuse, lgf_forward, lgf_forward_eval, EmbeddingBundle, FusionState, LgfConfig,
};
use crate::margin::{MarginConfig, MarginHead};
use crate::mhms::{GateOverride, Mhms, MhmsConfig};
use crate::nn::{BatchNorm1dLayer, BatchNorm2dLayer};
use crate::rng::RngStream;
use crate::tensor::ops::Mode;
use crate::tensor::{no_grad, HasParams, Parameter, Scalar, Tensor};

/// Which branches feed the final embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Local branch only; the model is MHMS + margin head.
    LocalOnly,
    /// Global branch only; the model degenerates to a plain margin-softmax net.
    GlobalOnly,
    /// Both branches averaged with fixed even weights.
    DirectAdd,
    /// Norm-driven attention fusion.
    Lgf,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local_only" => Ok(FusionMode::LocalOnly),
            "global_only" => Ok(FusionMode::GlobalOnly),
            "direct_add" => Ok(FusionMode::DirectAdd),
            "lgf" => Ok(FusionMode::Lgf),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected local_only|global_only|direct_add|lgf)"
            ))),
        }
    }
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::LocalOnly => "local_only",
            FusionMode::GlobalOnly => "global_only",
            FusionMode::DirectAdd => "direct_add",
            FusionMode::Lgf => "lgf",
        }
    }

    pub fn uses_local(&self) -> bool {
        !matches!(self, FusionMode::GlobalOnly)
    }

    pub fn uses_global(&self) -> bool {
        !matches!(self, FusionMode::LocalOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mhms: MhmsConfig,
    pub embedding_dim: usize,
    pub lgf: LgfConfig,
    pub margin: MarginConfig,
    pub n_classes: usize,
    /// Batch norm on the embedding heads (GFE projection and MSNet projections).
    pub embed_batch_norm: bool,
    pub fusion_mode: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            mhms: MhmsConfig::default(),
            embedding_dim: 64,
            lgf: LgfConfig::default(),
            margin: MarginConfig::default(),
            n_classes: 20,
            embed_batch_norm: false,
            fusion_mode: FusionMode::Lgf,
        }
    }
}

pub struct FaceModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub backbone: BackboneNet<T>,
    pub mhms: Option<Mhms<T>>,
    pub gfe: Option<GlobalHead<T>>,
    pub fusion: FusionState,
    pub margin: MarginHead<T>,
    /// Completed training epochs (checkpoint metadata; 0 means untrained).
    pub epochs_trained: u64,
}

/// Output of one training forward pass.
pub struct TrainStep<T: Scalar> {
    pub loss: Tensor<T>,
    /// Fraction of the batch whose top cosine matches the label.
    pub accuracy: f64,
    pub mean_z_local: f64,
    pub mean_z_global: f64,
    pub mean_gamma_local: f64,
}

/// Build every component the fusion mode needs, with deterministic
/// per-parameter initialization from the seed.
pub fn assemble_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<FaceModel<T>> {
    let rng = RngStream::new(seed);
    let backbone = build_backbone(&cfg.backbone, &rng)?;
    let fshape = backbone.feature_shape();
    let mhms = if cfg.fusion_mode.uses_local() {
        Some(Mhms::new(
            &cfg.mhms,
            fshape,
            cfg.embedding_dim,
            cfg.embed_batch_norm,
            &rng,
        )?)
    } else {
        None
    };
    let gfe = cfg
        .fusion_mode
        .uses_global()
        .then(|| GlobalHead::new(fshape, cfg.embedding_dim, cfg.embed_batch_norm, &rng));
    let margin = MarginHead::new(cfg.embedding_dim, cfg.n_classes, cfg.margin, &rng);
    let model = FaceModel {
        cfg: cfg.clone(),
        backbone,
        mhms,
        gfe,
        fusion: FusionState::new(cfg.lgf),
        margin,
        epochs_trained: 0,
    };
    model.check_unique_names()?;
    Ok(model)
}

impl<T: Scalar> FaceModel<T> {
    fn check_unique_names(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut dup = None;
        self.for_each_param(&mut |p| {
            if !seen.insert(p.name.clone()) && dup.is_none() {
                dup = Some(p.name.clone());
            }
        });
        match dup {
            Some(name) => Err(Error::Config(format!("duplicate parameter name '{name}'"))),
            None => Ok(()),
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.fusion.set_mode(mode);
    }

    /// Branch embeddings for a batch; `None` for branches the mode omits.
    pub fn branch_embeddings(
        &self,
        images: &Tensor<T>,
        mode: Mode,
        force: Option<GateOverride>,
    ) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
        let fmap = self.backbone.forward(images, mode)?;
        let f_local = match &self.mhms {
            Some(m) => Some(m.forward(&fmap, mode, force)?),
            None => None,
        };
        let f_global = match &self.gfe {
            Some(g) => Some(g.forward(&fmap, mode)?),
            None => None,
        };
        Ok((f_local, f_global))
    }

    fn single_branch_bundle(f: &Tensor<T>, local: bool) -> Result<EmbeddingBundle<T>> {
        let n = f.shape()[0];
        let z = feature_quality(f)?;
        let zeros_t = Tensor::zeros(f.shape());
        let zeros = vec![0.0; n];
        let (gl, gg) = if local {
            (vec![1.0; n], vec![0.0; n])
        } else {
            (vec![0.0; n], vec![1.0; n])
        };
        Ok(EmbeddingBundle {
            f_local: if local { f.clone() } else { zeros_t.clone() },
            f_global: if local { zeros_t } else { f.clone() },
            z_local: if local { z.clone() } else { zeros.clone() },
            z_global: if local { zeros.clone() } else { z.clone() },
            q_local: if local { vec![1.0; n] } else { zeros.clone() },
            q_global: if local { zeros.clone() } else { vec![1.0; n] },
            gamma_local: gl,
            gamma_global: gg,
            fused: f.clone(),
        })
    }

    fn even_bundle(f_local: &Tensor<T>, f_global: &Tensor<T>) -> Result<EmbeddingBundle<T>> {
        let n = f_local.shape()[0];
        let half = vec![0.5; n];
        let fused = fuse(f_local, f_global, &half, &half)?;
        Ok(EmbeddingBundle {
            f_local: f_local.clone(),
            f_global: f_global.clone(),
            z_local: feature_quality(f_local)?,
            z_global: feature_quality(f_global)?,
            q_local: vec![1.0; n],
            q_global: vec![1.0; n],
            gamma_local: half.clone(),
            gamma_global: half,
            fused,
        })
    }

    /// Fuse branch embeddings per the configured mode. Train mode may update
    /// the fusion statistics (lgf mode only).
    pub fn fuse_branches(
        &mut self,
        f_local: Option<&Tensor<T>>,
        f_global: Option<&Tensor<T>>,
    ) -> Result<EmbeddingBundle<T>> {
        match self.cfg.fusion_mode {
            FusionMode::LocalOnly => Self::single_branch_bundle(
                f_local.expect("local branch missing in local_only mode"),
                true,
            ),
            FusionMode::GlobalOnly => Self::single_branch_bundle(
                f_global.expect("global branch missing in global_only mode"),
                false,
            ),
            FusionMode::DirectAdd => Self::even_bundle(
                f_local.expect("local branch missing in direct_add mode"),
                f_global.expect("global branch missing in direct_add mode"),
            ),
            FusionMode::Lgf => lgf_forward(
                f_local.expect("local branch missing in lgf mode"),
                f_global.expect("global branch missing in lgf mode"),
                &mut self.fusion,
            ),
        }
    }

    /// Read-only fusion (eval protocols).
    pub fn fuse_branches_eval(
        &self,
        f_local: Option<&Tensor<T>>,
        f_global: Option<&Tensor<T>>,
    ) -> Result<EmbeddingBundle<T>> {
        match self.cfg.fusion_mode {
            FusionMode::LocalOnly => Self::single_branch_bundle(f_local.unwrap(), true),
            FusionMode::GlobalOnly => Self::single_branch_bundle(f_global.unwrap(), false),
            FusionMode::DirectAdd => Self::even_bundle(f_local.unwrap(), f_global.unwrap()),
            FusionMode::Lgf => {
                lgf_forward_eval(f_local.unwrap(), f_global.unwrap(), &self.fusion)
            }
        }
    }

    /// One training forward pass: branch extraction, fusion, margin loss.
    pub fn forward_train(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<TrainStep<T>> {
        self.fusion.set_mode(Mode::Train);
        let (f_local, f_global) = self.branch_embeddings(images, Mode::Train, None)?;
        let bundle = self.fuse_branches(f_local.as_ref(), f_global.as_ref())?;
        let (loss, cos) = self.margin.loss(&bundle.fused, labels)?;

        let (n, k) = cos.dims2("forward_train")?;
        let mut correct = 0usize;
        for i in 0..n {
            let row = &cos.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == labels[i] {
                correct += 1;
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        Ok(TrainStep {
            loss,
            accuracy: correct as f64 / n as f64,
            mean_z_local: mean(&bundle.z_local),
            mean_z_global: mean(&bundle.z_global),
            mean_gamma_local: mean(&bundle.gamma_local),
        })
    }

    /// Eval-mode embedding of a batch; builds no graph and mutates nothing.
    pub fn embed(&self, images: &Tensor<T>) -> Result<EmbeddingBundle<T>> {
        no_grad(|| {
            let (f_local, f_global) = self.branch_embeddings(images, Mode::Eval, None)?;
            self.fuse_branches_eval(f_local.as_ref(), f_global.as_ref())
        })
    }

    /// Visit every batch-norm layer (running-statistic buffers live there).
    pub fn for_each_bn(&self, f: &mut dyn FnMut(BnRef<'_, T>)) {
        self.backbone.for_each_bn_layer(&mut |bn| f(BnRef::TwoD(bn)));
        if let Some(g) = &self.gfe {
            if let Some(bn) = g.bn_layer() {
                f(BnRef::OneD(bn));
            }
        }
        if let Some(m) = &self.mhms {
            m.for_each_bn_layer(&mut |bn| f(BnRef::OneD(bn)));
        }
    }
}

/// Reference to a batch-norm layer of either dimensionality.
pub enum BnRef<'a, T: Scalar> {
    OneD(&'a BatchNorm1dLayer<T>),
    TwoD(&'a BatchNorm2dLayer<T>),
}

impl<T: Scalar> BnRef<'_, T> {
    pub fn prefix(&self) -> &str {
        match self {
            BnRef::OneD(l) => &l.prefix,
            BnRef::TwoD(l) => &l.prefix,
        }
    }

    pub fn state(&self) -> &crate::tensor::ops::BatchNormState {
        match self {
            BnRef::OneD(l) => &l.state,
            BnRef::TwoD(l) => &l.state,
        }
    }
}

impl<T: Scalar> HasParams<T> for FaceModel<T> {
    fn for_each_param(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.backbone.for_each_param(f);
        if let Some(m) = &self.mhms {
            m.for_each_param(f);
        }
        if let Some(g) = &self.gfe {
            g.for_each_param(f);
        }
        self.margin.for_each_param(f);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.backbone.for_each_param_mut(f);
        if let Some(m) = &mut self.mhms {
            m.for_each_param_mut(f);
        }
        if let Some(g) = &mut self.gfe {
            g.for_each_param_mut(f);
        }
        self.margin.for_each_param_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(mode: FusionMode) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_size: (16, 16),
                channel_widths: vec![8],
                blocks_per_stage: 1,
                batch_norm: false,
            },
            mhms: MhmsConfig {
                scales: vec![1, 3],
                heads: 2,
                lanet_reduction: 4,
                se_reduction: 4,
                scale_channels: Some(8),
            },
            embedding_dim: 16,
            lgf: LgfConfig::default(),
            margin: MarginConfig::default(),
            n_classes: 5,
            embed_batch_norm: false,
            fusion_mode: mode,
        }
    }

    fn rand_images(seed: u64, n: usize) -> Tensor<f32> {
        let mut rng = crate::rng::RngStream::new(seed);
        Tensor::from_vec(
            &[n, 3, 16, 16],
            (0..n * 3 * 256).map(|_| rng.uniform() as f32).collect(),
        )
        .unwrap()
    }

    fn names(model: &FaceModel<f32>) -> Vec<String> {
        let mut out = Vec::new();
        model.for_each_param(&mut |p| out.push(p.name.clone()));
        out
    }

    #[test]
    fn global_only_has_no_mhms_parameters() {
        let model: FaceModel<f32> =
            assemble_model(&tiny_cfg(FusionMode::GlobalOnly), 0).unwrap();
        assert!(model.mhms.is_none());
        assert!(names(&model).iter().all(|n| !n.starts_with("mhms.")));
        let imgs = rand_images(1, 3);
        let bundle = model.embed(&imgs).unwrap();
        // Fused equals the global branch exactly.
        assert_eq!(bundle.fused.data(), bundle.f_global.data());
        assert!(bundle.gamma_local.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn local_only_bypasses_gfe() {
        let model: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::LocalOnly), 0).unwrap();
        assert!(model.gfe.is_none());
        let imgs = rand_images(2, 2);
        let bundle = model.embed(&imgs).unwrap();
        assert_eq!(bundle.fused.data(), bundle.f_local.data());
    }

    #[test]
    fn direct_add_and_lgf_share_identical_parameter_sets() {
        let a: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::DirectAdd), 0).unwrap();
        let b: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::Lgf), 0).unwrap();
        assert_eq!(names(&a), names(&b));
    }

    #[test]
    fn lgf_key_set_is_union_of_single_branch_key_sets() {
        let lgf: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::Lgf), 0).unwrap();
        let local: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::LocalOnly), 0).unwrap();
        let global: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::GlobalOnly), 0).unwrap();
        let mut union: Vec<String> = names(&local);
        for n in names(&global) {
            if !union.contains(&n) {
                union.push(n);
            }
        }
        let mut lgf_names = names(&lgf);
        lgf_names.sort();
        union.sort();
        assert_eq!(lgf_names, union);
    }

    #[test]
    fn direct_add_fuses_evenly() {
        let model: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::DirectAdd), 3).unwrap();
        let imgs = rand_images(4, 2);
        let bundle = model.embed(&imgs).unwrap();
        for ((l, g), f) in bundle
            .f_local
            .data()
            .iter()
            .zip(bundle.f_global.data())
            .zip(bundle.fused.data())
        {
            assert!((f - 0.5 * (l + g)).abs() < 1e-6);
        }
    }

    #[test]
    fn train_step_runs_and_reports_metrics() {
        let mut model: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::Lgf), 5).unwrap();
        let imgs = rand_images(6, 4);
        let step = model.forward_train(&imgs, &[0, 1, 2, 3]).unwrap();
        assert!(step.loss.item().is_finite());
        assert!((0.0..=1.0).contains(&step.accuracy));
        assert!(step.mean_z_local > 0.0);
        assert!(step.mean_z_global > 0.0);
        assert!((0.0..=1.0).contains(&step.mean_gamma_local));
        // Loss reaches parameters in every component.
        step.loss.backward().unwrap();
        let mut missing = Vec::new();
        model.for_each_param(&mut |p| {
            if p.value.grad().is_none() {
                missing.push(p.name.clone());
            }
        });
        assert!(missing.is_empty(), "ungraded params: {missing:?}");
    }

    #[test]
    fn embed_is_idempotent_and_state_preserving() {
        let model: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::Lgf), 7).unwrap();
        let state_before = model.fusion.clone();
        let imgs = rand_images(8, 2);
        let b1 = model.embed(&imgs).unwrap();
        let b2 = model.embed(&imgs).unwrap();
        assert_eq!(b1.fused.data(), b2.fused.data());
        assert_eq!(b1.gamma_local, b2.gamma_local);
        assert_eq!(model.fusion, state_before);
    }

    #[test]
    fn duplicate_images_embed_identically() {
        let model: FaceModel<f32> = assemble_model(&tiny_cfg(FusionMode::Lgf), 9).unwrap();
        let one = rand_images(10, 1);
        let mut two_data = one.data().to_vec();
        two_data.extend_from_slice(one.data());
        let two = Tensor::from_vec(&[2, 3, 16, 16], two_data).unwrap();
        let bundle = model.embed(&two).unwrap();
        let per = bundle.fused.numel() / 2;
        assert_eq!(&bundle.fused.data()[..per], &bundle.fused.data()[per..]);
        assert_eq!(bundle.z_local[0], bundle.z_local[1]);
    }
}
