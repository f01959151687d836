//! Local/global feature fusion driven by feature-norm quality.
//!
//! The embedding norm serves as a quality proxy. Per branch, norms are
//! standardized against batch statistics (current batch while training, EMA
//! estimates at eval), squashed into [0,2] by a clipped linear map, and
//! turned into convex attention weights that mix the two embeddings. The
//! whole module is parameter-free; norms and weights are treated as
//! constants during backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgfConfig {
    /// Concentration of the standardized norm distribution (3-sigma rule).
    pub h: f64,
    /// EMA momentum: a new batch statistic enters with this weight.
    pub alpha: f64,
    /// Numerical floor for the sigma division and the attention denominator.
    pub eps: f64,
}

impl Default for LgfConfig {
    fn default() -> Self {
        LgfConfig {
            h: 0.333,
            alpha: 0.01,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Local,
    Global,
}

/// Running norm statistics per branch plus the train/eval switch.
///
/// Fresh state starts at mu = 0, sigma = 1, making the first training batch
/// effectively self-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionState {
    pub mu_local: f64,
    pub sigma_local: f64,
    pub mu_global: f64,
    pub sigma_global: f64,
    pub cfg: LgfConfig,
    pub mode_train: bool,
    pub step: u64,
}

impl FusionState {
    pub fn new(cfg: LgfConfig) -> Self {
        FusionState {
            mu_local: 0.0,
            sigma_local: 1.0,
            mu_global: 0.0,
            sigma_global: 1.0,
            cfg,
            mode_train: true,
            step: 0,
        }
    }

    pub fn mode(&self) -> Mode {
        if self.mode_train {
            Mode::Train
        } else {
            Mode::Eval
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode_train = mode == Mode::Train;
    }

    pub fn stats(&self, branch: Branch) -> (f64, f64) {
        match branch {
            Branch::Local => (self.mu_local, self.sigma_local),
            Branch::Global => (self.mu_global, self.sigma_global),
        }
    }
}

/// Per-sample embedding quality: the row L2 norm, detached from the graph.
pub fn feature_quality<T: Scalar>(f: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, d) = f.dims2("feature_quality")?;
    let data = f.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0f64;
        for &v in &data[i * d..(i + 1) * d] {
            let x = v.as_f64();
            acc += x * x;
        }
        out.push(acc.sqrt());
    }
    Ok(out)
}

/// Clipped standardization of norms: `clip(h*(z - mu)/(sigma + eps), -1, 1) + 1`,
/// always inside [0, 2] and exactly 1 where z == mu.
pub fn normalize_quality(z: &[f64], mu: f64, sigma: f64, h: f64, eps: f64) -> Vec<f64> {
    z.iter()
        .map(|&zi| (h * (zi - mu) / (sigma + eps)).clamp(-1.0, 1.0) + 1.0)
        .collect()
}

/// Population mean and standard deviation of a batch of norms.
pub fn batch_stats(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mu = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Fold a batch statistic into the running estimate: the new batch receives
/// weight alpha. Only legal in train mode.
pub fn update_ema(
    state: &mut FusionState,
    batch_mu: f64,
    batch_sigma: f64,
    branch: Branch,
) -> Result<()> {
    if !state.mode_train {
        return Err(Error::EvalModeMutation { op: "update_ema" });
    }
    let a = state.cfg.alpha;
    match branch {
        Branch::Local => {
            state.mu_local = a * batch_mu + (1.0 - a) * state.mu_local;
            state.sigma_local = a * batch_sigma + (1.0 - a) * state.sigma_local;
        }
        Branch::Global => {
            state.mu_global = a * batch_mu + (1.0 - a) * state.mu_global;
            state.sigma_global = a * batch_sigma + (1.0 - a) * state.sigma_global;
        }
    }
    state.step += 1;
    Ok(())
}

/// Convex attention weights from normalized qualities. Falls back to an even
/// split when both qualities vanish below eps.
pub fn fusion_attention(q_local: &[f64], q_global: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = q_local.len();
    let mut gl = Vec::with_capacity(n);
    let mut gg = Vec::with_capacity(n);
    for i in 0..n {
        let sum = q_local[i] + q_global[i];
        if sum < eps {
            gl.push(0.5);
            gg.push(0.5);
        } else {
            gl.push(q_local[i] / sum);
            gg.push(q_global[i] / sum);
        }
    }
    (gl, gg)
}

/// Weighted sum of the two embeddings. The weights are constants: gradients
/// flow into both embeddings but never through the attention path.
pub fn fuse<T: Scalar>(
    f_local: &Tensor<T>,
    f_global: &Tensor<T>,
    gamma_local: &[f64],
    gamma_global: &[f64],
) -> Result<Tensor<T>> {
    let gl: Vec<T> = gamma_local.iter().map(|&v| T::from_f64(v)).collect();
    let gg: Vec<T> = gamma_global.iter().map(|&v| T::from_f64(v)).collect();
    let a = ops::mul_rows_const(f_local, &gl)?;
    let b = ops::mul_rows_const(f_global, &gg)?;
    ops::add(&a, &b)
}

/// Everything the fusion stage computed for one batch.
pub struct EmbeddingBundle<T: Scalar> {
    pub f_local: Tensor<T>,
    pub f_global: Tensor<T>,
    pub z_local: Vec<f64>,
    pub z_global: Vec<f64>,
    /// Normalized qualities in [0,2].
    pub q_local: Vec<f64>,
    pub q_global: Vec<f64>,
    /// Attention weights, summing to 1 per sample.
    pub gamma_local: Vec<f64>,
    pub gamma_global: Vec<f64>,
    /// Fused embedding, not L2-normalized (the margin head normalizes).
    pub fused: Tensor<T>,
}

fn lgf_compute<T: Scalar>(
    f_local: &Tensor<T>,
    f_global: &Tensor<T>,
    stats_local: (f64, f64),
    stats_global: (f64, f64),
    cfg: &LgfConfig,
    z_local: Vec<f64>,
    z_global: Vec<f64>,
) -> Result<EmbeddingBundle<T>> {
    let q_local = normalize_quality(&z_local, stats_local.0, stats_local.1, cfg.h, cfg.eps);
    let q_global = normalize_quality(&z_global, stats_global.0, stats_global.1, cfg.h, cfg.eps);
    let (gamma_local, gamma_global) = fusion_attention(&q_local, &q_global, cfg.eps);
    let fused = fuse(f_local, f_global, &gamma_local, &gamma_global)?;
    Ok(EmbeddingBundle {
        f_local: f_local.clone(),
        f_global: f_global.clone(),
        z_local,
        z_global,
        q_local,
        q_global,
        gamma_local,
        gamma_global,
        fused,
    })
}

/// Full fusion pass.
///
/// Train mode standardizes against the current batch statistics and then
/// folds them into the EMA; eval mode reads the running statistics and
/// mutates nothing. Batches of one sample are rejected in train mode since
/// the batch sigma is undefined.
pub fn lgf_forward<T: Scalar>(
    f_local: &Tensor<T>,
    f_global: &Tensor<T>,
    state: &mut FusionState,
) -> Result<EmbeddingBundle<T>> {
    if !state.mode_train {
        return lgf_forward_eval(f_local, f_global, state);
    }
    let (n, _) = f_local.dims2("lgf_forward")?;
    if n < 2 {
        return Err(Error::BatchTooSmall {
            op: "lgf_forward",
            n,
            min: 2,
        });
    }
    let z_local = feature_quality(f_local)?;
    let z_global = feature_quality(f_global)?;
    let sl = batch_stats(&z_local);
    let sg = batch_stats(&z_global);
    let cfg = state.cfg;
    let bundle = lgf_compute(f_local, f_global, sl, sg, &cfg, z_local, z_global)?;
    update_ema(state, sl.0, sl.1, Branch::Local)?;
    update_ema(state, sg.0, sg.1, Branch::Global)?;
    Ok(bundle)
}

/// Read-only fusion pass against the running statistics.
pub fn lgf_forward_eval<T: Scalar>(
    f_local: &Tensor<T>,
    f_global: &Tensor<T>,
    state: &FusionState,
) -> Result<EmbeddingBundle<T>> {
    let z_local = feature_quality(f_local)?;
    let z_global = feature_quality(f_global)?;
    lgf_compute(
        f_local,
        f_global,
        state.stats(Branch::Local),
        state.stats(Branch::Global),
        &state.cfg,
        z_local,
        z_global,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn2(seed: u64, n: usize, d: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::from_vec(&[n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn feature_quality_is_the_row_norm() {
        let f = Tensor::from_vec(&[3, 2], vec![3.0, 4.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = feature_quality(&f).unwrap();
        assert_eq!(z[0], 5.0);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - 2.0f64.sqrt()).abs() < 1e-15);
        // Scaling a row scales its quality.
        let f2 = Tensor::from_vec(&[1, 2], vec![9.0, 12.0]).unwrap();
        assert!((feature_quality(&f2).unwrap()[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_quality_frozen_examples() {
        // Centered: z == mu -> exactly 1.
        assert_eq!(normalize_quality(&[5.0], 5.0, 2.0, 0.333, 1e-6)[0], 1.0);
        // Lower clip saturation: z = mu - 10*sigma.
        assert_eq!(normalize_quality(&[-10.0], 0.0, 1.0, 0.333, 0.0)[0], 0.0);
        // z = mu + 3*sigma: pre-clip 0.999, inside the clip.
        let q = normalize_quality(&[3.0], 0.0, 1.0, 0.333, 0.0)[0];
        assert!((q - 1.999).abs() < 1e-12);
        // Bounds hold for extreme inputs.
        for &z in &[-1e9, -3.0, 0.0, 3.0, 1e9] {
            let q = normalize_quality(&[z], 0.0, 1.0, 0.333, 1e-6)[0];
            assert!((0.0..=2.0).contains(&q));
        }
    }

    #[test]
    fn ema_single_step_and_fixed_point() {
        let mut st = FusionState::new(LgfConfig::default());
        update_ema(&mut st, 1.0, 1.0, Branch::Local).unwrap();
        assert!((st.mu_local - 0.01).abs() < 1e-15);
        let (mu, sigma) = (st.mu_local, st.sigma_local);
        update_ema(&mut st, mu, sigma, Branch::Local).unwrap();
        assert_eq!(st.mu_local, mu);
    }

    #[test]
    fn ema_constant_stream_matches_closed_form() {
        let mut st = FusionState::new(LgfConfig::default());
        for _ in 0..100 {
            update_ema(&mut st, 1.0, 1.0, Branch::Global).unwrap();
        }
        let want = 1.0 - 0.99f64.powi(100);
        assert!((st.mu_global - want).abs() < 1e-12);
        assert!((st.mu_global - 0.6339676587267709).abs() < 1e-10);
        assert_eq!(st.step, 100);
    }

    #[test]
    fn ema_rejects_eval_mode() {
        let mut st = FusionState::new(LgfConfig::default());
        st.set_mode(Mode::Eval);
        assert!(matches!(
            update_ema(&mut st, 1.0, 1.0, Branch::Local),
            Err(Error::EvalModeMutation { .. })
        ));
    }

    #[test]
    fn attention_examples_and_normalization() {
        let (gl, gg) = fusion_attention(&[1.0, 2.0, 1.5], &[1.0, 0.0, 0.5], 1e-6);
        assert_eq!((gl[0], gg[0]), (0.5, 0.5));
        assert_eq!((gl[1], gg[1]), (1.0, 0.0));
        assert!((gl[2] - 0.75).abs() < 1e-15);
        assert!((gg[2] - 0.25).abs() < 1e-15);
        // Zero-denominator fallback.
        let (gl, gg) = fusion_attention(&[0.0], &[0.0], 1e-6);
        assert_eq!((gl[0], gg[0]), (0.5, 0.5));
        for i in 0..gl.len() {
            assert!((gl[i] + gg[i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_monotone_in_own_quality() {
        let mut prev = -1.0;
        for i in 0..50 {
            let q = 2.0 * i as f64 / 49.0;
            let (gl, _) = fusion_attention(&[q], &[0.7], 1e-6);
            assert!(gl[0] >= prev);
            prev = gl[0];
        }
    }

    #[test]
    fn fuse_cases() {
        let fl = randn2(1, 3, 4);
        let fg = randn2(2, 3, 4);
        // Even split: (local + global) / 2.
        let k = fuse(&fl, &fg, &[0.5; 3], &[0.5; 3]).unwrap();
        for ((a, b), got) in fl.data().iter().zip(fg.data()).zip(k.data()) {
            assert!((got - 0.5 * (a + b)).abs() < 1e-12);
        }
        // All weight on local.
        let k = fuse(&fl, &fg, &[1.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(k.data(), fl.data());
        // Identical branches: any convex weights return the branch.
        let k = fuse(&fl, &fl, &[0.3, 0.8, 0.5], &[0.7, 0.2, 0.5]).unwrap();
        for (a, b) in k.data().iter().zip(fl.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lgf_forward_matches_scalar_pipeline_oracle() {
        // Hand-built 4-sample batch with known norms: rows scaled unit vectors.
        let d = 4;
        let mk = |norms: &[f64]| {
            let mut data = vec![0.0; norms.len() * d];
            for (i, &z) in norms.iter().enumerate() {
                data[i * d] = z; // norm equals the first component
            }
            Tensor::from_vec(&[norms.len(), d], data).unwrap()
        };
        let zl = [1.0, 2.0, 3.0, 4.0];
        let zg = [4.0, 3.0, 2.0, 1.0];
        let fl = mk(&zl);
        let fg = mk(&zg);
        let mut st = FusionState::new(LgfConfig::default());
        let bundle = lgf_forward(&fl, &fg, &mut st).unwrap();

        // Scalar oracle following the definitions step by step.
        let mu_l = 2.5;
        let sig_l = (((1.0f64 - 2.5).powi(2) + (2.0f64 - 2.5).powi(2) * 2.0 + 0.0
            + (4.0f64 - 2.5).powi(2))
            / 4.0)
            .sqrt();
        // = sqrt((2.25+0.25+0.25+2.25)/4) = sqrt(1.25)
        assert!((sig_l - 1.25f64.sqrt()).abs() < 1e-12);
        for i in 0..4 {
            let pre = 0.333 * (zl[i] - mu_l) / (sig_l + 1e-6);
            let ql = pre.clamp(-1.0, 1.0) + 1.0;
            assert!((bundle.q_local[i] - ql).abs() < 1e-6, "sample {i}");
            let pre_g = 0.333 * (zg[i] - 2.5) / (sig_l + 1e-6);
            let qg = pre_g.clamp(-1.0, 1.0) + 1.0;
            assert!((bundle.q_global[i] - qg).abs() < 1e-6);
            let gl = ql / (ql + qg);
            assert!((bundle.gamma_local[i] - gl).abs() < 1e-6);
            for j in 0..d {
                let want = gl * fl.data()[i * d + j] + (1.0 - gl) * fg.data()[i * d + j];
                assert!((bundle.fused.data()[i * d + j] - want).abs() < 1e-6);
            }
        }
        // EMA advanced once per branch from the fresh state.
        assert!((st.mu_local - (0.01 * mu_l)).abs() < 1e-12);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn identical_branches_fuse_to_the_branch() {
        let f = randn2(5, 4, 6);
        let mut st = FusionState::new(LgfConfig::default());
        let bundle = lgf_forward(&f, &f, &mut st).unwrap();
        for (a, b) in bundle.fused.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_pure_and_repeatable() {
        let fl = randn2(6, 4, 6);
        let fg = randn2(7, 4, 6);
        let mut st = FusionState::new(LgfConfig::default());
        st.mu_local = 3.0;
        st.sigma_local = 0.7;
        st.mu_global = 2.0;
        st.sigma_global = 0.5;
        st.set_mode(Mode::Eval);
        let before = st.clone();
        let b1 = lgf_forward(&fl, &fg, &mut st).unwrap();
        let b2 = lgf_forward(&fl, &fg, &mut st).unwrap();
        assert_eq!(st, before);
        assert_eq!(b1.gamma_local, b2.gamma_local);
        assert_eq!(b1.fused.data(), b2.fused.data());
    }

    #[test]
    fn train_mode_rejects_singleton_batch() {
        let fl = randn2(8, 1, 4);
        let fg = randn2(9, 1, 4);
        let mut st = FusionState::new(LgfConfig::default());
        assert!(matches!(
            lgf_forward(&fl, &fg, &mut st),
            Err(Error::BatchTooSmall { n: 1, .. })
        ));
    }

    #[test]
    fn batch_scale_invariance_of_attention() {
        // Batches with a healthy norm spread; scaling every embedding by a
        // common c leaves the attention weights essentially unchanged.
        let n = 16;
        let d = 8;
        let mut rng = RngStream::new(10);
        let mut mk = |scale: f64| -> Vec<f64> {
            (0..n * d).map(|_| rng.normal() * scale).collect()
        };
        let base_l: Vec<f64> = mk(1.0)
            .chunks(d)
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |v| v * (1.0 + 3.0 * i as f64)).collect::<Vec<_>>())
            .collect();
        let base_g: Vec<f64> = mk(1.0)
            .chunks(d)
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |v| v * (1.0 + 2.0 * (n - i) as f64)).collect::<Vec<_>>())
            .collect();
        for &c in &[0.1, 10.0] {
            let fl = Tensor::from_vec(&[n, d], base_l.clone()).unwrap();
            let fg = Tensor::from_vec(&[n, d], base_g.clone()).unwrap();
            let mut st = FusionState::new(LgfConfig::default());
            let b0 = lgf_forward(&fl, &fg, &mut st).unwrap();

            let fl_s =
                Tensor::from_vec(&[n, d], base_l.iter().map(|v| v * c).collect()).unwrap();
            let fg_s =
                Tensor::from_vec(&[n, d], base_g.iter().map(|v| v * c).collect()).unwrap();
            let mut st2 = FusionState::new(LgfConfig::default());
            let b1 = lgf_forward(&fl_s, &fg_s, &mut st2).unwrap();
            for i in 0..n {
                assert!(
                    (b0.gamma_local[i] - b1.gamma_local[i]).abs() < 1e-6,
                    "c={c} sample {i}: {} vs {}",
                    b0.gamma_local[i],
                    b1.gamma_local[i]
                );
                // Fused embedding scales by c, up to the allowed gamma wiggle
                // (a 1e-6 gamma shift moves kappa by up to |fl - fg| * 1e-6).
                for j in 0..d {
                    let a = b0.fused.data()[i * d + j] * c;
                    let b = b1.fused.data()[i * d + j];
                    assert!((a - b).abs() < 5e-3 * c.max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn stop_gradient_contract_on_the_attention_path() {
        // Analytic gradient of fuse treats gamma as constant. A finite
        // difference that recomputes gamma from the perturbed embeddings
        // disagrees with it, while a frozen-gamma oracle agrees.
        let n = 2;
        let d = 3;
        let fl_data = vec![1.0, 2.0, 2.0, 0.5, 0.5, 0.2];
        let fg_data = vec![0.5, 0.1, 0.3, 2.0, 1.0, 1.5];
        let st = {
            let mut s = FusionState::new(LgfConfig::default());
            s.mu_local = 1.0;
            s.sigma_local = 1.0;
            s.mu_global = 1.0;
            s.sigma_global = 1.0;
            s.set_mode(Mode::Eval);
            s
        };
        let run = |fl: &[f64], fg: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
            let flt = Tensor::from_vec(&[n, d], fl.to_vec()).unwrap().requires_grad();
            let fgt = Tensor::from_vec(&[n, d], fg.to_vec()).unwrap();
            let b = lgf_forward_eval(&flt, &fgt, &st).unwrap();
            let loss = ops::sum_all(&ops::mul(&b.fused, &b.fused).unwrap());
            loss.backward().unwrap();
            (loss.item(), flt.grad().unwrap(), b.gamma_local.clone())
        };
        let (_, analytic, gammas) = run(&fl_data, &fg_data);

        // Frozen-gamma oracle: d/dfl sum((gl*fl + gg*fg)^2) = 2*kappa*gl.
        let (gl, gg) = (gammas.clone(), gammas.iter().map(|g| 1.0 - g).collect::<Vec<_>>());
        for i in 0..n {
            for j in 0..d {
                let kappa = gl[i] * fl_data[i * d + j] + gg[i] * fg_data[i * d + j];
                let frozen = 2.0 * kappa * gl[i];
                assert!(
                    (analytic[i * d + j] - frozen).abs() < 1e-9,
                    "analytic must match the frozen-gamma oracle"
                );
            }
        }

        // Numeric probe that lets gamma respond to the perturbation.
        let eps = 1e-5;
        let mut up = fl_data.clone();
        up[0] += eps;
        let mut down = fl_data.clone();
        down[0] -= eps;
        let numeric = (run(&up, &fg_data).0 - run(&down, &fg_data).0) / (2.0 * eps);
        assert!(
            (numeric - analytic[0]).abs() > 1e-6,
            "numeric probe through gamma should differ: numeric {numeric} vs analytic {}",
            analytic[0]
        );
    }
}
