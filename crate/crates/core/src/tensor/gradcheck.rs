//! Finite-difference verification of analytic gradients.

use super::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked input elements.
    pub max_rel_error: f64,
    /// (input index, element index) where the maximum occurred.
    pub worst: (usize, usize),
}

/// Compare the analytic gradient of a scalar-valued function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every
/// input. The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
///
/// Inputs are plain f64 buffers; the function receives leaf tensors that
/// require gradients and must return a scalar tensor.
pub fn grad_check<F>(f: F, inputs: &[(Vec<usize>, Vec<f64>)], eps: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| {
            Tensor::from_vec(shape, data.clone())
                .expect("grad_check input shape")
                .requires_grad()
        })
        .collect();
    let loss = f(&leaves);
    assert_eq!(loss.numel(), 1, "grad_check expects a scalar-valued function");
    loss.backward().expect("grad_check backward");

    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let eval = |bufs: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor<f64>> = inputs
            .iter()
            .zip(bufs)
            .map(|((shape, _), data)| Tensor::from_vec(shape, data.clone()).unwrap())
            .collect();
        f(&ts).item()
    };

    let mut bufs: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = (0usize, 0usize);
    for i in 0..bufs.len() {
        for j in 0..bufs[i].len() {
            let orig = bufs[i][j];
            bufs[i][j] = orig + eps;
            let up = eval(&bufs);
            bufs[i][j] = orig - eps;
            let down = eval(&bufs);
            bufs[i][j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (i, j);
            }
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        worst,
    }
}

/// Run [`grad_check`] over several seeds with fresh inputs per seed and
/// return the worst error. `make_inputs` maps a seed to the input buffers.
pub fn grad_check_seeded<F, G>(f: F, make_inputs: G, seeds: &[u64], eps: f64) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
    G: Fn(u64) -> Vec<(Vec<usize>, Vec<f64>)>,
{
    let mut worst = 0.0f64;
    for &s in seeds {
        let inputs = make_inputs(s);
        let rep = grad_check(&f, &inputs, eps);
        if rep.max_rel_error > worst {
            worst = rep.max_rel_error;
        }
    }
    worst
}
