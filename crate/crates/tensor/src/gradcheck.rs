//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Magnitude below which errors are measured absolutely: the error is
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many elements per input (chosen at random), or all.
    pub max_elements: Option<usize>,
    /// Seed for the output projection and element sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-4, tol: 1e-4, floor: 1e-3, max_elements: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Reduces `out` to a scalar with a fixed random projection so non-scalar
/// outputs are checked in every direction at once.
fn project(out: &Tensor<f64>, weights: &Tensor<f64>) -> Result<Tensor<f64>> {
    if out.numel() == 1 {
        return Ok(out.sum());
    }
    out.dot(weights)
}

/// Compares the gradients of `f` at `inputs` with central differences.
/// `f` is evaluated once with tracked inputs and twice per checked element
/// with constant inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    let weights = Tensor::new((0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(), out.shape())?;
    let loss = project(&out, &weights)?;
    loss.check_finite("grad_check loss")?;
    loss.backward()?;

    let eval = |vals: &[Tensor<f64>]| -> Result<f64> { Ok(project(&f(vals)?, &weights)?.item()) };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0, tol: config.tol };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut elems: Vec<usize> = (0..leaf.numel()).collect();
        if let Some(limit) = config.max_elements {
            // partial Fisher-Yates
            let take = limit.min(elems.len());
            for k in 0..take {
                let j = rng.random_range(k..elems.len());
                elems.swap(k, j);
            }
            elems.truncate(take);
        }
        let mut consts: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
        let base = inputs[i].to_vec();
        for &e in &elems {
            let mut plus = base.clone();
            plus[e] += config.eps;
            consts[i] = Tensor::new(plus, leaf.shape())?;
            let lp = eval(&consts)?;
            let mut minus = base.clone();
            minus[e] -= config.eps;
            consts[i] = Tensor::new(minus, leaf.shape())?;
            let lm = eval(&consts)?;
            let numeric = (lp - lm) / (2.0 * config.eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite(format!("finite difference of input {i} element {e}")));
            }
            let a = analytic[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = err;
                report.worst = (i, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        consts[i] = inputs[i].detach();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_wrong_gradients() {
        let x = Tensor::<f64>::from_f64(&[0.3, -1.2, 2.0], &[3]).unwrap();
        let ok = grad_check(|v| Ok(v[0].mul(&v[0])?.sum()), &[x.clone()], GradCheckConfig::default()).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert_eq!(ok.checked, 3);

        // a deliberately wrong derivative: claims d/dx x^2 = x
        let bad = grad_check(
            |v| Ok(v[0].unary("bad_square", |x| x * x, |x, _| x).sum()),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn projects_non_scalar_outputs() {
        let x = Tensor::<f64>::from_f64(&[0.3, -1.2, 2.0, 0.7], &[2, 2]).unwrap();
        let r = grad_check(|v| Ok(v[0].sigmoid()), &[x], GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sampling_limits_checked_elements() {
        let x = Tensor::<f64>::from_f64(&[0.1; 50], &[50]).unwrap();
        let cfg = GradCheckConfig { max_elements: Some(7), ..Default::default() };
        let r = grad_check(|v| Ok(v[0].gelu()), &[x], cfg).unwrap();
        assert_eq!(r.checked, 7);
    }
}
