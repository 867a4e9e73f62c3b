use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tensor::{BackwardCtx, BackwardFn, Tensor};

/// Whether batch normalization uses batch statistics (and reports updated
/// running statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode {
    Train { momentum: f64 },
    Eval,
}

pub struct BatchNormOutput<T: Element> {
    pub output: Tensor<T>,
    /// Updated `(running_mean, running_var)` in training mode.
    pub running: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Element> Tensor<T> {
    /// Per-channel normalization over every axis except axis 1, followed by
    /// `gamma * x_hat + beta`. The variance is floored by `eps`, so a constant
    /// channel normalizes to exactly zero.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        mode: NormMode,
        eps: f64,
    ) -> Result<BatchNormOutput<T>> {
        const OP: &str = "batch_norm";
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(shape_err(OP, format!("need [B, C, ...], got {shape:?}")));
        }
        let (batch, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        for (name, len) in [("gamma", gamma.numel()), ("beta", beta.numel()), ("running_mean", running_mean.len()), ("running_var", running_var.len())] {
            if len != c {
                return Err(shape_err(OP, format!("channel axis: {name} has {len} entries, input has {c} channels")));
            }
        }
        let m = batch * plane;
        let x = self.data();
        let (mean, var) = match mode {
            NormMode::Train { .. } => {
                if m < 2 {
                    return Err(shape_err(
                        OP,
                        format!("training mode needs at least 2 elements per channel, input {shape:?} has {m}"),
                    ));
                }
                let mut mean = vec![0f64; c];
                let mut var = vec![0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += x[(b * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut q = 0.0;
                    for b in 0..batch {
                        q += x[(b * c + ch) * plane..][..plane].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = q / m as f64;
                }
                (mean, var)
            }
            NormMode::Eval => (
                running_mean.iter().map(|v| v.as_f64()).collect(),
                running_var.iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (gamma.data(), beta.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, is) = (mean[ch], inv_std[ch]);
                for k in off..off + plane {
                    let h = T::from_f64c((x[k].as_f64() - mu) * is);
                    xhat[k] = h;
                    out[k] = g[ch] * h + bt[ch];
                }
            }
        }
        let running = match mode {
            NormMode::Train { momentum } => {
                let unbias = m as f64 / (m as f64 - 1.0);
                let rm = running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, mu)| T::from_f64c((1.0 - momentum) * r.as_f64() + momentum * mu))
                    .collect();
                let rv = running_var
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| T::from_f64c((1.0 - momentum) * r.as_f64() + momentum * v * unbias))
                    .collect();
                Some((rm, rv))
            }
            NormMode::Eval => None,
        };
        let training = matches!(mode, NormMode::Train { .. });
        let backward: BackwardFn<T> = Box::new(move |ctx: &BackwardCtx<'_, T>| {
            let (x, gamma, beta) = (&ctx.inputs[0], &ctx.inputs[1], &ctx.inputs[2]);
            let gd = ctx.grad;
            let gm = gamma.data();
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for b in 0..batch {
                for ch in 0..c {
                    let off = (b * c + ch) * plane;
                    for k in off..off + plane {
                        sum_g[ch] += gd[k].as_f64();
                        sum_gx[ch] += gd[k].as_f64() * xhat[k].as_f64();
                    }
                }
            }
            let gx = x.requires_grad().then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                for b in 0..batch {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let scale = gm[ch].as_f64() * inv_std[ch];
                        for k in off..off + plane {
                            let v = if training {
                                scale * (gd[k].as_f64() - sum_g[ch] / m as f64 - xhat[k].as_f64() * sum_gx[ch] / m as f64)
                            } else {
                                scale * gd[k].as_f64()
                            };
                            dx[k] = T::from_f64c(v);
                        }
                    }
                }
                dx
            });
            let ggamma = gamma.requires_grad().then(|| sum_gx.iter().map(|&v| T::from_f64c(v)).collect());
            let gbeta = beta.requires_grad().then(|| sum_g.iter().map(|&v| T::from_f64c(v)).collect());
            vec![gx, ggamma, gbeta]
        });
        let output = Tensor::from_op(OP, out, shape, vec![self.clone(), gamma.clone(), beta.clone()], backward)?;
        Ok(BatchNormOutput { output, running })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0).unwrap(), Tensor::zeros(&[c]).unwrap())
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 4], 7.5).unwrap();
        let (g, b) = affine(3);
        let out = x.batch_norm(&g, &b, &[0.0; 3], &[1.0; 3], NormMode::Train { momentum: 0.1 }, 1e-5).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_input_is_standardized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 3 * 25).map(|_| rng.random_range(-4.0..9.0)).collect();
        let x = Tensor::new(data, &[2, 3, 5, 5]).unwrap();
        let (g, b) = affine(3);
        let y = x.batch_norm(&g, &b, &[0.0; 3], &[1.0; 3], NormMode::Train { momentum: 0.1 }, 1e-5).unwrap().output;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|bi| y.data()[(bi * 3 + ch) * 25..][..25].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 50.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn single_element_channel_rejected_in_training() {
        let x = Tensor::<f64>::full(&[1, 2, 1, 1], 1.0).unwrap();
        let (g, b) = affine(2);
        assert!(x.batch_norm(&g, &b, &[0.0; 2], &[1.0; 2], NormMode::Train { momentum: 0.1 }, 1e-5).is_err());
        assert!(x.batch_norm(&g, &b, &[0.0; 2], &[1.0; 2], NormMode::Eval, 1e-5).is_ok());
    }

    #[test]
    fn train_and_eval_diverge_after_stats_update() {
        // batch 1: values (1, 3) -> mean 2, biased var 1, unbiased var 2
        let x1 = Tensor::<f64>::from_f64(&[1.0, 3.0], &[1, 1, 2]).unwrap();
        let (g, b) = affine(1);
        let r = x1.batch_norm(&g, &b, &[0.0], &[1.0], NormMode::Train { momentum: 0.5 }, 0.0).unwrap();
        let (rm, rv) = r.running.unwrap();
        assert_eq!(rm, vec![1.0]);
        assert_eq!(rv, vec![1.5]);
        // batch 2: values (5, 7) -> train mode normalizes to (-1, 1)
        let x2 = Tensor::<f64>::from_f64(&[5.0, 7.0], &[1, 1, 2]).unwrap();
        let train = x2.batch_norm(&g, &b, &rm, &rv, NormMode::Train { momentum: 0.5 }, 0.0).unwrap().output;
        assert_eq!(train.to_f64_vec(), vec![-1.0, 1.0]);
        // eval mode uses mean 1, var 1.5: (5-1)/sqrt(1.5), (7-1)/sqrt(1.5)
        let eval = x2.batch_norm(&g, &b, &rm, &rv, NormMode::Eval, 0.0).unwrap().output;
        let s = 1.5f64.sqrt();
        assert!((eval.data()[0] - 4.0 / s).abs() < 1e-12);
        assert!((eval.data()[1] - 6.0 / s).abs() < 1e-12);
    }
}
