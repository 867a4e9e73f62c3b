//! Finite-difference gradient checks for every differentiable op and the
//! composite blocks of the network, at 64-bit precision.
//!
//! Each case draws fresh inputs (and, for blocks, fresh parameters) from its
//! seed. Inputs of ops with kinks are kept away from the kink so the central
//! difference stays on one branch.

use std::time::Instant;

use esm_tensor::{grad_check, ConvSpec, DeconvSpec, GradCheckConfig, GradCheckReport, NormMode, ResizeMode, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{regress_disparity, Hourglass3d};
use crate::costvol::{build_gwc_volume, build_norm_corr_volume};
use crate::error::Result;
use crate::esm::{FmBlock, Fuse, Refine2d};
use crate::loss::smooth_l1;
use crate::nn::{seeded_rng, Builder, Ctx, ParamStore};

/// Uniform in `[lo, hi)`.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape).expect("valid shape")
}

/// Random sign, magnitude in `[lo, hi)`.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(v, shape).expect("valid shape")
}

/// Distinct values at least `gap` apart in random order, so top-k
/// selections survive a finite-difference nudge.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap + rng.random_range(0.0..gap / 4.0)).collect();
    v.shuffle(rng);
    Tensor::new(v, shape).expect("valid shape")
}

fn config(seed: u64) -> GradCheckConfig {
    GradCheckConfig { max_elements: Some(24), seed, ..Default::default() }
}

type TResult<T> = esm_tensor::Result<T>;

fn op_case(seed: u64, inputs: Vec<Tensor<f64>>, f: impl Fn(&[Tensor<f64>]) -> TResult<Tensor<f64>>) -> Result<GradCheckReport> {
    Ok(grad_check(f, &inputs, config(seed))?)
}

/// Checks a parameterized block with respect to its input tensors and every
/// trainable parameter. `train` selects batch statistics in batch norm.
fn block_case<B>(
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    train: bool,
    build: impl FnOnce(&mut Builder<'_, f64>) -> B,
    forward: impl Fn(&B, &Ctx<'_, f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed ^ 0x5EED);
    let block = build(&mut Builder::new(&mut store, &mut rng, "block"));
    let ids = store.trainable_ids();
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| {
        let p = store.get(id);
        Tensor::new(p.data.clone(), &p.shape).expect("stored shape")
    }));
    let f = |xs: &[Tensor<f64>]| -> TResult<Tensor<f64>> {
        let ctx = Ctx::new(&store, train, false);
        for (&id, t) in ids.iter().zip(&xs[n_in..]) {
            ctx.bind(id, t.clone());
        }
        Ok(forward(&block, &ctx, &xs[..n_in])?)
    };
    Ok(grad_check(f, &all, config(seed))?)
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

/// Every case of the suite, by name.
pub fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -1.0, 1.0)], |x| x[0].add(&x[1]))
        }),
        ("sub", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 3], -1.0, 1.0), uniform(&mut r, &[2, 3], -1.0, 1.0)], |x| x[0].sub(&x[1]))
        }),
        ("mul", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 3, 4], -1.0, 1.0)], |x| x[0].mul(&x[1]))
        }),
        ("div", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 3], -1.0, 1.0), signed(&mut r, &[2, 3], 0.5, 1.5)], |x| x[0].div(&x[1]))
        }),
        ("scalar_affine", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[5], -1.0, 1.0)], |x| Ok(x[0].mul_scalar(-1.7).add_scalar(0.3).neg()))
        }),
        ("abs", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![signed(&mut r, &[6], 0.1, 1.0)], |x| Ok(x[0].abs()))
        }),
        ("gelu", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[8], -3.0, 3.0)], |x| Ok(x[0].gelu()))
        }),
        ("leaky_relu", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![signed(&mut r, &[8], 0.1, 2.0)], |x| Ok(x[0].leaky_relu(0.1)))
        }),
        ("sigmoid", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[8], -4.0, 4.0)], |x| Ok(x[0].sigmoid()))
        }),
        ("clamp", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            // values between the bounds or clearly outside them
            let v = signed(&mut r, &[8], 0.05, 0.45).to_vec().into_iter().enumerate().map(|(i, x)| if i % 3 == 0 { x * 4.0 } else { x });
            op_case(s, vec![Tensor::new(v.collect(), &[8])?], |x| Ok(x[0].clamp(-0.5, 0.5)))
        }),
        ("smooth_l1", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let v = signed(&mut r, &[8], 0.1, 0.9).to_vec().into_iter().enumerate().map(|(i, x)| if i % 2 == 0 { x * 3.0 + x.signum() } else { x });
            op_case(s, vec![Tensor::new(v.collect(), &[8])?], |x| Ok(smooth_l1(&x[0])))
        }),
        ("reductions", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0)], |x| {
                let a = x[0].sum_axis(1)?;
                let b = x[0].mean().add(&x[0].sum().mul_scalar(0.1))?;
                a.mul(&a)?.sum().add(&b)
            })
        }),
        ("dot", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[7], -1.0, 1.0), uniform(&mut r, &[7], -1.0, 1.0)], |x| x[0].dot(&x[1]))
        }),
        ("softmax", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 5, 3], -2.0, 2.0)], |x| x[0].softmax(1))
        }),
        ("topk", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![spaced(&mut r, &[2, 6, 3], 0.05)], |x| Ok(x[0].topk(1, 3)?.0))
        }),
        ("conv2d", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let spec = ConvSpec::new(2).stride(2).padding(1).groups(2);
            op_case(
                s,
                vec![uniform(&mut r, &[2, 4, 5, 6], -1.0, 1.0), uniform(&mut r, &[6, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[6], -1.0, 1.0)],
                move |x| x[0].conv(&x[1], Some(&x[2]), spec),
            )
        }),
        ("conv3d", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let spec = ConvSpec::new(3).stride(2).padding(1);
            op_case(
                s,
                vec![uniform(&mut r, &[1, 2, 3, 4, 5], -1.0, 1.0), uniform(&mut r, &[3, 2, 3, 3, 3], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)],
                move |x| x[0].conv(&x[1], Some(&x[2]), spec),
            )
        }),
        ("deconv2d", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let spec = DeconvSpec::new(2).stride(2).padding(1).output_padding_axes(&[1, 0]);
            op_case(
                s,
                vec![uniform(&mut r, &[2, 3, 3, 4], -1.0, 1.0), uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)],
                move |x| x[0].deconv(&x[1], Some(&x[2]), spec),
            )
        }),
        ("deconv3d", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let spec = DeconvSpec::new(3).stride(2).padding(1).output_padding(1);
            op_case(
                s,
                vec![uniform(&mut r, &[1, 2, 2, 3, 2], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3, 3], -1.0, 1.0)],
                move |x| x[0].deconv(&x[1], None, spec),
            )
        }),
        ("batch_norm_train", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(
                s,
                vec![uniform(&mut r, &[2, 3, 2, 3], -1.0, 1.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)],
                |x| Ok(x[0].batch_norm(&x[1], &x[2], &[0.0; 3], &[1.0; 3], NormMode::Train { momentum: 0.1 }, 1e-5)?.output),
            )
        }),
        ("batch_norm_eval", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(
                s,
                vec![uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)],
                |x| Ok(x[0].batch_norm(&x[1], &x[2], &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], NormMode::Eval, 1e-5)?.output),
            )
        }),
        ("resize_bilinear", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[1, 2, 3, 4], -1.0, 1.0)], |x| {
                let a = x[0].resize(6, 8, ResizeMode::Bilinear)?;
                let b = x[0].resize(5, 7, ResizeMode::Bilinear)?;
                Ok(a.mul(&a)?.sum().add(&b.sum())?)
            })
        }),
        ("pixel_shuffle", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[1, 8, 2, 3], -1.0, 1.0)], |x| x[0].pixel_shuffle(2)?.pixel_unshuffle(2)?.pixel_shuffle(2))
        }),
        ("channel_shuffle", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 6, 2, 2], -1.0, 1.0)], |x| x[0].channel_shuffle(3))
        }),
        ("slicing", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 6, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3], -1.0, 1.0)], |x| {
                let (a, b) = x[0].split_channels(2)?;
                let n = x[0].narrow(2, 1, 2)?.reshape(&[2, 12])?;
                let c = Tensor::concat(&[b, x[1].clone(), a.mul(&x[1])?], 1)?;
                Ok(c.reshape(&[2, 24])?.narrow(1, 0, 12)?.add(&n)?)
            })
        }),
        ("gwc_volume", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[1, 8, 3, 6], -1.0, 1.0), uniform(&mut r, &[1, 8, 3, 6], -1.0, 1.0)], |x| {
                Ok(build_gwc_volume(&x[0], &x[1], 4, 4)?)
            })
        }),
        ("norm_corr_volume", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![uniform(&mut r, &[2, 4, 3, 5], -1.0, 1.0), uniform(&mut r, &[2, 4, 3, 5], -1.0, 1.0)], |x| {
                Ok(build_norm_corr_volume(&x[0], &x[1], 3)?)
            })
        }),
        ("regression_k2", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            op_case(s, vec![spaced(&mut r, &[2, 1, 6, 2, 3], 0.05)], |x| Ok(regress_disparity(&x[0], 2, 4)?.data))
        }),
        ("fm_block", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            block_case(s, vec![uniform(&mut r, &[2, 8, 3, 4], -1.0, 1.0)], false, |b| FmBlock::new(b, 8), |m, ctx, x| {
                m.forward(ctx, &x[0])
            })
        }),
        ("fuse", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let inputs = vec![uniform(&mut r, &[1, 3, 4], 0.0, 4.0), uniform(&mut r, &[1, 3, 3, 4], -1.0, 1.0)];
            block_case(s, inputs, false, |b| Fuse::new(b, 3, 8, 4.0), |m, ctx, x| m.forward(ctx, &x[0], &x[1]))
        }),
        ("hourglass2d", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            block_case(s, vec![uniform(&mut r, &[1, 3, 4, 6], -1.0, 1.0)], false, |b| Refine2d::new(b, 3), |m, ctx, x| {
                m.forward(ctx, &x[0])
            })
        }),
        ("hourglass3d_reduced", |s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            block_case(s, vec![uniform(&mut r, &[2, 2, 4, 4, 5], -1.0, 1.0)], true, |b| Hourglass3d::new(b, 2, 2, 2, 2), |m, ctx, x| {
                m.forward(ctx, &x[0])
            })
        }),
    ]
}

/// Outcome of one case over all its seeds.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub failures: Vec<(u64, String)>,
    pub max_rel_err: f64,
    pub seconds: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs every case whose name contains `filter` on seeds `0..seeds`.
pub fn run_grad_suite(seeds: u64, filter: Option<&str>, mut on_case: impl FnMut(&CaseReport)) -> Vec<CaseReport> {
    let mut out = Vec::new();
    for (name, case) in cases() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let mut rep = CaseReport { name, seeds: seeds as usize, failures: Vec::new(), max_rel_err: 0.0, seconds: 0.0 };
        for seed in 0..seeds {
            match case(seed) {
                Ok(r) => {
                    rep.max_rel_err = rep.max_rel_err.max(r.max_rel_err);
                    if !r.passed() {
                        rep.failures.push((
                            seed,
                            format!("rel err {:.3e} at input {} element {}: analytic {} numeric {}", r.max_rel_err, r.worst.0, r.worst.1, r.analytic, r.numeric),
                        ));
                    }
                }
                Err(e) => rep.failures.push((seed, e.to_string())),
            }
        }
        rep.seconds = start.elapsed().as_secs_f64();
        on_case(&rep);
        out.push(rep);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_one_seed() {
        for r in run_grad_suite(1, None, |_| {}) {
            assert!(r.passed(), "{}: {:?}", r.name, r.failures);
        }
    }
}
