use esm_tensor::{grad_check, ConvSpec, DeconvSpec, GradCheckConfig, NormMode, ResizeMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Direct nested-loop 3D cross-correlation; 2D inputs are passed with d = kd = 1.
#[allow(clippy::too_many_arguments)]
fn conv_loops(
    x: &[f64],
    w: &[f64],
    b: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let out: Vec<usize> = (0..3).map(|a| (input[a] + 2 * pad[a] - k[a]) / stride[a] + 1).collect();
    let (cig, cog) = (cin / groups, cout / groups);
    let mut y = vec![0.0; b * cout * out[0] * out[1] * out[2]];
    for n in 0..b {
        for co in 0..cout {
            let g = co / cog;
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = 0.0;
                        for ci in 0..cig {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let iz = (oz * stride[0] + kz) as isize - pad[0] as isize;
                                        let iy = (oy * stride[1] + ky) as isize - pad[1] as isize;
                                        let ix = (ox * stride[2] + kx) as isize - pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= input[0] || iy >= input[1] || ix >= input[2] {
                                            continue;
                                        }
                                        let c = g * cig + ci;
                                        let xv = x[(((n * cin + c) * input[0] + iz) * input[1] + iy) * input[2] + ix];
                                        let wv = w[(((co * cig + ci) * k[0] + kz) * k[1] + ky) * k[2] + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((n * cout + co) * out[0] + oz) * out[1] + oy) * out[2] + ox] = acc;
                    }
                }
            }
        }
    }
    (y, [out[0], out[1], out[2]])
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let y = x.conv(&w, None, ConvSpec::new(2)).unwrap();
    let (r, _) = conv_loops(x.data(), w.data(), 1, 2, 3, 1, [1, 4, 4], [1, 3, 3], [1, 1, 1], [0, 0, 0]);
    assert_eq!(y.shape(), &[1, 3, 2, 2]);
    for (a, b) in y.data().iter().zip(&r) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn conv_randomized_against_loops_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..40 {
        let dims = if trial % 2 == 0 { 2 } else { 3 };
        let b = rng.random_range(1..=2);
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=2);
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let k = 3;
        let sp: Vec<usize> = (0..dims).map(|_| rng.random_range(3..=8)).collect();
        let mut xs = vec![b, cin];
        xs.extend(&sp);
        let mut ws = vec![cout, cin / groups];
        ws.extend(std::iter::repeat_n(k, dims));
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ws);
        let y = x.conv(&w, None, ConvSpec::new(dims).stride(stride).padding(pad).groups(groups)).unwrap();
        let (input, kk, st, pd) = if dims == 2 {
            ([1, sp[0], sp[1]], [1, k, k], [1, stride, stride], [0, pad, pad])
        } else {
            ([sp[0], sp[1], sp[2]], [k, k, k], [stride; 3], [pad; 3])
        };
        let (r, out) = conv_loops(x.data(), w.data(), b, cin, cout, groups, input, kk, st, pd);
        assert_eq!(&y.shape()[2..], &out[3 - dims..]);
        for (a, e) in y.data().iter().zip(&r) {
            assert!((a - e).abs() <= 1e-6, "trial {trial}");
        }
    }
}

#[test]
fn conv_3d_at_largest_stated_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 4, 8, 8, 8]);
    let w = random(&mut rng, &[3, 4, 3, 3, 3]);
    let y = x.conv(&w, None, ConvSpec::new(3).padding(1)).unwrap();
    let (r, _) = conv_loops(x.data(), w.data(), 2, 4, 3, 1, [8, 8, 8], [3, 3, 3], [1, 1, 1], [1, 1, 1]);
    for (a, e) in y.data().iter().zip(&r) {
        assert!((a - e).abs() <= 1e-6);
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..20 {
        let dims = 2 + trial % 2;
        let stride = 1 + trial % 2;
        let pad = (trial / 2) % 2;
        let (cin, cout) = (2, 3);
        let side = rng.random_range(4..=7);
        let sp = vec![side; dims];
        let mut xs = vec![1, cin];
        xs.extend(&sp);
        let mut ws = vec![cout, cin];
        ws.extend(std::iter::repeat_n(3, dims));
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ws);
        let cx = x.conv(&w, None, ConvSpec::new(dims).stride(stride).padding(pad)).unwrap();
        let y = random(&mut rng, cx.shape());
        // pick output_padding so the deconv lands back on x's size
        let small = cx.shape()[2];
        let op = sp[0] + 2 * pad - ((small - 1) * stride + 3);
        let dy = y
            .deconv(&w, None, DeconvSpec::new(dims).stride(stride).padding(pad).output_padding(op))
            .unwrap();
        assert_eq!(dy.shape(), x.shape(), "trial {trial}");
        let lhs = cx.dot(&y).unwrap().item();
        let rhs = x.dot(&dy).unwrap().item();
        assert!((lhs - rhs).abs() <= 1e-5, "trial {trial}: {lhs} vs {rhs}");
    }
}

#[test]
fn concat_gradient_routes_slices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[1, 1, 2, 3, 3]);
    let b = random(&mut rng, &[1, 1, 1, 3, 3]);
    let r = grad_check(
        |v| Ok(Tensor::concat(&[v[0].clone(), v[1].clone()], 2)?.mul(&Tensor::concat(&[v[1].clone(), v[0].clone()], 2)?)?),
        &[a, b],
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn checksum(t: &Tensor<f64>) -> u64 {
    t.data().iter().fold(0u64, |h, v| h.rotate_left(7) ^ v.to_bits())
}

#[test]
fn ops_do_not_mutate_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::param(random(&mut rng, &[2, 4, 4, 4]).to_vec(), &[2, 4, 4, 4]).unwrap();
    let w = Tensor::param(random(&mut rng, &[4, 2, 3, 3]).to_vec(), &[4, 2, 3, 3]).unwrap();
    let g = Tensor::param(vec![1.0; 4], &[4]).unwrap();
    let b = Tensor::param(vec![0.0; 4], &[4]).unwrap();
    let sums: Vec<u64> = [&x, &w, &g, &b].iter().map(|t| checksum(t)).collect();
    let y = x.conv(&w, None, ConvSpec::new(2).padding(1).groups(2)).unwrap();
    let y = y.batch_norm(&g, &b, &[0.0; 4], &[1.0; 4], NormMode::Train { momentum: 0.1 }, 1e-5).unwrap().output;
    let y = y.gelu().channel_shuffle(2).unwrap().pixel_shuffle(2).unwrap();
    let y = y.resize_scale(0.5, ResizeMode::Bilinear).unwrap().softmax(1).unwrap();
    let (v, _) = y.topk(2, 2).unwrap();
    v.sum().backward().unwrap();
    let after: Vec<u64> = [&x, &w, &g, &b].iter().map(|t| checksum(t)).collect();
    assert_eq!(sums, after);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pixel_shuffle_is_an_invertible_permutation(
        b in 1usize..3, c in 1usize..4, r in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[b, c * r * r, h, w]);
        let y = x.pixel_shuffle(r).unwrap();
        prop_assert_eq!(y.shape(), &[b, c, h * r, w * r][..]);
        let mut xs = x.to_vec();
        let mut ys = y.to_vec();
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        prop_assert_eq!(xs, ys);
        let back = y.pixel_unshuffle(r).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn channel_shuffle_inverts_with_complementary_groups(
        b in 1usize..3, g in 1usize..5, per in 1usize..5, h in 1usize..4, w in 1usize..4, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = g * per;
        let x = random(&mut rng, &[b, c, h, w]);
        let y = x.channel_shuffle(g).unwrap();
        // each output channel is some input channel, unchanged
        let plane = h * w;
        for bi in 0..b {
            for oc in 0..c {
                let out = &y.data()[(bi * c + oc) * plane..][..plane];
                let found = (0..c).any(|ic| &x.data()[(bi * c + ic) * plane..][..plane] == out);
                prop_assert!(found);
            }
        }
        let back = y.channel_shuffle(per).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn esmt_round_trip(shape in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &shape);
        let y = Tensor::<f64>::from_bytes(&x.to_bytes()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(y.to_vec(), x.to_vec());
    }
}
