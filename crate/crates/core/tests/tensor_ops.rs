use occedge::tensor::gradcheck::{grad_check, GradCheckConfig, Subgraph};
use occedge::tensor::{BnMode, ConvSpec, Graph, Real, RunningStats, Shape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Real>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len())
        .map(|_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

#[test]
fn conv_1x1_scales() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap());
    let w = g.constant(Tensor::full(Shape::new(1, 1, 1, 1), 2.0));
    let b = g.constant(Tensor::vector(vec![0.0]));
    let y = g.conv2d(x, w, Some(b), ConvSpec::same(1, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 6.0, 10.0, 14.0]);
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let x0 = random::<f32>(Shape::new(2, 1, 5, 6), 1);
    let mut k = Tensor::zeros(Shape::new(1, 1, 3, 3));
    k.set(0, 0, 1, 1, 1.0);
    let mut g = Graph::<f32>::new();
    let x = g.constant(x0.clone());
    let w = g.constant(k);
    let y = g.conv2d(x, w, None, ConvSpec::same(3, 1)).unwrap();
    assert_eq!(g.value(y), &x0);
}

#[test]
fn dilated_impulse_and_receptive_field() {
    let mut img = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 5));
    img.set(0, 0, 2, 2, 1.0);
    let mut g = Graph::<f64>::new();
    let x = g.param(img.clone());
    let w = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
    let spec = ConvSpec { stride: 1, pad: 0, dilation: 2 };
    let y = g.conv2d(x, w, None, spec).unwrap();
    assert_eq!(g.shape(y), Shape::new(1, 1, 1, 1));
    // direct summation over the dilated taps
    let mut direct = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            direct += img.at(0, 0, 2 * i, 2 * j);
        }
    }
    assert_eq!(g.value(y).item(), direct);
    assert_eq!(direct, 1.0);

    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    for r in 0..5 {
        for c in 0..5 {
            let expected = if r % 2 == 0 && c % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(gx.at(0, 0, r, c), expected, "({r},{c})");
        }
    }
}

#[test]
fn conv_errors_name_the_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
    let w = g.constant(Tensor::zeros(Shape::new(2, 2, 3, 3)));
    let err = g.conv2d(x, w, None, ConvSpec::same(3, 1)).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "conv2d",
            extent: "input channel",
            expected: 2,
            actual: 3
        }
    );
    assert!(err.to_string().contains("input channel"));

    let w = g.constant(Tensor::zeros(Shape::new(2, 3, 5, 5)));
    let err = g.conv2d(x, w, None, ConvSpec::same(1, 1)).unwrap_err();
    assert!(matches!(err, TensorError::EmptyOutput { extent: "height", .. }));
}

#[test]
fn batch_norm_constant_channel_maps_to_zero() {
    let mut t = Tensor::<f32>::zeros(Shape::new(2, 2, 3, 3));
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = if (i / 9) % 2 == 0 { 4.0 } else { -7.0 };
    }
    let mut g = Graph::<f32>::new();
    let x = g.constant(t);
    let s = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let mut stats = RunningStats::new(2);
    let y = g.batch_norm(x, s, b, &mut stats, BnMode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_identity_on_standardized_input() {
    // per channel exactly mean 0, variance 1
    let pattern = [1.0f64, -1.0, 1.0, -1.0];
    let data: Vec<f64> = (0..8).map(|i| pattern[i % 4]).collect();
    let t = Tensor::from_vec(Shape::new(1, 2, 2, 2), data).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.constant(t.clone());
    let s = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let mut stats = RunningStats::new(2);
    let y = g.batch_norm(x, s, b, &mut stats, BnMode::Train).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, i) in g.value(y).data().iter().zip(t.data()) {
        assert!((o - i * scale).abs() < 1e-12);
        assert!((o - i).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_running_mean_is_ema() {
    let a = random::<f64>(Shape::new(2, 3, 4, 4), 5);
    let b = random::<f64>(Shape::new(2, 3, 4, 4), 6);
    let mut stats = RunningStats::<f64>::new(3);
    let channel_mean = |t: &Tensor<f64>, c: usize| {
        let mut s = 0.0;
        for n in 0..2 {
            for h in 0..4 {
                for w in 0..4 {
                    s += t.at(n, c, h, w);
                }
            }
        }
        s / 32.0
    };
    for t in [&a, &b] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t.clone());
        let s = g.constant(Tensor::vector(vec![1.0; 3]));
        let sh = g.constant(Tensor::vector(vec![0.0; 3]));
        g.batch_norm(x, s, sh, &mut stats, BnMode::Train).unwrap();
    }
    for c in 0..3 {
        let expected = 0.9 * (0.9 * 0.0 + 0.1 * channel_mean(&a, c)) + 0.1 * channel_mean(&b, c);
        assert!((stats.mean[c] - expected).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_infer_uses_running_stats() {
    let mut stats = RunningStats::<f64> {
        mean: vec![2.0],
        var: vec![4.0],
    };
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 1, 2), 4.0));
    let s = g.constant(Tensor::vector(vec![3.0]));
    let b = g.constant(Tensor::vector(vec![1.0]));
    let y = g.batch_norm(x, s, b, &mut stats, BnMode::Infer).unwrap();
    let expected = 3.0 * 2.0 / (4.0f64 + 1e-5).sqrt() + 1.0;
    assert!((g.value(y).data()[0] - expected).abs() < 1e-12);
    assert_eq!(stats.mean, vec![2.0]);
}

#[test]
fn activations() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_rows(&[&[-1.5, 2.0, 0.0]]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[2], 0.5);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_rows(&[&[30.0, -30.0, 800.0, -800.0]]).unwrap());
    let s = g.sigmoid(x);
    let v = g.value(s).data().to_vec();
    // extended-precision reference: 1/(1+e^30) = 9.357622968840175e-14
    let tail = 9.357622968840175e-14;
    assert!((v[0] - (1.0 - tail)).abs() < 1e-15);
    assert!((v[1] - tail).abs() < 1e-20);
    assert!((v[0] - 1.0).abs() < 1e-9 && v[1].abs() < 1e-9);
    assert!(v.iter().all(|&p| p > 0.0 && p < 1.0 && p.is_finite()));

    let mut g32 = Graph::<f32>::new();
    let x = g32.constant(Tensor::from_rows(&[&[30.0, -30.0, 1e4, -1e4]]).unwrap());
    let s = g32.sigmoid(x);
    assert!(g32.value(s).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn upsample_examples() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::full(Shape::new(1, 2, 3, 2), 0.7));
    let u = g.upsample_bilinear(c, 7, 5).unwrap();
    assert!(g.value(u).data().iter().all(|&v| v == 0.7));

    let x = g.constant(Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 3.0]]).unwrap());
    let u = g.upsample_bilinear(x, 3, 3).unwrap();
    assert_eq!(g.value(u).at(0, 0, 1, 1), 1.5);
    assert_eq!(g.value(u).at(0, 0, 0, 0), 0.0);
    assert_eq!(g.value(u).at(0, 0, 2, 2), 3.0);

    assert!(g.upsample_bilinear(x, 1, 3).is_err());
}

#[test]
fn upsample_is_convex_combination() {
    let x0 = random::<f64>(Shape::new(1, 1, 4, 4), 11);
    let mut g = Graph::<f64>::new();
    let x = g.constant(x0.clone());
    let u = g.upsample_bilinear(x, 8, 8).unwrap();
    let (lo, hi) = x0.min_max();
    // recompute each output independently with align-corners coordinates
    for oy in 0..8 {
        for ox in 0..8 {
            let sy = oy as f64 * 3.0 / 7.0;
            let sx = ox as f64 * 3.0 / 7.0;
            let (y0, x0i) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(3), (x0i + 1).min(3));
            let (fy, fx) = (sy - y0 as f64, sx - x0i as f64);
            let v = x0.at(0, 0, y0, x0i) * (1.0 - fy) * (1.0 - fx)
                + x0.at(0, 0, y0, x1) * (1.0 - fy) * fx
                + x0.at(0, 0, y1, x0i) * fy * (1.0 - fx)
                + x0.at(0, 0, y1, x1) * fy * fx;
            let got = g.value(u).at(0, 0, oy, ox);
            assert!((got - v).abs() < 1e-12);
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
        }
    }
}

#[test]
fn combine_identities_and_broadcast() {
    let a0 = random::<f32>(Shape::new(2, 2, 3, 3), 3);
    let mut g = Graph::<f32>::new();
    let a = g.constant(a0.clone());
    let ones = g.constant(Tensor::ones(a0.shape()));
    let zeros = g.constant(Tensor::zeros(a0.shape()));
    let p = g.mul(a, ones).unwrap();
    assert_eq!(g.value(p), &a0);
    let z = g.mul(a, zeros).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));

    let c0 = random::<f32>(Shape::new(2, 1, 3, 3), 4);
    let c = g.constant(c0.clone());
    let r = g.mul(a, c).unwrap();
    for n in 0..2 {
        for ch in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    assert_eq!(g.value(r).at(n, ch, h, w), a0.at(n, ch, h, w) * c0.at(n, 0, h, w));
                }
            }
        }
    }
    let bad = g.constant(Tensor::zeros(Shape::new(2, 2, 3, 4)));
    assert!(matches!(
        g.mul(a, bad).unwrap_err(),
        TensorError::ShapeMismatch { extent: "width", .. }
    ));
}

#[test]
fn concat_shapes_and_singleton() {
    let a0 = random::<f32>(Shape::new(1, 2, 2, 2), 1);
    let b0 = random::<f32>(Shape::new(1, 3, 2, 2), 2);
    let mut g = Graph::<f32>::new();
    let a = g.constant(a0.clone());
    let b = g.constant(b0.clone());
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.shape(c).c, 5);
    assert_eq!(&g.value(c).data()[..8], a0.data());
    assert_eq!(&g.value(c).data()[8..], b0.data());
    let s = g.concat_channels(&[a]).unwrap();
    assert_eq!(g.value(s), &a0);
    let other = g.constant(Tensor::zeros(Shape::new(1, 1, 3, 2)));
    assert!(g.concat_channels(&[a, other]).is_err());
}

#[test]
fn concat_gradient_matches_finite_differences() {
    let a0 = random::<f64>(Shape::new(1, 2, 2, 2), 1);
    let b0 = random::<f64>(Shape::new(1, 1, 2, 2), 2);
    let f = |a: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let a = g.constant(a.clone());
        let b = g.constant(b0.clone());
        let c = g.concat_channels(&[a, b]).unwrap();
        let s = g.sum(c);
        g.value(s).item()
    };
    let eps = 1e-4;
    for i in 0..a0.len() {
        let mut p = a0.clone();
        p.data_mut()[i] += eps;
        let mut m = a0.clone();
        m.data_mut()[i] -= eps;
        let fd = (f(&p) - f(&m)) / (2.0 * eps);
        assert!((fd - 1.0).abs() < 1e-9);
    }
    let mut g = Graph::<f64>::new();
    let a = g.param(a0.clone());
    let b = g.param(b0);
    let c = g.concat_channels(&[a, b]).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_basics() {
    let x0 = Tensor::<f64>::from_rows(&[&[0.5, 1.5, 2.0]]).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let r = g.relu(x);
    let l = g.sum(r);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 3.0, 4.0]);

    assert!(matches!(g.backward(sq), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn unreached_leaves_have_no_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let unused = g.param(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let k = g.constant(Tensor::ones(Shape::new(1, 1, 2, 2)));
    let p = g.mul(x, k).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert!(grads.contains(x));
    assert!(!grads.contains(unused));
    assert!(!grads.contains(k));
    assert_eq!(grads.len(), 1);
}

struct ConvCheck;

impl Subgraph for ConvCheck {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> occedge::Result<Var> {
        let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride: 2, pad: 2, dilation: 2 })?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    }
}

struct BnCheck;

impl Subgraph for BnCheck {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> occedge::Result<Var> {
        let mut stats = RunningStats::new(3);
        let y = g.batch_norm(v[0], v[1], v[2], &mut stats, BnMode::Train)?;
        // weight the output so the loss is not invariant to normalization
        let w = g.constant(random::<T>(g.shape(y), 99));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
}

struct MixedCheck;

impl Subgraph for MixedCheck {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> occedge::Result<Var> {
        let up = g.upsample_bilinear(v[0], 7, 9)?;
        let s = g.sigmoid(up);
        let t = g.tanh(up);
        let c = g.concat_channels(&[s, t])?;
        let gate = g.slice_channels(c, 0, 1)?;
        let m = g.mul(c, gate)?;
        let a = g.add(m, gate)?;
        let r = g.relu(a);
        let k = g.scale(r, T::from_f64_lossy(1.7));
        let sq = g.mul(k, k)?;
        Ok(g.sum(sq))
    }
}

#[test]
fn grad_check_operators_single_and_double() {
    let cfg = GradCheckConfig::default();
    let conv_inputs = vec![
        random::<f64>(Shape::new(2, 3, 7, 6), 21),
        random::<f64>(Shape::new(4, 3, 3, 3), 22),
        random::<f64>(Shape::new(1, 4, 1, 1), 23),
    ];
    let bn_inputs = vec![
        random::<f64>(Shape::new(2, 3, 4, 5), 31),
        random::<f64>(Shape::new(1, 3, 1, 1), 32),
        random::<f64>(Shape::new(1, 3, 1, 1), 33),
    ];
    let mixed_inputs = vec![random::<f64>(Shape::new(1, 1, 3, 4), 41)];
    for (name, r32, r64) in [
        (
            "conv",
            grad_check::<f32, _>(&ConvCheck, &conv_inputs, &cfg).unwrap(),
            grad_check::<f64, _>(&ConvCheck, &conv_inputs, &cfg).unwrap(),
        ),
        (
            "bn",
            grad_check::<f32, _>(&BnCheck, &bn_inputs, &cfg).unwrap(),
            grad_check::<f64, _>(&BnCheck, &bn_inputs, &cfg).unwrap(),
        ),
        (
            "mixed",
            grad_check::<f32, _>(&MixedCheck, &mixed_inputs, &cfg).unwrap(),
            grad_check::<f64, _>(&MixedCheck, &mixed_inputs, &cfg).unwrap(),
        ),
    ] {
        assert!(r32.passes(1e-3), "{name} f32: {r32:?}");
        assert!(r64.passes(1e-6), "{name} f64: {r64:?}");
    }
}

struct Faulty;

impl Subgraph for Faulty {
    fn build<T: Real>(&self, g: &mut Graph<T>, v: &[Var]) -> occedge::Result<Var> {
        ConvCheck.build(g, v)
    }

    fn inject_fault(&self) -> bool {
        true
    }
}

#[test]
fn grad_check_detects_flipped_conv_backward() {
    let inputs = vec![
        random::<f64>(Shape::new(1, 3, 7, 6), 21),
        random::<f64>(Shape::new(4, 3, 3, 3), 22),
        random::<f64>(Shape::new(1, 4, 1, 1), 23),
    ];
    let r = grad_check::<f64, _>(&Faulty, &inputs, &GradCheckConfig::default()).unwrap();
    assert!(!r.passes(1e-3));
    assert!(r.max_rel_error > 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn receptive_field_is_exactly_the_dilated_window(
        k in 1usize..4, d in 1usize..4, oy in 0usize..3, ox in 0usize..3, seed in 0u64..1000,
    ) {
        let span = d * (k - 1) + 1;
        let (h, w) = (span + 3, span + 4);
        let mut g = Graph::<f64>::new();
        let x = g.param(random(Shape::new(1, 2, h, w), seed));
        // strictly nonzero weights so every tap contributes
        let wt = random::<f64>(Shape::new(1, 2, k, k), seed + 1).map(|v| v.abs() + 0.5);
        let wv = g.constant(wt);
        let y = g.conv2d(x, wv, None, ConvSpec { stride: 1, pad: 0, dilation: d }).unwrap();
        let mask = {
            let ys = g.shape(y);
            let mut m = Tensor::zeros(ys);
            m.set(0, 0, oy, ox, 1.0);
            g.constant(m)
        };
        let picked = g.mul(y, mask).unwrap();
        let l = g.sum(picked);
        let grads = g.backward(l).unwrap();
        let gx = grads.get(x).unwrap();
        for c in 0..2 {
            for r in 0..h {
                for col in 0..w {
                    let (dr, dc) = (r as isize - oy as isize, col as isize - ox as isize);
                    let inside = dr >= 0 && dc >= 0 && dr % d as isize == 0 && dc % d as isize == 0
                        && (dr as usize) < span && (dc as usize) < span;
                    prop_assert_eq!(gx.at(0, c, r, col) != 0.0, inside);
                }
            }
        }
    }

    #[test]
    fn concat_slice_round_trip(ca in 1usize..4, cb in 1usize..4, seed in 0u64..1000) {
        let a0 = random::<f32>(Shape::new(2, ca, 3, 2), seed);
        let b0 = random::<f32>(Shape::new(2, cb, 3, 2), seed + 7);
        let mut g = Graph::<f32>::new();
        let a = g.constant(a0.clone());
        let b = g.constant(b0.clone());
        let c = g.concat_channels(&[a, b]).unwrap();
        let sa = g.slice_channels(c, 0, ca).unwrap();
        let sb = g.slice_channels(c, ca, cb).unwrap();
        prop_assert_eq!(g.value(sa), &a0);
        prop_assert_eq!(g.value(sb), &b0);
    }

    #[test]
    fn forward_ops_stay_finite_and_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let x0 = random::<f32>(Shape::new(1, 2, 4, 4), seed).map(|v| v * scale as f32);
        let mut g = Graph::<f32>::new();
        let x = g.constant(x0.clone());
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let u = g.upsample_bilinear(x, 9, 11).unwrap();
        let (lo, hi) = x0.min_max();
        prop_assert!(g.value(u).data().iter().all(|&v| v >= lo && v <= hi));
        let t = g.tanh(x);
        let r = g.relu(x);
        for v in [s, u, t, r] {
            prop_assert!(g.value(v).is_finite());
        }
    }
}
