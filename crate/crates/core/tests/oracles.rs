//! Independent reference implementations checked against the library:
//! direct convolution, the conv/transposed-conv adjoint identity, a scalar
//! windowed SSIM, a single-kernel blur and loop-based loss terms.

mod common;

use common::{direct_conv, random_tensor, scalar_ssim, single_kernel_blur};
use dfdnet::autodiff::Tape;
use dfdnet::loss::{self, SsimConfig};
use dfdnet::optics::{defocus_image, DefocusSettings, ThinLensCamera};
use dfdnet::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 2, 5)] {
        let x = random_tensor(&mut rng, vec![2, 4, 8, 8]);
        let w = random_tensor(&mut rng, vec![3, 4, k, k]);
        let b = random_tensor(&mut rng, vec![3]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            tape.constant(b.clone()),
        );
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let got = tape.value(y).unwrap();
        let want = direct_conv(&x, &w, Some(&b), stride, pad);
        assert_eq!(got.shape(), want.shape());
        let err = got.max_abs_diff(&want).unwrap();
        assert!(err <= 1e-12, "stride {stride} pad {pad} k {k}: {err:e}");
    }
}

#[test]
fn conv2d_ones_example() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let v = tape.value(y).unwrap().data().to_vec();
    assert_eq!(v[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(v[corner], 4.0);
    }
}

#[test]
fn transposed_conv_is_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (shape, k, stride, pad) in [
        (vec![1, 2, 5, 5], 3, 1, 1),
        (vec![2, 3, 8, 8], 4, 2, 1),
        (vec![1, 2, 7, 7], 3, 2, 0),
    ] {
        let x = random_tensor(&mut rng, shape);
        let w = random_tensor(&mut rng, vec![3, x.shape()[1], k, k]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
        let cx = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let cx_val = tape.value(cx).unwrap().clone();
        let y = random_tensor(&mut rng, cx_val.shape().to_vec());
        let yv = tape.constant(y.clone());
        let ty = tape.conv_transpose2d(yv, wv, None, stride, pad).unwrap();
        let ty_val = tape.value(ty).unwrap();
        assert_eq!(ty_val.shape(), x.shape());
        let lhs = cx_val.inner(&y).unwrap();
        let rhs = x.inner(ty_val).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn ssim_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SsimConfig::default();
    for shape in [vec![1, 1, 11, 11], vec![1, 3, 16, 20], vec![2, 2, 13, 12]] {
        let a = random_tensor(&mut rng, shape.clone()).map(|v| 0.5 + 0.5 * v);
        let b = a.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
        let c = random_tensor(&mut rng, shape).map(|v| 0.5 + 0.5 * v);
        for other in [&b, &c] {
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(other.clone()));
            let l = loss::ssim_loss(&mut tape, x, y, &cfg).unwrap();
            let got = 1.0 - tape.item(l).unwrap();
            let want = scalar_ssim(&a, other, &cfg);
            assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn constant_depth_blur_matches_single_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let aif64 = random_tensor(&mut rng, vec![1, 3, 24, 20]).map(|v| 0.5 + 0.5 * v);
    let aif = aif64.cast::<f32>();
    let camera = ThinLensCamera {
        coc_to_pixel: 3000.0,
        ..ThinLensCamera::default()
    };
    let settings = DefocusSettings::default();
    for depth in [0.8, 1.3, 4.0, 9.5] {
        let depth_map = Tensor::<f32>::full(vec![1, 1, 24, 20], depth as f32);
        let got = defocus_image(&aif, &depth_map, &camera, &settings).unwrap();
        let rho = camera.coc_pixels(depth as f32 as f64).unwrap() / 4.0;
        let want = single_kernel_blur(&aif, rho, settings.truncate);
        let err = got.cast::<f64>().max_abs_diff(&want).unwrap();
        assert!(err <= 1e-6, "depth {depth}: rho {rho}, err {err:e}");
    }
}

#[test]
fn grad_smooth_matches_loops_and_ramp() {
    let mut tape = Tape::<f64>::new();
    let ramp = tape.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| (i % 4) as f64));
    let zero = tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let g = loss::grad_smooth(&mut tape, ramp, zero).unwrap();
    assert_eq!(tape.item(g).unwrap(), 0.75);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_tensor(&mut rng, vec![2, 1, 5, 6]);
    let t = random_tensor(&mut rng, vec![2, 1, 5, 6]);
    let mut tape = Tape::new();
    let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
    let g = loss::grad_smooth(&mut tape, pv, tv).unwrap();
    let r: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
    let mut sum = 0.0;
    for b in 0..2 {
        for y in 0..5 {
            for x in 0..6 {
                let i = b * 30 + y * 6 + x;
                if x + 1 < 6 {
                    sum += (r[i + 1] - r[i]).abs();
                }
                if y + 1 < 5 {
                    sum += (r[i + 6] - r[i]).abs();
                }
            }
        }
    }
    let want = sum / (2 * 5 * 6) as f64;
    assert!((tape.item(g).unwrap() - want).abs() <= 1e-12);
}

#[test]
fn charbonnier_and_l1_match_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = random_tensor(&mut rng, vec![2, 3, 4, 5]);
    let t = random_tensor(&mut rng, vec![2, 3, 4, 5]);
    let n = p.len() as f64;
    let mut tape = Tape::new();
    let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
    let ch = loss::charbonnier(&mut tape, pv, tv, 1e-3).unwrap();
    let l1 = loss::l1_deblur(&mut tape, pv, tv).unwrap();
    let pairs = || p.data().iter().zip(t.data());
    let ch_want = pairs()
        .map(|(a, b)| ((a - b).powi(2) + 1e-6).sqrt())
        .sum::<f64>()
        / n;
    let l1_want = pairs().map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    assert!((tape.item(ch).unwrap() - ch_want).abs() <= 1e-12);
    assert!((tape.item(l1).unwrap() - l1_want).abs() <= 1e-12);
}
