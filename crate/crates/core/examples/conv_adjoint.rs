//! Checks the convolution kernels against a direct nested-loop convolution
//! and verifies that transposed convolution is the adjoint of convolution:
//! `<conv(x), y> == <x, conv_t(y)>`.

use dfdnet::autodiff::Tape;
use dfdnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, k, _] = w.dims4().unwrap();
    let (oh, ow) = (
        (h + 2 * pad - k) / stride + 1,
        (wd + 2 * pad - k) / stride + 1,
    );
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cin + c) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn main() -> dfdnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random =
        |shape: Vec<usize>| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let (stride, pad) = (2, 1);
    // Stride 2 with an odd input size would need output padding to invert.
    let x = random(vec![2, 3, 10, 8]);
    let w = random(vec![4, 3, 4, 4]);

    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, stride, pad)?;
    let fast = tape.value(y)?.clone();
    let direct = direct_conv(&x, &w, stride, pad);
    println!(
        "conv2d vs direct loops: max |diff| = {:.3e}",
        fast.max_abs_diff(&direct)?
    );

    // conv_transpose2d takes weights laid out [in, out, k, k]; the adjoint
    // of a conv with weights [cout, cin, k, k] reuses them with cout as input.
    let probe = random(fast.shape().to_vec());
    let pv = tape.constant(probe.clone());
    let back = tape.conv_transpose2d(pv, wv, None, stride, pad)?;
    let back = tape.value(back)?;
    let lhs = fast.inner(&probe)?;
    let rhs = x.inner(back)?;
    println!("<conv(x), y> = {lhs:.12}");
    println!("<x, conv_t(y)> = {rhs:.12}");
    println!("adjoint gap = {:.3e}", (lhs - rhs).abs());
    Ok(())
}
