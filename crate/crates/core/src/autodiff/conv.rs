//! im2col-based convolution kernels shared by `conv2d` and its transpose.
//!
//! Both operators are expressed over one geometry: a "wide" image of
//! `channels x height x width` that a strided window of size `k` scans to
//! produce `out_h x out_w` positions. `conv2d` maps wide -> narrow, the
//! transposed convolution maps narrow -> wide.

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Geometry of a convolution reading an `h x w` image.
    pub fn forward(h: usize, w: usize, k: usize, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Geometry(
                "stride and kernel size must be positive".into(),
            ));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::Geometry(format!(
                "kernel {k} larger than padded input {}x{} (padding {padding})",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            k,
            stride,
            padding,
            h,
            w,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        })
    }

    /// Geometry of a transposed convolution reading an `in_h x in_w` image;
    /// the returned window's `h x w` is the (larger) output.
    pub fn transposed(
        in_h: usize,
        in_w: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 || k == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::Geometry(
                "stride, kernel and input must be positive".into(),
            ));
        }
        let extent = |n: usize| -> Result<usize> {
            let v = (n as isize - 1) * stride as isize - 2 * padding as isize + k as isize;
            if v <= 0 {
                return Err(Error::Geometry(format!(
                    "transposed conv output extent {v} is not positive (input {n}, k {k}, stride {stride}, padding {padding})"
                )));
            }
            Ok(v as usize)
        };
        let h = extent(in_h)?;
        let w = extent(in_w)?;
        let win = Self::forward(h, w, k, stride, padding)?;
        debug_assert_eq!((win.out_h, win.out_w), (in_h, in_w));
        Ok(win)
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source_index(&self, out: usize, tap: usize) -> Option<usize> {
        let i = (out * self.stride + tap) as isize - self.padding as isize;
        (i >= 0).then_some(i as usize)
    }

    /// Unfolds `img` (`channels x h x w`) into `cols` (`channels*k*k x positions`).
    pub fn im2col<T: Element>(&self, img: &[T], channels: usize, cols: &mut [T]) {
        let (k, p) = (self.k, self.positions());
        debug_assert_eq!(cols.len(), channels * k * k * p);
        for c in 0..channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.source_index(oy, ky).filter(|&iy| iy < self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.source_index(ox, kx) {
                                        Some(ix) if ix < self.w => src[ix],
                                        _ => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Folds `cols` back, adding every column entry into its source pixel.
    pub fn col2im<T: Element>(&self, cols: &[T], channels: usize, img: &mut [T]) {
        let (k, p) = (self.k, self.positions());
        for c in 0..channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source_index(oy, ky).filter(|&iy| iy < self.h) else {
                            continue;
                        };
                        let src = &row[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = self.source_index(ox, kx).filter(|&ix| ix < self.w) {
                                dst[ix] = dst[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Shapes of a convolution in `conv2d` orientation: `wide` channels are read
/// by the window, `narrow` channels sit at the window positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub wide_ch: usize,
    pub narrow_ch: usize,
    pub win: Window,
}

impl ConvShape {
    fn wide_len(&self) -> usize {
        self.wide_ch * self.win.h * self.win.w
    }
    fn narrow_len(&self) -> usize {
        self.narrow_ch * self.win.positions()
    }
    fn cols_rows(&self) -> usize {
        self.wide_ch * self.win.k * self.win.k
    }
}

/// `narrow = W * unfold(wide) + bias`, weight `[narrow_ch, wide_ch, k, k]`.
pub(crate) fn conv_forward<T: Element>(
    s: &ConvShape,
    wide: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, p) = (s.cols_rows(), s.win.positions());
    let mut out = vec![T::zero(); s.batch * s.narrow_len()];
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..s.batch {
        s.win.im2col(
            &wide[n * s.wide_len()..][..s.wide_len()],
            s.wide_ch,
            &mut cols,
        );
        let dst = &mut out[n * s.narrow_len()..][..s.narrow_len()];
        if let Some(b) = bias {
            for (c, plane) in dst.chunks_mut(p).enumerate() {
                plane.fill(b[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            s.narrow_ch,
            rows,
            p,
            T::one(),
            weight,
            rows as isize,
            1,
            &cols,
            p as isize,
            1,
            beta,
            dst,
            p as isize,
            1,
        );
    }
    out
}

/// `wide = fold(W^T * narrow) + bias`, the adjoint of [`conv_forward`] plus
/// an optional per-wide-channel bias.
pub(crate) fn conv_adjoint<T: Element>(
    s: &ConvShape,
    narrow: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, p) = (s.cols_rows(), s.win.positions());
    let plane = s.win.h * s.win.w;
    let mut out = vec![T::zero(); s.batch * s.wide_len()];
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..s.batch {
        T::gemm(
            rows,
            s.narrow_ch,
            p,
            T::one(),
            weight,
            1,
            rows as isize,
            &narrow[n * s.narrow_len()..][..s.narrow_len()],
            p as isize,
            1,
            T::zero(),
            &mut cols,
            p as isize,
            1,
        );
        let dst = &mut out[n * s.wide_len()..][..s.wide_len()];
        s.win.col2im(&cols, s.wide_ch, dst);
        if let Some(b) = bias {
            for (c, pl) in dst.chunks_mut(plane).enumerate() {
                for v in pl.iter_mut() {
                    *v = *v + b[c];
                }
            }
        }
    }
    out
}

/// Gradient of a loss w.r.t. the weight, given the wide and narrow tensors
/// (`d_narrow` and `wide`, or `narrow` and `d_wide`, depending on direction).
/// Returns `[narrow_ch, wide_ch*k*k]`.
pub(crate) fn conv_weight_grad<T: Element>(s: &ConvShape, wide: &[T], narrow: &[T]) -> Vec<T> {
    let (rows, p) = (s.cols_rows(), s.win.positions());
    let mut dw = vec![T::zero(); s.narrow_ch * rows];
    let mut cols = vec![T::zero(); rows * p];
    for n in 0..s.batch {
        s.win.im2col(
            &wide[n * s.wide_len()..][..s.wide_len()],
            s.wide_ch,
            &mut cols,
        );
        T::gemm(
            s.narrow_ch,
            p,
            rows,
            T::one(),
            &narrow[n * s.narrow_len()..][..s.narrow_len()],
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            &mut dw,
            rows as isize,
            1,
        );
    }
    dw
}

/// Sums a `[batch, channels, plane]` buffer over batch and plane.
pub(crate) fn channel_sums<T: Element>(g: &[T], batch: usize, channels: usize) -> Vec<T> {
    let plane = g.len() / (batch * channels).max(1);
    let mut out = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let s: T = g[(n * channels + c) * plane..][..plane]
                .iter()
                .copied()
                .sum();
            *o = *o + s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_geometry() {
        let w = Window::forward(128, 128, 4, 2, 1).unwrap();
        assert_eq!((w.out_h, w.out_w), (64, 64));
        let t = Window::transposed(2, 2, 4, 2, 1).unwrap();
        assert_eq!((t.h, t.w), (4, 4));
        assert!(Window::forward(2, 2, 5, 1, 1).is_err());
        assert!(Window::transposed(1, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn fold_is_adjoint_of_unfold() {
        let win = Window::forward(5, 4, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..2 * 20).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_len = 2 * 9 * win.positions();
        let other: Vec<f64> = (0..cols_len).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_len];
        win.im2col(&img, 2, &mut cols);
        let lhs: f64 = cols.iter().zip(&other).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        win.col2im(&other, 2, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
