//! im2col/col2im plumbing shared by the 1-D and 2-D convolution ops.

use super::scalar::Scalar;

/// floor((extent + 2*pad - k) / stride) + 1; None when the kernel does not
/// fit the padded input.
pub(crate) fn conv_out_len(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Gather one sample's [c_in * k, t_out] patch matrix.
pub(crate) fn im2col_1d<T: Scalar>(
    x: &[T],
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(x.len(), c_in * t_in);
    debug_assert_eq!(cols.len(), c_in * k * t_out);
    for c in 0..c_in {
        for i in 0..k {
            let row = (c * k + i) * t_out;
            for ot in 0..t_out {
                let t = (ot * stride + i) as isize - pad as isize;
                cols[row + ot] = if t >= 0 && (t as usize) < t_in {
                    x[c * t_in + t as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

/// Scatter-add the column gradients back onto one sample's input gradient.
pub(crate) fn col2im_1d<T: Scalar>(
    cols: &[T],
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    dx: &mut [T],
) {
    for c in 0..c_in {
        for i in 0..k {
            let row = (c * k + i) * t_out;
            for ot in 0..t_out {
                let t = (ot * stride + i) as isize - pad as isize;
                if t >= 0 && (t as usize) < t_in {
                    let idx = c * t_in + t as usize;
                    dx[idx] = dx[idx] + cols[row + ot];
                }
            }
        }
    }
}

/// Gather one sample's [c_in * kh * kw, h_out * w_out] patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col_2d<T: Scalar>(
    x: &[T],
    c_in: usize,
    (h_in, w_in): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (h_out, w_out): (usize, usize),
    cols: &mut [T],
) {
    debug_assert_eq!(x.len(), c_in * h_in * w_in);
    debug_assert_eq!(cols.len(), c_in * kh * kw * h_out * w_out);
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (((c * kh) + i) * kw + j) * (h_out * w_out);
                for oh in 0..h_out {
                    let h = (oh * sh + i) as isize - ph as isize;
                    let base = row + oh * w_out;
                    if h < 0 || h as usize >= h_in {
                        cols[base..base + w_out].fill(T::zero());
                        continue;
                    }
                    let x_base = (c * h_in + h as usize) * w_in;
                    for ow in 0..w_out {
                        let w = (ow * sw + j) as isize - pw as isize;
                        cols[base + ow] = if w >= 0 && (w as usize) < w_in {
                            x[x_base + w as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_2d<T: Scalar>(
    cols: &[T],
    c_in: usize,
    (h_in, w_in): (usize, usize),
    (kh, kw): (usize, usize),
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
    (h_out, w_out): (usize, usize),
    dx: &mut [T],
) {
    for c in 0..c_in {
        for i in 0..kh {
            for j in 0..kw {
                let row = (((c * kh) + i) * kw + j) * (h_out * w_out);
                for oh in 0..h_out {
                    let h = (oh * sh + i) as isize - ph as isize;
                    if h < 0 || h as usize >= h_in {
                        continue;
                    }
                    let base = row + oh * w_out;
                    let x_base = (c * h_in + h as usize) * w_in;
                    for ow in 0..w_out {
                        let w = (ow * sw + j) as isize - pw as isize;
                        if w >= 0 && (w as usize) < w_in {
                            let idx = x_base + w as usize;
                            dx[idx] = dx[idx] + cols[base + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_formula() {
        assert_eq!(conv_out_len(200, 3, 2, 1), Some(100));
        assert_eq!(conv_out_len(200, 5, 5, 0), Some(40));
        assert_eq!(conv_out_len(200, 3, 3, 0), Some(66));
        assert_eq!(conv_out_len(4, 3, 1, 0), Some(2));
        assert_eq!(conv_out_len(2, 3, 1, 0), None);
        assert_eq!(conv_out_len(2, 3, 1, 1), Some(2));
        assert_eq!(conv_out_len(5, 2, 0, 0), None);
    }

    #[test]
    fn im2col_1d_lays_out_windows() {
        // One channel, signal 1..=5, k=3, stride 1, pad 1.
        let x: Vec<f64> = vec![1., 2., 3., 4., 5.];
        let t_out = conv_out_len(5, 3, 1, 1).unwrap();
        assert_eq!(t_out, 5);
        let mut cols = vec![0.0; 3 * 5];
        im2col_1d(&x, 1, 5, 3, 1, 1, 5, &mut cols);
        assert_eq!(&cols[0..5], &[0., 1., 2., 3., 4.]); // k offset 0 (left pad)
        assert_eq!(&cols[5..10], &[1., 2., 3., 4., 5.]); // center
        assert_eq!(&cols[10..15], &[2., 3., 4., 5., 0.]); // right pad
    }

    #[test]
    fn col2im_1d_is_adjoint_of_im2col_1d() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish fills.
        let x: Vec<f64> = (0..12).map(|i| (i as f64) * 0.5 - 2.0).collect();
        let (c_in, t_in, k, stride, pad) = (2, 6, 3, 2, 1);
        let t_out = conv_out_len(t_in, k, stride, pad).unwrap();
        let mut cols = vec![0.0; c_in * k * t_out];
        im2col_1d(&x, c_in, t_in, k, stride, pad, t_out, &mut cols);
        let c: Vec<f64> = (0..cols.len()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_1d(&c, c_in, t_in, k, stride, pad, t_out, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn col2im_2d_is_adjoint_of_im2col_2d() {
        let (c_in, h, w, kh, kw, sh, sw, ph, pw) = (2, 5, 4, 3, 2, 2, 1, 1, 0);
        let h_out = conv_out_len(h, kh, sh, ph).unwrap();
        let w_out = conv_out_len(w, kw, sw, pw).unwrap();
        let x: Vec<f64> = (0..c_in * h * w).map(|i| (i as f64).sin()).collect();
        let mut cols = vec![0.0; c_in * kh * kw * h_out * w_out];
        im2col_2d(&x, c_in, (h, w), (kh, kw), (sh, sw), (ph, pw), (h_out, w_out), &mut cols);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_2d(&c, c_in, (h, w), (kh, kw), (sh, sw), (ph, pw), (h_out, w_out), &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
