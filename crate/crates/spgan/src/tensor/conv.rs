//! Direct 2-D cross-correlation kernels (forward and the pieces backward
//! needs). Shapes follow [N, C, H, W] row-major.
//!
//! Inner loops run over row slices per kernel tap so the compiler can
//! vectorize them; forward and weight-gradient sums accumulate in f64.

use crate::error::{Error, Result};

use super::Tensor;

/// Output spatial size for one axis; the division must be exact.
pub fn conv2d_out_hw(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::config(format!(
            "conv2d: kernel {kernel} larger than padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::config(format!(
            "conv2d: non-exact output size ((({input} + 2*{padding}) - {kernel}) / {stride})"
        )));
    }
    Ok(span / stride + 1)
}

/// Output coordinates o with 0 <= o*stride + k - padding < in_len,
/// clamped to [0, out_len).
fn tap_range(k: usize, in_len: usize, out_len: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > k { (padding - k).div_ceil(stride) } else { 0 };
    let hi = if in_len + padding > k {
        ((in_len - 1 + padding - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

#[allow(clippy::type_complexity)]
fn check_conv_args(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    if stride < 1 {
        return Err(Error::config("conv2d: stride must be >= 1".to_string()));
    }
    let (n, c_in, h, w_in) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = w.dims4()?;
    if kh < 1 || kw < 1 {
        return Err(Error::config("conv2d: kernel dims must be >= 1".to_string()));
    }
    if wc_in != c_in {
        return Err(Error::config(format!(
            "conv2d: weight expects {wc_in} input channels, input has {c_in}"
        )));
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    let oh = conv2d_out_hw(h, kh, stride, padding)?;
    let ow = conv2d_out_hw(w_in, kw, stride, padding)?;
    Ok((n, c_in, h, w_in, c_out, kh, kw, oh, ow))
}

/// Cross-correlation: out[n,co,y,x] = b[co] + sum x[n,ci,y*s-p+ky,x*s-p+kx] * w[co,ci,ky,kx].
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, c_in, h, w_in, c_out, kh, kw, oh, ow) = check_conv_args(x, w, b, stride, padding)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f32; n * c_out * oh * ow];
    let mut acc = vec![0.0f64; oh * ow];

    for ni in 0..n {
        for co in 0..c_out {
            let bias = b.map_or(0.0, |b| b.data()[co]) as f64;
            acc.fill(bias);
            for ci in 0..c_in {
                let x_plane = &xd[(ni * c_in + ci) * h * w_in..][..h * w_in];
                let w_tap = &wd[(co * c_in + ci) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ky, h, oh, stride, padding);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let x_row = &x_plane[iy * w_in..][..w_in];
                        let acc_row = &mut acc[oy * ow..][..ow];
                        for kx in 0..kw {
                            let wv = w_tap[ky * kw + kx] as f64;
                            let (ox_lo, ox_hi) = tap_range(kx, w_in, ow, stride, padding);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let ix0 = ox_lo * stride + kx - padding;
                            if stride == 1 {
                                let xs = &x_row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (a, &xv) in acc_row[ox_lo..ox_hi].iter_mut().zip(xs) {
                                    *a += wv * xv as f64;
                                }
                            } else {
                                let mut ix = ix0;
                                for a in acc_row[ox_lo..ox_hi].iter_mut() {
                                    *a += wv * x_row[ix] as f64;
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
            let out_plane = &mut out[(ni * c_out + co) * oh * ow..][..oh * ow];
            for (o, &a) in out_plane.iter_mut().zip(acc.iter()) {
                *o = a as f32;
            }
        }
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}

/// Gradients of conv2d w.r.t. (input, weight, bias) given upstream `grad`.
/// Each output is computed only when the matching `need_*` flag is set, so
/// backprop through frozen convolutions skips the weight-gradient work.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
    stride: usize,
    padding: usize,
    grad: &Tensor,
) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (n, c_in, h, w_in, c_out, kh, kw, oh, ow) = check_conv_args(x, w, None, stride, padding)?;
    debug_assert_eq!(grad.shape(), [n, c_out, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let gd = grad.data();

    let db = if need_db {
        let mut db = vec![0.0f64; c_out];
        for ni in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let g_plane = &gd[(ni * c_out + co) * oh * ow..][..oh * ow];
                *acc += g_plane.iter().map(|&g| g as f64).sum::<f64>();
            }
        }
        Some(Tensor::new(vec![c_out], db.into_iter().map(|v| v as f32).collect())?)
    } else {
        None
    };

    let dx = if need_dx {
        let mut dx = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for co in 0..c_out {
                let g_plane = &gd[(ni * c_out + co) * oh * ow..][..oh * ow];
                for ci in 0..c_in {
                    let dx_plane = &mut dx[(ni * c_in + ci) * h * w_in..][..h * w_in];
                    let w_tap = &wd[(co * c_in + ci) * kh * kw..][..kh * kw];
                    for ky in 0..kh {
                        let (oy_lo, oy_hi) = tap_range(ky, h, oh, stride, padding);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let g_row = &g_plane[oy * ow..][..ow];
                            let dx_row = &mut dx_plane[iy * w_in..][..w_in];
                            for kx in 0..kw {
                                let wv = w_tap[ky * kw + kx];
                                let (ox_lo, ox_hi) = tap_range(kx, w_in, ow, stride, padding);
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let ix0 = ox_lo * stride + kx - padding;
                                if stride == 1 {
                                    let dst = &mut dx_row[ix0..ix0 + (ox_hi - ox_lo)];
                                    for (d, &g) in dst.iter_mut().zip(&g_row[ox_lo..ox_hi]) {
                                        *d += wv * g;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for &g in &g_row[ox_lo..ox_hi] {
                                        dx_row[ix] += wv * g;
                                        ix += stride;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    let dw = if need_dw {
        let mut dw = vec![0.0f32; wd.len()];
        for co in 0..c_out {
            for ci in 0..c_in {
                let w_base = (co * c_in + ci) * kh * kw;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = tap_range(ky, h, oh, stride, padding);
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = tap_range(kx, w_in, ow, stride, padding);
                        if ox_lo >= ox_hi || oy_lo >= oy_hi {
                            continue;
                        }
                        let mut acc = 0.0f64;
                        for ni in 0..n {
                            let g_plane = &gd[(ni * c_out + co) * oh * ow..][..oh * ow];
                            let x_plane = &xd[(ni * c_in + ci) * h * w_in..][..h * w_in];
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - padding;
                                let g_row = &g_plane[oy * ow..][..ow];
                                let x_row = &x_plane[iy * w_in..][..w_in];
                                let ix0 = ox_lo * stride + kx - padding;
                                if stride == 1 {
                                    let xs = &x_row[ix0..ix0 + (ox_hi - ox_lo)];
                                    for (&g, &xv) in g_row[ox_lo..ox_hi].iter().zip(xs) {
                                        acc += g as f64 * xv as f64;
                                    }
                                } else {
                                    let mut ix = ix0;
                                    for &g in &g_row[ox_lo..ox_hi] {
                                        acc += g as f64 * x_row[ix] as f64;
                                        ix += stride;
                                    }
                                }
                            }
                        }
                        dw[w_base + ky * kw + kx] = acc as f32;
                    }
                }
            }
        }
        Some(Tensor::new(w.shape().to_vec(), dw)?)
    } else {
        None
    };

    Ok((dx, dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: materialize the zero-padded input, then slide the
    /// window with explicit bounds, accumulating in f64.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (n, c_in, h, wi) = x.dims4().unwrap();
        let (c_out, _, kh, kw) = w.dims4().unwrap();
        let ph = h + 2 * pad;
        let pw = wi + 2 * pad;
        let mut padded = vec![0.0f32; n * c_in * ph * pw];
        for ni in 0..n {
            for ci in 0..c_in {
                for y in 0..h {
                    for xx in 0..wi {
                        padded[((ni * c_in + ci) * ph + y + pad) * pw + xx + pad] =
                            x.data()[((ni * c_in + ci) * h + y) * wi + xx];
                    }
                }
            }
        }
        let oh = (ph - kh) / stride + 1;
        let ow = (pw - kw) / stride + 1;
        let mut out = vec![0.0f32; n * c_out * oh * ow];
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]) as f64;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let pv = padded
                                        [((ni * c_in + ci) * ph + oy * stride + ky) * pw
                                            + ox * stride
                                            + kx];
                                    let wv = w.data()[((co * c_in + ci) * kh + ky) * kw + kx];
                                    acc += pv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((ni * c_out + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        Tensor::new(vec![n, c_out, oh, ow], out).unwrap()
    }

    #[test]
    fn scalar_kernel_scales_input() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn all_ones_kernel_padded_matches_oracle() {
        // Frozen from the padding oracle: every output cell sums all four
        // input values 1+2+3+4.
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
        let oracle = conv_oracle(&x, &w, None, 1, 1);
        assert_eq!(y.data(), oracle.data());
    }

    #[test]
    fn identity_kernel_is_exact_identity() {
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // center tap
        let x = Tensor::new(
            vec![1, 1, 3, 3],
            vec![0.5, -1.25, 3.0, 7.5, 0.0, 2.0, -0.875, 4.0, 9.0],
        )
        .unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn random_cases_match_padding_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (stride, pad, k) in [(1, 0, 3), (1, 1, 3), (2, 1, 4), (1, 2, 5), (2, 0, 1), (2, 1, 2)] {
            let h = if stride == 2 { 6 } else { 5 + pad };
            if conv2d_out_hw(h, k, stride, pad).is_err() {
                continue;
            }
            let x = Tensor::randn(&[2, 3, h, h], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], 0.5, &mut rng);
            let b = Tensor::randn(&[4], 0.5, &mut rng);
            let y = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
            let o = conv_oracle(&x, &w, Some(&b), stride, pad);
            for (a, e) in y.data().iter().zip(o.data()) {
                assert!((a - e).abs() <= 1e-4 * (1.0 + e.abs()), "{a} vs {e}");
            }
        }
    }

    #[test]
    fn backward_matches_scatter_oracle() {
        // Oracle: accumulate dx/dw/db with the naive per-output-pixel triple
        // loop, mirroring the forward definition term by term.
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for (stride, pad, k, h) in [(1usize, 1usize, 3usize, 5usize), (2, 1, 4, 6), (1, 0, 1, 4)] {
            let x = Tensor::randn(&[2, 2, h, h], 1.0, &mut rng);
            let w = Tensor::randn(&[3, 2, k, k], 0.5, &mut rng);
            let oh = conv2d_out_hw(h, k, stride, pad).unwrap();
            let g = Tensor::randn(&[2, 3, oh, oh], 1.0, &mut rng);

            let (dx, dw, db) =
                conv2d_backward(&x, &w, true, true, true, stride, pad, &g).unwrap();
            let (dx, dw, db) = (dx.unwrap(), dw.unwrap(), db.unwrap());

            let mut odx = vec![0.0f64; x.numel()];
            let mut odw = vec![0.0f64; w.numel()];
            let mut odb = vec![0.0f64; 3];
            for ni in 0..2usize {
                for co in 0..3usize {
                    for oy in 0..oh {
                        for ox in 0..oh {
                            let gv = g.data()[((ni * 3 + co) * oh + oy) * oh + ox] as f64;
                            odb[co] += gv;
                            for ci in 0..2usize {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= h as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ni * 2 + ci) * h + iy as usize) * h
                                            + ix as usize;
                                        let wi = ((co * 2 + ci) * k + ky) * k + kx;
                                        odx[xi] += gv * w.data()[wi] as f64;
                                        odw[wi] += gv * x.data()[xi] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let close = |a: &[f32], o: &[f64]| {
                a.iter().zip(o).all(|(&u, &v)| (u as f64 - v).abs() < 1e-3 * (1.0 + v.abs()))
            };
            assert!(close(dx.data(), &odx), "dx mismatch at k={k} s={stride}");
            assert!(close(dw.data(), &odw), "dw mismatch at k={k} s={stride}");
            assert!(close(db.data(), &odb), "db mismatch at k={k} s={stride}");
        }
    }

    #[test]
    fn non_exact_output_size_is_rejected() {
        let x = Tensor::ones(&[1, 1, 5, 5]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::ones(&[1, 2, 4, 4]);
        let w = Tensor::ones(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1),
            Err(Error::Config(_))
        ));
    }
}
