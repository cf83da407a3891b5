//! Nearest-neighbor upsampling and adaptive average pooling kernels.

use crate::error::{Error, Result};

use super::Tensor;

/// Each pixel replicated into a factor x factor block.
pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor < 1 {
        return Err(Error::config("upsample_nearest: factor must be >= 1".to_string()));
    }
    let (n, c, h, w) = x.dims4()?;
    let (fh, fw) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * fh * fw];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * fh * fw;
        for y in 0..fh {
            let sy = y / factor;
            let src_row = src + sy * w;
            let dst_row = dst + y * fw;
            for xx in 0..fw {
                out[dst_row + xx] = xd[src_row + xx / factor];
            }
        }
    }
    Tensor::new(vec![n, c, fh, fw], out)
}

/// Backward of upsample: sum the gradient over each replicated block.
pub fn upsample_nearest_backward(grad: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, fh, fw) = grad.dims4()?;
    let (h, w) = (fh / factor, fw / factor);
    let gd = grad.data();
    let mut dx = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let src = nc * fh * fw;
        let dst = nc * h * w;
        for y in 0..fh {
            let row = src + y * fw;
            let drow = dst + (y / factor) * w;
            for xx in 0..fw {
                dx[drow + xx / factor] += gd[row + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Window covered by output cell `i` along an axis of length `len` pooled
/// down to `out_len` cells: [start, end).
pub fn pool_window(i: usize, len: usize, out_len: usize) -> (usize, usize) {
    let start = i * len / out_len;
    let end = ((i + 1) * len).div_ceil(out_len);
    (start, end)
}

/// Mean over contiguous, near-equal windows; exact partition when the input
/// size is divisible by the output size. Window means are accumulated in f64
/// so pooling an upsampled map back down reproduces the original bitwise.
pub fn adaptive_avg_pool_forward(x: &Tensor, out_hw: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_hw == 0 || out_hw > h || out_hw > w {
        return Err(Error::config(format!(
            "adaptive_avg_pool: out_hw {out_hw} invalid for input {h}x{w}"
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * out_hw * out_hw];
    for nc in 0..n * c {
        let src = nc * h * w;
        let dst = nc * out_hw * out_hw;
        for oy in 0..out_hw {
            let (y0, y1) = pool_window(oy, h, out_hw);
            for ox in 0..out_hw {
                let (x0, x1) = pool_window(ox, w, out_hw);
                let mut acc = 0.0f64;
                for y in y0..y1 {
                    let row = src + y * w;
                    for xx in x0..x1 {
                        acc += xd[row + xx] as f64;
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                out[dst + oy * out_hw + ox] = (acc / count) as f32;
            }
        }
    }
    Tensor::new(vec![n, c, out_hw, out_hw], out)
}

/// Backward of adaptive pooling: spread each output gradient uniformly over
/// its window.
pub fn adaptive_avg_pool_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, out_hw, _) = grad.dims4()?;
    let gd = grad.data();
    let mut dx = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let src = nc * out_hw * out_hw;
        let dst = nc * h * w;
        for oy in 0..out_hw {
            let (y0, y1) = pool_window(oy, h, out_hw);
            for ox in 0..out_hw {
                let (x0, x1) = pool_window(ox, w, out_hw);
                let count = ((y1 - y0) * (x1 - x0)) as f32;
                let g = gd[src + oy * out_hw + ox] / count;
                for y in y0..y1 {
                    let row = dst + y * w;
                    for xx in x0..x1 {
                        dx[row + xx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}
