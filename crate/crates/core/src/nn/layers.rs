//! Per-sample layer kernels, generic over the scalar type.
//!
//! Forward kernels write into preallocated output slices; backward kernels
//! accumulate parameter gradients (`+=`) and overwrite input gradients.

use super::arch::{ActivationKind, PoolKind};
use super::Real;

pub fn dense_forward<F: Real>(x: &[F], weight: &[F], bias: &[F], out: &mut [F]) {
    let in_dim = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (w, v) in row.iter().zip(x) {
            acc = acc + *w * *v;
        }
        *y = acc;
    }
}

pub fn dense_backward<F: Real>(
    x: &[F],
    weight: &[F],
    d_out: &[F],
    d_x: &mut [F],
    d_weight: &mut [F],
    d_bias: &mut [F],
) {
    let in_dim = x.len();
    for v in d_x.iter_mut() {
        *v = F::zero();
    }
    for (o, &g) in d_out.iter().enumerate() {
        d_bias[o] += g;
        let row = &weight[o * in_dim..(o + 1) * in_dim];
        let d_row = &mut d_weight[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            d_row[i] += g * x[i];
            d_x[i] += g * row[i];
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn conv_forward<F: Real>(x: &[F], weight: &[F], bias: &[F], d: &ConvDims, out: &mut [F]) {
    let k = d.kernel;
    for oc in 0..d.out_ch {
        let w_base = oc * d.in_ch * k * k;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let mut acc = bias[oc];
                for ic in 0..d.in_ch {
                    let x_base = ic * d.h * d.w;
                    let w_ic = w_base + ic * k * k;
                    for ky in 0..k {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * d.w;
                        let w_row = w_ic + ky * k;
                        for kx in 0..k {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc = acc + weight[w_row + kx] * x[x_row + ix as usize];
                        }
                    }
                }
                out[oc * d.out_h * d.out_w + oy * d.out_w + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<F: Real>(
    x: &[F],
    weight: &[F],
    d_out: &[F],
    d: &ConvDims,
    d_x: &mut [F],
    d_weight: &mut [F],
    d_bias: &mut [F],
) {
    let k = d.kernel;
    for v in d_x.iter_mut() {
        *v = F::zero();
    }
    for oc in 0..d.out_ch {
        let w_base = oc * d.in_ch * k * k;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let g = d_out[oc * d.out_h * d.out_w + oy * d.out_w + ox];
                d_bias[oc] += g;
                for ic in 0..d.in_ch {
                    let x_base = ic * d.h * d.w;
                    let w_ic = w_base + ic * k * k;
                    for ky in 0..k {
                        let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        let x_row = x_base + iy as usize * d.w;
                        let w_row = w_ic + ky * k;
                        for kx in 0..k {
                            let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            d_weight[w_row + kx] += g * x[x_row + ix as usize];
                            d_x[x_row + ix as usize] += g * weight[w_row + kx];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn pool_forward<F: Real>(x: &[F], kind: PoolKind, d: &PoolDims, out: &mut [F]) {
    let inv = F::from_f64(1.0 / (d.kernel * d.kernel) as f64);
    for c in 0..d.channels {
        let x_base = c * d.h * d.w;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let mut acc = match kind {
                    PoolKind::Avg => F::zero(),
                    PoolKind::Max => F::neg_infinity(),
                };
                for ky in 0..d.kernel {
                    let row = x_base + (oy * d.stride + ky) * d.w + ox * d.stride;
                    for kx in 0..d.kernel {
                        let v = x[row + kx];
                        acc = match kind {
                            PoolKind::Avg => acc + v,
                            PoolKind::Max => acc.max(v),
                        };
                    }
                }
                let y = match kind {
                    PoolKind::Avg => acc * inv,
                    PoolKind::Max => acc,
                };
                out[c * d.out_h * d.out_w + oy * d.out_w + ox] = y;
            }
        }
    }
}

pub fn pool_backward<F: Real>(x: &[F], kind: PoolKind, d: &PoolDims, d_out: &[F], d_x: &mut [F]) {
    let inv = F::from_f64(1.0 / (d.kernel * d.kernel) as f64);
    for v in d_x.iter_mut() {
        *v = F::zero();
    }
    for c in 0..d.channels {
        let x_base = c * d.h * d.w;
        for oy in 0..d.out_h {
            for ox in 0..d.out_w {
                let g = d_out[c * d.out_h * d.out_w + oy * d.out_w + ox];
                match kind {
                    PoolKind::Avg => {
                        let spread = g * inv;
                        for ky in 0..d.kernel {
                            let row = x_base + (oy * d.stride + ky) * d.w + ox * d.stride;
                            for kx in 0..d.kernel {
                                d_x[row + kx] += spread;
                            }
                        }
                    }
                    PoolKind::Max => {
                        // First maximum in scan order receives the gradient,
                        // matching the forward's deterministic tie rule.
                        let mut best = F::neg_infinity();
                        let mut best_idx = x_base + oy * d.stride * d.w + ox * d.stride;
                        for ky in 0..d.kernel {
                            let row = x_base + (oy * d.stride + ky) * d.w + ox * d.stride;
                            for kx in 0..d.kernel {
                                if x[row + kx] > best {
                                    best = x[row + kx];
                                    best_idx = row + kx;
                                }
                            }
                        }
                        d_x[best_idx] += g;
                    }
                }
            }
        }
    }
}

pub fn activation_forward<F: Real>(x: &[F], kind: ActivationKind, out: &mut [F]) {
    match kind {
        ActivationKind::Relu => {
            for (y, &v) in out.iter_mut().zip(x) {
                *y = if v > F::zero() { v } else { F::zero() };
            }
        }
        ActivationKind::Tanh => {
            for (y, &v) in out.iter_mut().zip(x) {
                *y = v.tanh();
            }
        }
        ActivationKind::Identity => out.copy_from_slice(x),
    }
}

/// Gradients are derived from the layer *output*, which is available in the
/// forward trace (for relu the output sign carries the needed information,
/// for tanh `1 - y^2`).
pub fn activation_backward<F: Real>(y: &[F], kind: ActivationKind, d_out: &[F], d_x: &mut [F]) {
    match kind {
        ActivationKind::Relu => {
            for i in 0..y.len() {
                d_x[i] = if y[i] > F::zero() { d_out[i] } else { F::zero() };
            }
        }
        ActivationKind::Tanh => {
            for i in 0..y.len() {
                d_x[i] = d_out[i] * (F::one() - y[i] * y[i]);
            }
        }
        ActivationKind::Identity => d_x.copy_from_slice(d_out),
    }
}
