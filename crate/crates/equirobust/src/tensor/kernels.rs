//! Value-level numeric kernels shared by the tape ops and by plain
//! (non-differentiated) callers such as the corruption pipeline.
//!
//! Every kernel computes each output element with a fixed summation order,
//! independent of worker count, so results are bit-identical under any
//! rayon thread pool.

use super::Tensor;
use rayon::prelude::*;

pub fn conv_out_dim(input: usize, kernel: usize, pad: usize) -> usize {
    input + 2 * pad - kernel + 1
}

/// 2-D cross-correlation, NCHW x KCkk -> NKH'W', stride 1, zero padding.
pub fn conv2d_value(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (k, cw, kh, kw) = dims4(w);
    debug_assert_eq!(c, cw);
    let oh = conv_out_dim(h, kh, pad);
    let ow = conv_out_dim(wd, kw, pad);
    let xd = x.data();
    let wdta = w.data();
    let mut out = vec![0.0; n * k * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(nk, plane)| {
            let ni = nk / k;
            let ki = nk % k;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let xbase = (ni * c + ci) * h * wd;
                        let wbase = ((ki * c + ci) * kh) * kw;
                        for u in 0..kh {
                            let yy = i + u;
                            if yy < pad || yy - pad >= h {
                                continue;
                            }
                            let row = xbase + (yy - pad) * wd;
                            let wrow = wbase + u * kw;
                            for v in 0..kw {
                                let xx = j + v;
                                if xx < pad || xx - pad >= wd {
                                    continue;
                                }
                                acc += xd[row + (xx - pad)] * wdta[wrow + v];
                            }
                        }
                    }
                    plane[i * ow + j] = acc;
                }
            }
        });
    Tensor::new(vec![n, k, oh, ow], out).unwrap()
}

/// Gradient of conv2d w.r.t. the input.
pub fn conv2d_bwd_input(dy: &Tensor, w: &Tensor, x_shape: &[usize], pad: usize) -> Tensor {
    let (n, c, h, wd) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (k, _, kh, kw) = dims4(w);
    let (_, _, oh, ow) = dims4(dy);
    let dyd = dy.data();
    let wdta = w.data();
    let mut dx = vec![0.0; n * c * h * wd];
    dx.par_chunks_mut(h * wd).enumerate().for_each(|(nc, plane)| {
        let ni = nc / c;
        let ci = nc % c;
        for a in 0..h {
            for b in 0..wd {
                let mut acc = 0.0;
                for ki in 0..k {
                    let dybase = (ni * k + ki) * oh * ow;
                    let wbase = (ki * c + ci) * kh * kw;
                    for u in 0..kh {
                        let i = a + pad;
                        if i < u || i - u >= oh {
                            continue;
                        }
                        let dyrow = dybase + (i - u) * ow;
                        let wrow = wbase + u * kw;
                        for v in 0..kw {
                            let j = b + pad;
                            if j < v || j - v >= ow {
                                continue;
                            }
                            acc += dyd[dyrow + (j - v)] * wdta[wrow + v];
                        }
                    }
                }
                plane[a * wd + b] = acc;
            }
        }
    });
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

/// Gradient of conv2d w.r.t. the filters.
pub fn conv2d_bwd_filter(dy: &Tensor, x: &Tensor, w_shape: &[usize], pad: usize) -> Tensor {
    let (n, c, h, wd) = dims4(x);
    let (k, _, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (_, _, oh, ow) = dims4(dy);
    let dyd = dy.data();
    let xd = x.data();
    let mut dw = vec![0.0; k * c * kh * kw];
    dw.par_chunks_mut(c * kh * kw)
        .enumerate()
        .for_each(|(ki, chunk)| {
            for ci in 0..c {
                for u in 0..kh {
                    for v in 0..kw {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            let dybase = (ni * k + ki) * oh * ow;
                            let xbase = (ni * c + ci) * h * wd;
                            for i in 0..oh {
                                let yy = i + u;
                                if yy < pad || yy - pad >= h {
                                    continue;
                                }
                                let xrow = xbase + (yy - pad) * wd;
                                let dyrow = dybase + i * ow;
                                for j in 0..ow {
                                    let xx = j + v;
                                    if xx < pad || xx - pad >= wd {
                                        continue;
                                    }
                                    acc += dyd[dyrow + j] * xd[xrow + (xx - pad)];
                                }
                            }
                        }
                        chunk[(ci * kh + u) * kw + v] = acc;
                    }
                }
            }
        });
    Tensor::new(w_shape.to_vec(), dw).unwrap()
}

/// 2x2 max pooling with stride 2. Returns (output, argmax flat input indices).
pub fn maxpool2_value(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = dims4(x);
    let oh = h / 2;
    let ow = w / 2;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut bidx = 0;
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > best {
                            best = xd[idx];
                            bidx = idx;
                        }
                    }
                }
                let o = nc * oh * ow + i * ow + j;
                out[o] = best;
                arg[o] = bidx;
            }
        }
    }
    (Tensor::new(vec![n, c, oh, ow], out).unwrap(), arg)
}

/// Rotate the last two axes counterclockwise by `k` quarter turns.
pub fn rot90_value(x: &Tensor, k: usize) -> Tensor {
    let k = k % 4;
    if k == 0 {
        return x.clone();
    }
    let rank = x.rank();
    debug_assert!(rank >= 2);
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    let planes = x.numel() / (h * w);
    let (oh, ow) = if k % 2 == 0 { (h, w) } else { (w, h) };
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    for p in 0..planes {
        let src = p * h * w;
        let dst = p * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                // counterclockwise: out[i][j] = in[j][W-1-i] for k=1
                let v = match k {
                    1 => xd[src + j * w + (w - 1 - i)],
                    2 => xd[src + (h - 1 - i) * w + (w - 1 - j)],
                    _ => xd[src + (h - 1 - j) * w + i],
                };
                out[dst + i * ow + j] = v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::new(shape, out).unwrap()
}

/// Cyclically shift the orientation sub-axis of a (.., K*4, ..) channel axis.
/// Channels are grouped orientation-minor: channel = f*4 + s.
/// out[f, s] = in[f, (s - shift) mod 4].
pub fn roll_p4_value(x: &Tensor, axis: usize, shift: usize) -> Tensor {
    let shape = x.shape();
    let ch = shape[axis];
    debug_assert_eq!(ch % 4, 0);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let shift = shift % 4;
    for o in 0..outer {
        for f in 0..ch / 4 {
            for s in 0..4 {
                let src_s = (s + 4 - shift) % 4;
                let src = (o * ch + f * 4 + src_s) * inner;
                let dst = (o * ch + f * 4 + s) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).unwrap()
}

/// Interleave four (N,K,H,W) orientation slices into (N, K*4, H, W),
/// channel = f*4 + r.
pub fn stack_orient_value(parts: &[&Tensor]) -> Tensor {
    debug_assert_eq!(parts.len(), 4);
    let (n, k, h, w) = dims4(parts[0]);
    let inner = h * w;
    let mut out = vec![0.0; n * k * 4 * inner];
    for (r, part) in parts.iter().enumerate() {
        let pd = part.data();
        for ni in 0..n {
            for f in 0..k {
                let src = (ni * k + f) * inner;
                let dst = (ni * k * 4 + f * 4 + r) * inner;
                out[dst..dst + inner].copy_from_slice(&pd[src..src + inner]);
            }
        }
    }
    Tensor::new(vec![n, k * 4, h, w], out).unwrap()
}

/// Inverse of `stack_orient_value`: extract orientation slice r.
pub fn unstack_orient_value(x: &Tensor, r: usize) -> Tensor {
    let (n, c4, h, w) = dims4(x);
    let k = c4 / 4;
    let inner = h * w;
    let xd = x.data();
    let mut out = vec![0.0; n * k * inner];
    for ni in 0..n {
        for f in 0..k {
            let src = (ni * k * 4 + f * 4 + r) * inner;
            let dst = (ni * k + f) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::new(vec![n, k, h, w], out).unwrap()
}

/// Bilinear resize with half-pixel centers, clamped at borders.
pub fn resize_bilinear_value(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    if oh == h && ow == w {
        return x.clone();
    }
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for i in 0..oh {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for j in 0..ow {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = (1.0 - wy) * (1.0 - wx) * xd[base + y0 * w + x0]
                    + (1.0 - wy) * wx * xd[base + y0 * w + x1]
                    + wy * (1.0 - wx) * xd[base + y1 * w + x0]
                    + wy * wx * xd[base + y1 * w + x1];
                out[obase + i * ow + j] = v;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Transpose of `resize_bilinear_value`: scatter output gradients back.
pub fn resize_bilinear_bwd(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = dims4(dy);
    if oh == h && ow == w {
        return dy.clone();
    }
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for i in 0..oh {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for j in 0..ow {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let g = dyd[obase + i * ow + j];
                dx[base + y0 * w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dx[base + y0 * w + x1] += (1.0 - wy) * wx * g;
                dx[base + y1 * w + x0] += wy * (1.0 - wx) * g;
                dx[base + y1 * w + x1] += wy * wx * g;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx).unwrap()
}

/// Nearest-neighbour resize with half-pixel centers.
pub fn resize_nearest_value(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = dims4(x);
    if oh == h && ow == w {
        return x.clone();
    }
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for i in 0..oh {
            let y = (((i as f64 + 0.5) * sy).floor() as usize).min(h - 1);
            for j in 0..ow {
                let x0 = (((j as f64 + 0.5) * sx).floor() as usize).min(w - 1);
                out[obase + i * ow + j] = xd[base + y * w + x0];
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn nearest_src_index(i: usize, out_len: usize, in_len: usize) -> usize {
    let s = in_len as f64 / out_len as f64;
    (((i as f64 + 0.5) * s).floor() as usize).min(in_len - 1)
}

/// Spatial padding of the last two axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

pub fn pad2d_value(x: &Tensor, p: usize, mode: PadMode) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let oh = h + 2 * p;
    let ow = w + 2 * p;
    let xd = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i.clamp(0, len - 1) as usize
    };
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let yi = i as isize - p as isize;
                let xi = j as isize - p as isize;
                let v = match mode {
                    PadMode::Zero => {
                        if yi < 0 || yi >= h as isize || xi < 0 || xi >= w as isize {
                            0.0
                        } else {
                            xd[base + yi as usize * w + xi as usize]
                        }
                    }
                    PadMode::Reflect => xd[base + reflect(yi, h) * w + reflect(xi, w)],
                };
                out[obase + i * ow + j] = v;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

pub fn pad2d_bwd(dy: &Tensor, h: usize, w: usize, p: usize, mode: PadMode) -> Tensor {
    let (n, c, oh, ow) = dims4(dy);
    let dyd = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i.clamp(0, len - 1) as usize
    };
    for nc in 0..n * c {
        let base = nc * h * w;
        let obase = nc * oh * ow;
        for i in 0..oh {
            for j in 0..ow {
                let yi = i as isize - p as isize;
                let xi = j as isize - p as isize;
                let g = dyd[obase + i * ow + j];
                match mode {
                    PadMode::Zero => {
                        if yi >= 0 && yi < h as isize && xi >= 0 && xi < w as isize {
                            dx[base + yi as usize * w + xi as usize] += g;
                        }
                    }
                    PadMode::Reflect => {
                        dx[base + reflect(yi, h) * w + reflect(xi, w)] += g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx).unwrap()
}

/// Continuous rotation of an image about its center, bilinear sampling with
/// border clamping. Used only to approximate the orbit tangent direction;
/// never part of the differentiated graph.
pub fn rotate_bilinear_value(x: &Tensor, angle_rad: f64) -> Tensor {
    let (n, c, h, w) = dims4(x);
    let xd = x.data();
    let mut out = vec![0.0; x.numel()];
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w {
                // inverse-map output pixel to source coordinates
                let dy = i as f64 - cy;
                let dx = j as f64 - cx;
                let sy = (cos * dy + sin * dx + cy).clamp(0.0, (h - 1) as f64);
                let sx = (-sin * dy + cos * dx + cx).clamp(0.0, (w - 1) as f64);
                let y0 = sy.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fy = sy - y0 as f64;
                let fx = sx - x0 as f64;
                out[base + i * w + j] = (1.0 - fy) * (1.0 - fx) * xd[base + y0 * w + x0]
                    + (1.0 - fy) * fx * xd[base + y0 * w + x1]
                    + fy * (1.0 - fx) * xd[base + y1 * w + x0]
                    + fy * fx * xd[base + y1 * w + x1];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}
