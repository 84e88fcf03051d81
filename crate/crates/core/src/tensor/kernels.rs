//! Raw numeric kernels over row-major `f64` buffers.
//!
//! Nothing here knows about the tape. Every kernel sums in a fixed order so
//! sequential and parallel builds produce identical bits.

use crate::exec::for_each_chunk_mut;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes (right aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Whether `src` broadcasts to `out` without `out` growing.
pub(crate) fn broadcasts_to(src: &[usize], out: &[usize]) -> bool {
    matches!(broadcast_shape(src, out), Some(s) if s == out)
}

/// Source offset for every element of `out` when `src` is broadcast into it.
fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

pub(crate) fn zip_broadcast(
    a: &[f64],
    ashape: &[usize],
    b: &[f64],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 && ashape == out {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    if a.len() == 1 && bshape == out {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let ao = broadcast_offsets(ashape, out);
    let bo = broadcast_offsets(bshape, out);
    ao.iter().zip(&bo).map(|(&i, &j)| f(a[i], b[j])).collect()
}

pub(crate) fn broadcast_to(data: &[f64], shape: &[usize], out: &[usize]) -> Vec<f64> {
    if shape == out {
        return data.to_vec();
    }
    if data.len() == 1 {
        return vec![data[0]; numel(out)];
    }
    broadcast_offsets(shape, out).into_iter().map(|i| data[i]).collect()
}

/// Adjoint of [`broadcast_to`]: sums `data` (shape `shape`) down to `target`.
pub(crate) fn sum_to(data: &[f64], shape: &[usize], target: &[usize]) -> Vec<f64> {
    if shape == target {
        return data.to_vec();
    }
    let mut out = vec![0.0; numel(target)];
    if out.len() == 1 {
        out[0] = data.iter().sum();
        return out;
    }
    for (v, o) in data.iter().zip(broadcast_offsets(target, shape)) {
        out[o] += v;
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution `x[n,c,h,w] * k[o,c,kh,kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit in the padded input.
    pub fn new(
        (n, c, h, w): (usize, usize, usize, usize),
        (o, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad || kh == 0 || kw == 0 {
            return None;
        }
        Some(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Range of output coordinates whose tap `k` lands inside an input of extent `len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        // input index = o * stride + k - pad, must lie in [0, len)
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let plane = g.oh * g.ow;
    let ksz = g.c * g.kh * g.kw;
    for_each_chunk_mut(&mut out, plane, |idx, dst| {
        let (ni, oi) = (idx / g.o, idx % g.o);
        for ci in 0..g.c {
            let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (y0, y1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let (x0, x1) = g.valid(kx, g.w, g.ow);
                    let wv = k[oi * ksz + (ci * g.kh + ky) * g.kw + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[iy * g.w..];
                        let drow = &mut dst[oy * g.ow..];
                        for ox in x0..x1 {
                            drow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `conv2d` in its input: scatters `gy[n,o,oh,ow]` back through `k`.
pub(crate) fn conv2d_input_grad(gy: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    let per_image = g.c * g.h * g.w;
    let ksz = g.c * g.kh * g.kw;
    for_each_chunk_mut(&mut out, per_image, |ni, dst| {
        for oi in 0..g.o {
            let src = &gy[(ni * g.o + oi) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c {
                let dplane = &mut dst[ci * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        let wv = k[oi * ksz + (ci * g.kh + ky) * g.kw + kx];
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let srow = &src[oy * g.ow..];
                            let drow = &mut dplane[iy * g.w..];
                            for ox in x0..x1 {
                                drow[ox * g.stride + kx - g.pad] += wv * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of `conv2d` in its kernel: correlates `x` with `gy`.
pub(crate) fn conv2d_weight_grad(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ksz = g.c * g.kh * g.kw;
    let mut out = vec![0.0; g.o * ksz];
    for_each_chunk_mut(&mut out, ksz, |oi, dst| {
        for ni in 0..g.n {
            let gplane = &gy[(ni * g.o + oi) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.c {
                let src = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (y0, y1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (x0, x1) = g.valid(kx, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let srow = &src[iy * g.w..];
                            let grow = &gplane[oy * g.ow..];
                            for ox in x0..x1 {
                                acc += srow[ox * g.stride + kx - g.pad] * grow[ox];
                            }
                        }
                        dst[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    out
}

/// Max pooling without padding. Returns the pooled values and, for each
/// output, the flat input index of its maximum (first maximum in
/// row-major window order, i.e. the lowest linear index).
pub(crate) fn max_pool2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg, oh, ow)
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s += *d;
        }
        dst.iter_mut().for_each(|d| *d /= s);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + src.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v - lse;
        }
    }
    out
}

pub(crate) fn pad2d(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), p: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; n * c * ph * pw];
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x[(plane * h + y) * w..][..w];
            out[(plane * ph + y + p) * pw + p..][..w].copy_from_slice(src);
        }
    }
    out
}

pub(crate) fn crop2d(x: &[f64], (n, c, h, w): (usize, usize, usize, usize), p: usize) -> Vec<f64> {
    let (ch, cw) = (h - 2 * p, w - 2 * p);
    let mut out = Vec::with_capacity(n * c * ch * cw);
    for plane in 0..n * c {
        for y in 0..ch {
            out.extend_from_slice(&x[(plane * h + y + p) * w + p..][..cw]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 5], &[3, 1]), Some(vec![4, 3, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn sum_to_is_adjoint_of_broadcast() {
        let src = [1.0, 2.0, 3.0];
        let b = broadcast_to(&src, &[1, 3], &[2, 3]);
        assert_eq!(b, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = sum_to(&b, &[2, 3], &[1, 3]);
        assert_eq!(s, vec![2.0, 4.0, 6.0]);
        let col = sum_to(&b, &[2, 3], &[2, 1]);
        assert_eq!(col, vec![6.0, 6.0]);
    }

    #[test]
    fn conv_all_ones() {
        let g = ConvGeom::new((1, 1, 3, 3), (1, 2, 2), 1, 0).unwrap();
        let out = conv2d(&[1.0; 9], &[1.0; 4], &g);
        assert_eq!(out, vec![4.0; 4]);
    }

    #[test]
    fn conv_direct_sum_with_padding_and_stride() {
        // direct-summation oracle
        let (h, w, kh, kw, s, p) = (5, 4, 3, 2, 2, 1);
        let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let k: Vec<f64> = (0..kh * kw).map(|i| (i as f64 * 1.3).cos()).collect();
        let g = ConvGeom::new((1, 1, h, w), (1, kh, kw), s, p).unwrap();
        let got = conv2d(&x, &k, &g);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[iy as usize * w + ix as usize] * k[ky * kw + kx];
                        }
                    }
                }
                assert!((got[oy * g.ow + ox] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_are_consistent() {
        // <conv(x,k), gy> == <x, input_grad(gy,k)> == <k, weight_grad(x,gy)>
        let g = ConvGeom::new((2, 3, 6, 5), (4, 3, 3), 2, 1).unwrap();
        let f = |n: usize, s: f64| (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<_>>();
        let x = f(g.n * g.c * g.h * g.w, 0.7);
        let k = f(g.o * g.c * g.kh * g.kw, 1.1);
        let gy = f(g.n * g.o * g.oh * g.ow, 0.3);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let y = conv2d(&x, &k, &g);
        let lhs = dot(&y, &gy);
        assert!((lhs - dot(&x, &conv2d_input_grad(&gy, &k, &g))).abs() < 1e-10);
        assert!((lhs - dot(&k, &conv2d_weight_grad(&x, &gy, &g))).abs() < 1e-10);
    }

    #[test]
    fn max_pool_ties_pick_lowest_index() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (out, arg, oh, ow) = max_pool2d(&x, (1, 1, 2, 2), 2, 2);
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let p = pad2d(&x, (1, 2, 2, 3), 1);
        assert_eq!(p.len(), 2 * 4 * 5);
        assert_eq!(crop2d(&p, (1, 2, 4, 5), 1), x);
    }
}
