//! Forward and backward passes of the building blocks: zero-padded stride-1
//! convolution, ReLU, 2x2 max-pooling and nearest-neighbour upsampling.
//!
//! Every reduction runs in a fixed order on one thread, so results are
//! bit-identical regardless of how rayon schedules the outer loops.

use rayon::prelude::*;

use super::tensor::{Real, Tensor3};

// Below this many output pixels per plane the rayon overhead dominates.
const PAR_MIN_PIXELS: usize = 1024;

fn for_each_plane<T: Real>(data: &mut [T], plane: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if plane >= PAR_MIN_PIXELS {
        data.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        data.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Valid output range along one axis for kernel offset `d`.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

// Planes up to this size use the im2col path; loop overhead dominates the
// row-sweeping path there.
const IM2COL_MAX_PIXELS: usize = 4096;

/// Dot product with eight interleaved accumulators, combined in a fixed
/// order. Lets the compiler vectorize without changing results run to run.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Rows of `cin*k*k` input taps per output pixel, zero where padded.
fn im2col<T: Real>(input: &Tensor3<T>, k: usize) -> Vec<T> {
    let (cin, h, w) = (input.c, input.h, input.w);
    let pad = (k / 2) as isize;
    let row = cin * k * k;
    let mut col = vec![T::zero(); h * w * row];
    for y in 0..h {
        for x in 0..w {
            let dst = &mut col[(y * w + x) * row..(y * w + x + 1) * row];
            for ci in 0..cin {
                let inp = input.plane(ci);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[(ci * k + ky) * k + kx] = inp[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// `weight` is `[cout][cin][k][k]`, `bias` is `[cout]`.
pub fn conv2d<T: Real>(input: &Tensor3<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor3<T> {
    let (cin, h, w) = (input.c, input.h, input.w);
    assert_eq!(weight.len(), cout * cin * k * k, "conv weight shape");
    assert_eq!(bias.len(), cout, "conv bias shape");
    let pad = (k / 2) as isize;
    let mut out = Tensor3::zeros(cout, h, w);
    let n = h * w;
    if n <= IM2COL_MAX_PIXELS {
        let row = cin * k * k;
        let col = im2col(input, k);
        for_each_plane(&mut out.data, n, |o, plane| {
            let wr = &weight[o * row..(o + 1) * row];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = bias[o] + dot(wr, &col[p * row..(p + 1) * row]);
            }
        });
        return out;
    }
    for_each_plane(&mut out.data, n, |o, plane| {
        plane.fill(bias[o]);
        for ci in 0..cin {
            let inp = input.plane(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wv = weight[((o * cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * w + x0..y * w + x1];
                        let start = (iy * w) as isize + x0 as isize + dx;
                        let irow = &inp[start as usize..start as usize + (x1 - x0)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Accumulates weight and bias gradients into `grad_w`/`grad_b` and returns
/// the gradient w.r.t. the input when `want_input` is set.
pub fn conv2d_backward<T: Real>(
    input: &Tensor3<T>,
    weight: &[T],
    grad_out: &Tensor3<T>,
    k: usize,
    grad_w: &mut [T],
    grad_b: &mut [T],
    want_input: bool,
) -> Option<Tensor3<T>> {
    let (cin, h, w) = (input.c, input.h, input.w);
    let cout = grad_out.c;
    let pad = (k / 2) as isize;
    let n = h * w;

    for (o, gb) in grad_b.iter_mut().enumerate() {
        let s: T = grad_out.plane(o).iter().copied().sum();
        *gb += s;
    }

    let per_out = cin * k * k;
    let fill_w = |o: usize, gw: &mut [T]| {
        let g = grad_out.plane(o);
        for ci in 0..cin {
            let inp = input.plane(ci);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let start = ((iy * w) as isize + x0 as isize + dx) as usize;
                        acc += dot(grow, &inp[start..start + (x1 - x0)]);
                    }
                    gw[(ci * k + ky) * k + kx] += acc;
                }
            }
        }
    };
    if n >= PAR_MIN_PIXELS {
        grad_w.par_chunks_mut(per_out).enumerate().for_each(|(o, gw)| fill_w(o, gw));
    } else {
        grad_w.chunks_mut(per_out).enumerate().for_each(|(o, gw)| fill_w(o, gw));
    }

    if !want_input {
        return None;
    }
    let mut grad_in = Tensor3::zeros(cin, h, w);
    for_each_plane(&mut grad_in.data, n, |ci, plane| {
        for o in 0..cout {
            let g = grad_out.plane(o);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wv = weight[((o * cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let start = ((iy * w) as isize + x0 as isize + dx) as usize;
                        let irow = &mut plane[start..start + (x1 - x0)];
                        for (i, &gv) in irow.iter_mut().zip(grow) {
                            *i += wv * gv;
                        }
                    }
                }
            }
        }
    });
    Some(grad_in)
}

pub fn relu_inplace<T: Real>(t: &mut Tensor3<T>) {
    for v in &mut t.data {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward<T: Real>(output: &Tensor3<T>, grad: &mut Tensor3<T>) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if !(*o > T::zero()) {
            *g = T::zero();
        }
    }
}

/// Applies a ReLU gate recorded from another pass.
pub fn gate_like<T: Real>(t: &mut Tensor3<T>, pattern: &Tensor3<T>) {
    relu_backward(pattern, t);
}

/// 2x2 max-pool, stride 2. Returns the pooled tensor and, for each output
/// cell, the flat input index of its maximum (first one in row-major order
/// on ties).
pub fn maxpool2<T: Real>(input: &Tensor3<T>) -> (Tensor3<T>, Vec<u32>) {
    let (c, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor3::zeros(c, oh, ow);
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    if input.data[i] > input.data[best] {
                        best = i;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data[o] = input.data[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

/// Pools with switches recorded from another pass.
pub fn pool_like<T: Real>(input: &Tensor3<T>, switches: &[u32]) -> Tensor3<T> {
    let mut out = Tensor3::zeros(input.c, input.h / 2, input.w / 2);
    for (o, &i) in out.data.iter_mut().zip(switches) {
        *o = input.data[i as usize];
    }
    out
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor3<T>, switches: &[u32], c: usize, h: usize, w: usize) -> Tensor3<T> {
    let mut g = Tensor3::zeros(c, h, w);
    for (gv, &i) in grad_out.data.iter().zip(switches) {
        g.data[i as usize] += *gv;
    }
    g
}

pub fn upsample2<T: Real>(input: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = (input.c, input.h, input.w);
    let mut out = Tensor3::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out.data[(ch * 2 * h + y) * 2 * w + x] = input.data[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Sums each 2x2 block of the upsampled gradient.
pub fn upsample2_backward<T: Real>(grad_out: &Tensor3<T>) -> Tensor3<T> {
    let (c, h, w) = (grad_out.c, grad_out.h / 2, grad_out.w / 2);
    let mut g = Tensor3::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..2 * h {
            for x in 0..2 * w {
                g.data[(ch * h + y / 2) * w + x / 2] += grad_out.data[(ch * 2 * h + y) * 2 * w + x];
            }
        }
    }
    g
}

pub fn add_assign<T: Real>(a: &mut Tensor3<T>, b: &Tensor3<T>) {
    assert_eq!(a.data.len(), b.data.len());
    for (x, y) in a.data.iter_mut().zip(&b.data) {
        *x += *y;
    }
}
