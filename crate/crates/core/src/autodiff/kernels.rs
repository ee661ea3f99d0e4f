//! Raw numeric kernels behind the tape ops.
//!
//! Parallel kernels split work along output rows only, so every f32 sum is
//! evaluated in a fixed sequential order regardless of thread count.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Below this many multiply-adds a parallel dispatch costs more than it buys.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// C = op(A) @ op(B) where `ta`/`tb` transpose the operand logically.
/// A is stored row-major as `[am, ak]`, B as `[bm, bk]`; the logical shapes
/// after transposition must agree on the inner dimension.
pub fn matmul(
    a: &[f32],
    (am, ak): (usize, usize),
    ta: bool,
    b: &[f32],
    (bm, bk): (usize, usize),
    tb: bool,
) -> Result<(Vec<f32>, usize, usize)> {
    let (m, ka) = if ta { (ak, am) } else { (am, ak) };
    let (kb, n) = if tb { (bk, bm) } else { (bm, bk) };
    if ka != kb {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: [{m}x{ka}] @ [{kb}x{n}]"
        )));
    }
    let k = ka;
    let mut out = vec![0.0f32; m * n];
    let parallel = m * n * k >= PAR_FLOP_THRESHOLD;

    let row_job = |i: usize, out_row: &mut [f32]| {
        match (ta, tb) {
            (false, false) => {
                // C[i,:] += A[i,p] * B[p,:]
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    for (o, &bv) in out_row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
            (false, true) => {
                // C[i,j] = dot(A[i,:], B[j,:])
                let arow = &a[i * k..i * k + k];
                for (j, o) in out_row.iter_mut().enumerate() {
                    let brow = &b[j * k..j * k + k];
                    let mut acc = 0.0f32;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *o = acc;
                }
            }
            (true, false) => {
                // C[i,:] += A[p,i] * B[p,:]
                for p in 0..am {
                    let api = a[p * ak + i];
                    if api == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..p * n + n];
                    for (o, &bv) in out_row.iter_mut().zip(brow) {
                        *o += api * bv;
                    }
                }
            }
            (true, true) => {
                // C[i,j] = dot(A[:,i], B[j,:]) with B transposed access
                for (j, o) in out_row.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for p in 0..k {
                        acc += a[p * ak + i] * b[j * bk + p];
                    }
                    *o = acc;
                }
            }
        }
    };

    if parallel {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    Ok((out, m, n))
}

/// Broadcast-compatible output shape (numpy right-aligned rules).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut p = vec![1usize; nd];
    p[nd - shape.len()..].copy_from_slice(shape);
    p
}

/// Row-major strides with broadcast dims (extent 1) zeroed out.
fn broadcast_strides(shape: &[usize], out_nd: usize) -> Vec<usize> {
    let padded = pad_left(shape, out_nd);
    let mut strides = vec![0usize; out_nd];
    let mut s = 1;
    for d in (0..out_nd).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }
    strides
}

/// Elementwise binary op with broadcasting. Fast paths cover the shapes the
/// models actually hit (equal shapes, trailing-suffix bias, column vectors).
pub fn binary_broadcast(
    a: &[f32],
    ash: &[usize],
    b: &[f32],
    bsh: &[usize],
    f: impl Fn(f32, f32) -> f32,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let osh = broadcast_shape(ash, bsh)?;
    let numel: usize = osh.iter().product();
    let mut out = Vec::with_capacity(numel);

    if ash == bsh {
        out.extend(a.iter().zip(b).map(|(&x, &y)| f(x, y)));
        return Ok((out, osh));
    }
    // [.., n] op [n] : broadcast b across leading dims of a
    if bsh.len() == 1 && ash.last() == Some(&bsh[0]) && osh == ash {
        let n = bsh[0];
        for chunk in a.chunks_exact(n) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return Ok((out, osh));
    }
    // [m, n] op [m, 1] : broadcast b across columns
    if ash.len() == 2 && bsh.len() == 2 && bsh[1] == 1 && bsh[0] == ash[0] && osh == ash {
        let n = ash[1];
        for (i, chunk) in a.chunks_exact(n).enumerate() {
            let y = b[i];
            out.extend(chunk.iter().map(|&x| f(x, y)));
        }
        return Ok((out, osh));
    }

    // general strided fallback
    let nd = osh.len();
    let sa = broadcast_strides(ash, nd);
    let sb = broadcast_strides(bsh, nd);
    let mut idx = vec![0usize; nd];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..numel {
        out.push(f(a[ia], b[ib]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < osh[d] {
                break;
            }
            ia -= sa[d] * osh[d];
            ib -= sb[d] * osh[d];
            idx[d] = 0;
        }
    }
    Ok((out, osh))
}

/// Sum-reduces `grad` (of shape `from`) down to `to` by collapsing broadcast
/// dimensions. Used by backward passes of broadcasting binary ops.
pub fn reduce_to_shape(grad: &[f32], from: &[usize], to: &[usize]) -> Vec<f32> {
    if from == to {
        return grad.to_vec();
    }
    let nd = from.len();
    let padded = pad_left(to, nd);
    let to_numel: usize = to.iter().product();
    let mut out = vec![0.0f32; to_numel];

    // strides of the (padded) target within its own layout
    let mut tstr = vec![0usize; nd];
    let mut s = 1;
    for d in (0..nd).rev() {
        tstr[d] = if padded[d] == 1 { 0 } else { s };
        s *= padded[d];
    }

    let mut idx = vec![0usize; nd];
    let mut ti = 0usize;
    for &g in grad {
        out[ti] += g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            ti += tstr[d];
            if idx[d] < from[d] {
                break;
            }
            ti -= tstr[d] * from[d];
            idx[d] = 0;
        }
    }
    out
}

/// Shape split around `axis`: (outer, len, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub fn sum_axis(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &data[(o * len + l) * inner..(o * len + l + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Max along an axis; also returns the flat argmax offsets used to route
/// gradients (first maximum wins on ties).
pub fn max_axis(data: &[f32], shape: &[usize], axis: usize) -> (Vec<f32>, Vec<usize>) {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![f32::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                let src = (o * len + l) * inner + i;
                let dst = o * inner + i;
                if data[src] > out[dst] {
                    out[dst] = data[src];
                    arg[dst] = src;
                }
            }
        }
    }
    (out, arg)
}

/// Exclusive prefix sum along `axis`: out[.., l, ..] = sum of inputs before l.
pub fn cumsum_exclusive(data: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0f32;
            for l in 0..len {
                let p = (o * len + l) * inner + i;
                out[p] = acc;
                acc += data[p];
            }
        }
    }
    out
}

/// Backward of `cumsum_exclusive`: reverse exclusive suffix sum.
pub fn cumsum_exclusive_backward(grad: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0f32; grad.len()];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0f32;
            for l in (0..len).rev() {
                let p = (o * len + l) * inner + i;
                out[p] = acc;
                acc += grad[p];
            }
        }
    }
    out
}

/// Geometry of a 3x3-style convolution lowering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Lowers an `[H, W, C]` map to `[OH*OW, k*k*C]` patch rows (zero padding).
pub fn im2col(data: &[f32], spec: &ConvSpec) -> Vec<f32> {
    let (oh, ow, pl) = (spec.out_height(), spec.out_width(), spec.patch_len());
    let mut out = vec![0.0f32; oh * ow * pl];
    let c = spec.channels;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * pl;
            for ky in 0..spec.kernel {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= spec.height as isize {
                    continue;
                }
                for kx in 0..spec.kernel {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= spec.width as isize {
                        continue;
                    }
                    let src = ((iy as usize) * spec.width + ix as usize) * c;
                    let dst = row + (ky * spec.kernel + kx) * c;
                    out[dst..dst + c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    out
}

/// Scatter-add transpose of [`im2col`]; accumulates patch-row gradients back
/// onto the input map.
pub fn col2im(grad: &[f32], spec: &ConvSpec) -> Vec<f32> {
    let (oh, ow, pl) = (spec.out_height(), spec.out_width(), spec.patch_len());
    let mut out = vec![0.0f32; spec.height * spec.width * spec.channels];
    let c = spec.channels;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * pl;
            for ky in 0..spec.kernel {
                let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                if iy < 0 || iy >= spec.height as isize {
                    continue;
                }
                for kx in 0..spec.kernel {
                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                    if ix < 0 || ix >= spec.width as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * spec.width + ix as usize) * c;
                    let src = row + (ky * spec.kernel + kx) * c;
                    for j in 0..c {
                        out[dst + j] += grad[src + j];
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour upsample of an `[H, W, C]` map by an integer factor.
pub fn upsample_nearest(data: &[f32], h: usize, w: usize, c: usize, factor: usize) -> Vec<f32> {
    let (nh, nw) = (h * factor, w * factor);
    let mut out = vec![0.0f32; nh * nw * c];
    for y in 0..nh {
        for x in 0..nw {
            let src = ((y / factor) * w + x / factor) * c;
            let dst = (y * nw + x) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}

/// Backward of nearest upsample: box-sum each factor x factor block.
pub fn upsample_nearest_backward(
    grad: &[f32],
    h: usize,
    w: usize,
    c: usize,
    factor: usize,
) -> Vec<f32> {
    let nw = w * factor;
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h * factor {
        for x in 0..nw {
            let dst = ((y / factor) * w + x / factor) * c;
            let src = (y * nw + x) * c;
            for j in 0..c {
                out[dst + j] += grad[src + j];
            }
        }
    }
    out
}
