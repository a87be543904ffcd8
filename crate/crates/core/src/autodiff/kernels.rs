//! Raw slice kernels shared by the tape's forward and backward passes.
//!
//! All matrix kernels accumulate into `out` so callers can sum contributions
//! across a batch; zero the buffer first for a plain product.

use super::tensor::Element;

/// out(m,n) += a(m,k) @ b(k,n)
pub fn mm_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out(m,n) += aᵀ @ b where a is stored (k,m) and b is (k,n)
pub fn mm_at_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out(m,n) += a @ bᵀ where a is (m,k) and b is stored (n,k)
pub fn mm_bt_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out[i * n + j] += acc;
        }
    }
}

/// Output spatial size for a convolution / pooling dimension.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image (c,h,w) into a (c*kh*kw, ho*wo) patch matrix.
/// Row (ci, ki, kj) and column (oi, oj) hold input[ci, oi*stride+ki-pad, oj*stride+kj-pad],
/// zero where the position falls in padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    let mut row = 0;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[dst_base + oi * wo..dst_base + (oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter a (c*kh*kw, ho*wo) patch-gradient matrix back onto the image,
/// accumulating overlapping contributions.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    grad_input: &mut [T],
) {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * ho * wo);
    debug_assert_eq!(grad_input.len(), c * h * w);
    let mut row = 0;
    for ci in 0..c {
        let plane = &mut grad_input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src_base = row * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &cols[src_base + oi * wo..src_base + (oi + 1) * wo];
                    let dst_row = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            dst_row[jj as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Broadcast result shape under trailing-dimension alignment, or None when
/// the shapes are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Per-output-dimension element strides into a (possibly broadcast) input.
/// Broadcast and left-padded dimensions get stride 0.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = super::tensor::contiguous_strides(shape);
    let mut strides = vec![0; rank];
    for d in 0..shape.len() {
        let od = rank - shape.len() + d;
        strides[od] = if shape[d] == 1 && out_shape[od] != 1 {
            0
        } else {
            in_strides[d]
        };
    }
    strides
}

/// Visit every index tuple of `shape` in row-major order. The callback gets
/// the linear output position and a mapped position advanced by `strides`
/// (entries may be 0 to pin a broadcast/reduced dimension).
pub fn walk_mapped(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = shape.iter().product();
    if shape.is_empty() {
        f(0, 0);
        return;
    }
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut mapped = 0usize;
    for linear in 0..numel {
        f(linear, mapped);
        for d in (0..rank).rev() {
            counters[d] += 1;
            mapped += strides[d];
            if counters[d] < shape[d] {
                break;
            }
            mapped -= strides[d] * shape[d];
            counters[d] = 0;
        }
    }
}

/// Like [`walk_mapped`] with two mapped positions.
pub fn walk_mapped2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = shape.iter().product();
    if shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut ma = 0usize;
    let mut mb = 0usize;
    for linear in 0..numel {
        f(linear, ma, mb);
        for d in (0..rank).rev() {
            counters[d] += 1;
            ma += sa[d];
            mb += sb[d];
            if counters[d] < shape[d] {
                break;
            }
            ma -= sa[d] * shape[d];
            mb -= sb[d] * shape[d];
            counters[d] = 0;
        }
    }
}

/// Visit each 1-d lane along `axis`: calls f(base, stride, len) once per lane.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        let block = o * len * inner;
        for i in 0..inner {
            f(block + i, inner, len);
        }
    }
}
