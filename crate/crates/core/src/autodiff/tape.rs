//! Define-by-run reverse-mode automatic differentiation.
//!
//! Operations append nodes to a flat arena ([`Tape`]); every node's index is
//! strictly greater than its parents' (construction order), so the backward
//! pass is a single reverse sweep — no explicit topological sort. Values are
//! computed eagerly at construction, and shape or domain problems surface as
//! errors from the constructor itself, never as NaN later.

use super::kernels as k;
use super::tensor::{contiguous_strides, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Arena index, mainly useful in error messages and tests.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    /// `map[d]` is the output stride for input dimension `d` (0 on reduced dims).
    Sum {
        input: Var,
        map: Vec<usize>,
    },
    Mean {
        input: Var,
        map: Vec<usize>,
        inv_count: T,
    },
    MaxReduce {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    IndexSelect {
        input: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    PairwiseSqdist(Var, Var),
}

struct Node<T: Element> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

/// Gradient tape. One forward graph, one backward sweep.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a trainable leaf. Gradients flow into it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert a non-trainable leaf (inputs, targets, fixed scalars).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Rank-0 constant.
    pub fn scalar(&mut self, c: T) -> Var {
        self.constant(Tensor::scalar(c))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward`, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Scalar convenience: value of a 1-element node.
    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    /// Clear all gradients and re-open the tape for further ops / backward.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = false;
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by backward; call zero_grad() or build a new tape".into(),
            ));
        }
        Ok(())
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise binary (broadcasting) ----

    fn broadcast_forward(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        let shape = k::broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} are not broadcast-compatible",
                av.shape(),
                bv.shape()
            ))
        })?;
        let sa = k::broadcast_strides(av.shape(), &shape);
        let sb = k::broadcast_strides(bv.shape(), &shape);
        let mut data = vec![T::zero(); shape.iter().product()];
        {
            let (ad, bd) = (av.data(), bv.data());
            k::walk_mapped2(&shape, &sa, &sb, |o, ma, mb| data[o] = f(ad[ma], bd[mb]));
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(op, Tensor::new(shape, data)?, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_forward("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_forward("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_forward("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| *v == T::zero()) {
            return Err(Error::Domain("div: divisor contains zero".into()));
        }
        self.broadcast_forward("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let req = self.requires(a);
        self.push(op, value, req)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        Ok(self.unary(a, |x| T::zero() - x, Op::Neg(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        Ok(self.unary(a, |x| x.exp(), Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let strictly_positive =
            |v: &T| v.partial_cmp(&T::zero()) == Some(std::cmp::Ordering::Greater);
        if !self.value(a).data().iter().all(strictly_positive) {
            return Err(Error::Domain(
                "log: input contains a non-positive (or NaN) element".into(),
            ));
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        if self.value(a).data().iter().any(|v| *v < T::zero()) {
            return Err(Error::Domain("sqrt: input contains a negative element".into()));
        }
        Ok(self.unary(a, |x| x.sqrt(), Op::Sqrt(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        Ok(self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.check_open()?;
        Ok(self.unary(a, |x| x + c, Op::AddScalar(a)))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.check_open()?;
        Ok(self.unary(a, |x| x * c, Op::MulScalar(a, c)))
    }

    // ---- matmul ----

    /// Matrix product. Supported rank pairs: (2,2) plain, (3,3) batched with
    /// equal batch dims, (3,2) with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let value = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (m, ka) = (sa[0], sa[1]);
                let (kb, n) = (sb[0], sb[1]);
                if ka != kb {
                    return Err(Error::Dimension(format!(
                        "matmul: inner dimensions disagree ({sa:?} @ {sb:?})"
                    )));
                }
                let mut out = vec![T::zero(); m * n];
                k::mm_acc(av.data(), bv.data(), m, ka, n, &mut out);
                Tensor::new(vec![m, n], out)?
            }
            (3, 3) => {
                let (ba, m, ka) = (sa[0], sa[1], sa[2]);
                let (bb, kb, n) = (sb[0], sb[1], sb[2]);
                if ba != bb || ka != kb {
                    return Err(Error::Dimension(format!(
                        "matmul: batched shapes disagree ({sa:?} @ {sb:?})"
                    )));
                }
                let mut out = vec![T::zero(); ba * m * n];
                for i in 0..ba {
                    k::mm_acc(
                        &av.data()[i * m * ka..(i + 1) * m * ka],
                        &bv.data()[i * kb * n..(i + 1) * kb * n],
                        m,
                        ka,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(vec![ba, m, n], out)?
            }
            (3, 2) => {
                let (ba, m, ka) = (sa[0], sa[1], sa[2]);
                let (kb, n) = (sb[0], sb[1]);
                if ka != kb {
                    return Err(Error::Dimension(format!(
                        "matmul: inner dimensions disagree ({sa:?} @ {sb:?})"
                    )));
                }
                let mut out = vec![T::zero(); ba * m * n];
                for i in 0..ba {
                    k::mm_acc(
                        &av.data()[i * m * ka..(i + 1) * m * ka],
                        bv.data(),
                        m,
                        ka,
                        n,
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(vec![ba, m, n], out)?
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul: unsupported rank pair ({sa:?} @ {sb:?})"
                )))
            }
        };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, req))
    }

    // ---- convolution / pooling ----

    /// 2-d cross-correlation. `input` is (N,C,H,W), `weight` is (O,C,KH,KW).
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_open()?;
        let (iv, wv) = (self.value(input), self.value(weight));
        let (is, ws) = (iv.shape(), wv.shape());
        if is.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d: expected 4-d input and weight, got {is:?} and {ws:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d: stride must be positive".into()));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != wc {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c} channels but weight expects {wc}"
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = k::conv_out_dim(h, kh, stride, pad);
        let wo = k::conv_out_dim(w, kw, stride, pad);
        let ckk = c * kh * kw;
        let mut cols = vec![T::zero(); ckk * ho * wo];
        let mut out = vec![T::zero(); n * o * ho * wo];
        for ni in 0..n {
            k::im2col(
                &iv.data()[ni * c * h * w..(ni + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad,
                &mut cols,
            );
            k::mm_acc(
                wv.data(),
                &cols,
                o,
                ckk,
                ho * wo,
                &mut out[ni * o * ho * wo..(ni + 1) * o * ho * wo],
            );
        }
        let req = self.requires(input) || self.requires(weight);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            },
            Tensor::new(vec![n, o, ho, wo], out)?,
            req,
        ))
    }

    /// Max pooling over (N,C,H,W) with a square window and no padding.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check_open()?;
        let iv = self.value(input);
        let is = iv.shape();
        if is.len() != 4 {
            return Err(Error::Dimension(format!(
                "maxpool2d: expected 4-d input, got {is:?}"
            )));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Dimension(
                "maxpool2d: kernel and stride must be positive".into(),
            ));
        }
        let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
        if h < kernel || w < kernel {
            return Err(Error::Dimension(format!(
                "maxpool2d: window {kernel} larger than input {h}x{w}"
            )));
        }
        if iv.numel() > u32::MAX as usize {
            return Err(Error::Dimension(
                "maxpool2d: input too large for 32-bit argmax bookkeeping".into(),
            ));
        }
        let ho = (h - kernel) / stride + 1;
        let wo = (w - kernel) / stride + 1;
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        let data = iv.data();
        let mut oi = 0;
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                for yo in 0..ho {
                    for xo in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_at = 0u32;
                        for ky in 0..kernel {
                            let row = plane + (yo * stride + ky) * w + xo * stride;
                            for kx in 0..kernel {
                                let v = data[row + kx];
                                if v > best {
                                    best = v;
                                    best_at = (row + kx) as u32;
                                }
                            }
                        }
                        out[oi] = best;
                        argmax[oi] = best_at;
                        oi += 1;
                    }
                }
            }
        }
        let req = self.requires(input);
        Ok(self.push(
            Op::MaxPool2d { input, argmax },
            Tensor::new(vec![n, c, ho, wo], out)?,
            req,
        ))
    }

    // ---- reductions ----

    /// Output shape and per-input-dimension output strides for a reduction.
    fn reduce_map(
        name: &str,
        shape: &[usize],
        axes: &[usize],
        keepdims: bool,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        if axes.is_empty() {
            reduced.fill(true);
        } else {
            for &a in axes {
                if a >= rank {
                    return Err(Error::Dimension(format!(
                        "{name}: axis {a} out of range for rank {rank}"
                    )));
                }
                if reduced[a] {
                    return Err(Error::Dimension(format!("{name}: duplicate axis {a}")));
                }
                reduced[a] = true;
            }
        }
        let mut out_shape = Vec::new();
        for d in 0..rank {
            if reduced[d] {
                if keepdims {
                    out_shape.push(1);
                }
            } else {
                out_shape.push(shape[d]);
            }
        }
        let ostr = contiguous_strides(&out_shape);
        let mut map = vec![0usize; rank];
        let mut od = 0;
        for d in 0..rank {
            if reduced[d] {
                if keepdims {
                    od += 1;
                }
            } else {
                map[d] = ostr[od];
                od += 1;
            }
        }
        Ok((out_shape, map))
    }

    /// Sum over `axes` (empty slice = all axes).
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let (out_shape, map) = Self::reduce_map("sum", av.shape(), axes, keepdims)?;
        let mut out = vec![T::zero(); out_shape.iter().product()];
        {
            let data = av.data();
            k::walk_mapped(av.shape(), &map, |i, o| out[o] += data[i]);
        }
        let req = self.requires(a);
        Ok(self.push(Op::Sum { input: a, map }, Tensor::new(out_shape, out)?, req))
    }

    /// Arithmetic mean over `axes` (empty slice = all axes).
    pub fn mean(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let (out_shape, map) = Self::reduce_map("mean", av.shape(), axes, keepdims)?;
        let out_numel: usize = out_shape.iter().product();
        let count = av.numel() / out_numel;
        let inv_count = T::one() / T::fromf(count as f64);
        let mut out = vec![T::zero(); out_numel];
        {
            let data = av.data();
            k::walk_mapped(av.shape(), &map, |i, o| out[o] += data[i]);
        }
        for v in &mut out {
            *v = *v * inv_count;
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::Mean {
                input: a,
                map,
                inv_count,
            },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    /// Maximum over `axes` (empty slice = all axes). Ties resolve to the
    /// earliest element in row-major order.
    pub fn reduce_max(&mut self, a: Var, axes: &[usize], keepdims: bool) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let (out_shape, map) = Self::reduce_map("max", av.shape(), axes, keepdims)?;
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![T::neg_infinity(); out_numel];
        let mut argmax = vec![usize::MAX; out_numel];
        {
            let data = av.data();
            k::walk_mapped(av.shape(), &map, |i, o| {
                if data[i] > out[o] || argmax[o] == usize::MAX {
                    out[o] = data[i];
                    argmax[o] = i;
                }
            });
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::MaxReduce { input: a, argmax },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    // ---- softmax family ----

    fn check_softmax_input(name: &str, av: &Tensor<T>, axis: usize) -> Result<()> {
        if axis >= av.rank() {
            return Err(Error::Dimension(format!(
                "{name}: axis {axis} out of range for rank {}",
                av.rank()
            )));
        }
        if av.data().iter().any(|v| v.tof().is_nan()) {
            return Err(Error::Domain(format!("{name}: input contains NaN")));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        Self::check_softmax_input("softmax", av, axis)?;
        let shape = av.shape().to_vec();
        let mut out = vec![T::zero(); av.numel()];
        {
            let data = av.data();
            k::for_each_lane(&shape, axis, |base, stride, len| {
                let mut m = T::neg_infinity();
                for i in 0..len {
                    let v = data[base + i * stride];
                    if v > m {
                        m = v;
                    }
                }
                let mut total = T::zero();
                for i in 0..len {
                    let e = (data[base + i * stride] - m).exp();
                    out[base + i * stride] = e;
                    total += e;
                }
                for i in 0..len {
                    out[base + i * stride] = out[base + i * stride] / total;
                }
            });
        }
        let req = self.requires(a);
        Ok(self.push(Op::Softmax { input: a, axis }, Tensor::new(shape, out)?, req))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        Self::check_softmax_input("log_softmax", av, axis)?;
        let shape = av.shape().to_vec();
        let mut out = vec![T::zero(); av.numel()];
        {
            let data = av.data();
            k::for_each_lane(&shape, axis, |base, stride, len| {
                let mut m = T::neg_infinity();
                for i in 0..len {
                    let v = data[base + i * stride];
                    if v > m {
                        m = v;
                    }
                }
                let mut total = T::zero();
                for i in 0..len {
                    total += (data[base + i * stride] - m).exp();
                }
                let lse = m + total.ln();
                for i in 0..len {
                    out[base + i * stride] = data[base + i * stride] - lse;
                }
            });
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::LogSoftmax { input: a, axis },
            Tensor::new(shape, out)?,
            req,
        ))
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        self.check_open()?;
        let value = self.value(a).reshaped(new_shape)?;
        let req = self.requires(a);
        Ok(self.push(Op::Reshape(a), value, req))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let rank = av.rank();
        if perm.len() != rank {
            return Err(Error::Dimension(format!(
                "permute: permutation {perm:?} does not match rank {rank}"
            )));
        }
        let mut seen = vec![false; rank];
        for &p in perm {
            if p >= rank || seen[p] {
                return Err(Error::Dimension(format!(
                    "permute: {perm:?} is not a permutation of 0..{rank}"
                )));
            }
            seen[p] = true;
        }
        let in_strides = contiguous_strides(av.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| av.shape()[p]).collect();
        let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![T::zero(); av.numel()];
        {
            let data = av.data();
            k::walk_mapped(&out_shape, &mapped, |o, m| out[o] = data[m]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::Permute {
                input: a,
                perm: perm.to_vec(),
            },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    /// Transpose a rank-2 tensor.
    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::Dimension(format!(
                "transpose2d: expected rank 2, got {:?}",
                self.value(a).shape()
            )));
        }
        self.permute(a, &[1, 0])
    }

    /// Split a tensor's axis extents: outer (dims before), len (axis), inner (after).
    fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::Dimension("concat: no inputs".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat: axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut total_axis = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::Dimension(format!(
                    "concat: rank mismatch ({:?} vs {:?})",
                    first, s
                )));
            }
            for d in 0..s.len() {
                if d != axis && s[d] != first[d] {
                    return Err(Error::Dimension(format!(
                        "concat: shapes {:?} and {:?} differ outside axis {axis}",
                        first, s
                    )));
                }
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let (outer, _, inner) = Self::axis_blocks(&out_shape, axis);
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            let len = pv.shape()[axis];
            let data = pv.data();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * total_axis + offset) * inner;
                out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
            }
            offset += len;
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "slice: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "slice: range {start}..{} out of bounds for axis of size {}",
                start + len,
                shape[axis]
            )));
        }
        let (outer, full, inner) = Self::axis_blocks(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = vec![T::zero(); outer * len * inner];
        let data = av.data();
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&data[src..src + len * inner]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
            },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    /// Gather rows along `axis` by index (duplicates allowed; backward
    /// scatter-adds).
    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_open()?;
        let av = self.value(a);
        let shape = av.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "index_select: axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        if indices.is_empty() {
            return Err(Error::Dimension("index_select: empty index list".into()));
        }
        let (outer, full, inner) = Self::axis_blocks(shape, axis);
        for &ix in indices {
            if ix >= full {
                return Err(Error::Dimension(format!(
                    "index_select: index {ix} out of bounds for axis of size {full}"
                )));
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = indices.len();
        let mut out = vec![T::zero(); outer * indices.len() * inner];
        let data = av.data();
        for o in 0..outer {
            for (j, &ix) in indices.iter().enumerate() {
                let src = (o * full + ix) * inner;
                let dst = (o * indices.len() + j) * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Op::IndexSelect {
                input: a,
                axis,
                indices: indices.to_vec(),
            },
            Tensor::new(out_shape, out)?,
            req,
        ))
    }

    // ---- distances ----

    /// Pairwise squared Euclidean distances: a is (n,d), b is (m,d), out (n,m).
    pub fn pairwise_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension(format!(
                "pairwise_sqdist: expected (n,d) and (m,d), got {sa:?} and {sb:?}"
            )));
        }
        let (n, d) = (sa[0], sa[1]);
        let m = sb[0];
        let mut out = vec![T::zero(); n * m];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..n {
            let arow = &ad[i * d..(i + 1) * d];
            for j in 0..m {
                let brow = &bd[j * d..(j + 1) * d];
                let mut acc = T::zero();
                for (&x, &y) in arow.iter().zip(brow.iter()) {
                    let diff = x - y;
                    acc += diff * diff;
                }
                out[i * m + j] = acc;
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::PairwiseSqdist(a, b),
            Tensor::new(vec![n, m], out)?,
            req,
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar root. Consumes the tape: a second call
    /// without `zero_grad` is a contract error.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; call zero_grad() first".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract(
                "backward: root does not depend on any trainable parameter".into(),
            ));
        }
        self.consumed = true;
        let root_shape = self.value(root).shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(root_shape, T::one()));

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let gout = node.grad.as_ref().expect("grad checked above");
            let deltas = Self::op_backward(node, gout, before);
            for (var, delta) in deltas {
                let parent = &mut before[var.0];
                if !parent.requires_grad {
                    continue;
                }
                match &mut parent.grad {
                    Some(g) => {
                        for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                            *gi += *di;
                        }
                    }
                    None => parent.grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Per-op vector-Jacobian products. Returns (parent, gradient) pairs;
    /// gradients for parents that do not require grad are skipped where that
    /// saves real work.
    fn op_backward(node: &Node<T>, gout: &Tensor<T>, before: &[Node<T>]) -> Vec<(Var, Tensor<T>)> {
        let g = gout.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sub = matches!(node.op, Op::Sub(_, _));
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let oshape = node.value.shape();
                let sa = k::broadcast_strides(av.shape(), oshape);
                let sb = k::broadcast_strides(bv.shape(), oshape);
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                {
                    let gad = ga.data_mut();
                    let gbd = gb.data_mut();
                    k::walk_mapped2(oshape, &sa, &sb, |o, ma, mb| {
                        gad[ma] += g[o];
                        if sub {
                            gbd[mb] += T::zero() - g[o];
                        } else {
                            gbd[mb] += g[o];
                        }
                    });
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let oshape = node.value.shape();
                let sa = k::broadcast_strides(av.shape(), oshape);
                let sb = k::broadcast_strides(bv.shape(), oshape);
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                {
                    let gad = ga.data_mut();
                    let gbd = gb.data_mut();
                    let (ad, bd) = (av.data(), bv.data());
                    k::walk_mapped2(oshape, &sa, &sb, |o, ma, mb| {
                        gad[ma] += g[o] * bd[mb];
                        gbd[mb] += g[o] * ad[ma];
                    });
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let oshape = node.value.shape();
                let sa = k::broadcast_strides(av.shape(), oshape);
                let sb = k::broadcast_strides(bv.shape(), oshape);
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                {
                    let gad = ga.data_mut();
                    let gbd = gb.data_mut();
                    let (ad, bd) = (av.data(), bv.data());
                    k::walk_mapped2(oshape, &sa, &sb, |o, ma, mb| {
                        let inv = T::one() / bd[mb];
                        gad[ma] += g[o] * inv;
                        gbd[mb] += T::zero() - g[o] * ad[ma] * inv * inv;
                    });
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => {
                let delta = gout.map(|x| T::zero() - x);
                vec![(*a, delta)]
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let mut d = gout.clone();
                for (di, &yi) in d.data_mut().iter_mut().zip(y) {
                    *di = *di * yi;
                }
                vec![(*a, d)]
            }
            Op::Log(a) => {
                let x = before[a.0].value.data();
                let mut d = gout.clone();
                for (di, &xi) in d.data_mut().iter_mut().zip(x) {
                    *di = *di / xi;
                }
                vec![(*a, d)]
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                let half = T::one() / (T::one() + T::one());
                let mut d = gout.clone();
                for (di, &yi) in d.data_mut().iter_mut().zip(y) {
                    *di = *di * half / yi;
                }
                vec![(*a, d)]
            }
            Op::Relu(a) => {
                let x = before[a.0].value.data();
                let mut d = gout.clone();
                for (di, &xi) in d.data_mut().iter_mut().zip(x) {
                    // gradient passes only where the input was strictly
                    // positive; zero at the kink and for NaN inputs
                    if xi.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
                        *di = T::zero();
                    }
                }
                vec![(*a, d)]
            }
            Op::AddScalar(a) => vec![(*a, gout.clone())],
            Op::MulScalar(a, c) => {
                let c = *c;
                vec![(*a, gout.map(|x| x * c))]
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let (sa, sb) = (av.shape(), bv.shape());
                let mut ga = Tensor::zeros(sa.to_vec());
                let mut gb = Tensor::zeros(sb.to_vec());
                match (sa.len(), sb.len()) {
                    (2, 2) => {
                        let (m, kk) = (sa[0], sa[1]);
                        let n = sb[1];
                        if before[a.0].requires_grad {
                            k::mm_bt_acc(g, bv.data(), m, n, kk, ga.data_mut());
                        }
                        if before[b.0].requires_grad {
                            k::mm_at_acc(av.data(), g, kk, m, n, gb.data_mut());
                        }
                    }
                    (3, 3) => {
                        let (bt, m, kk) = (sa[0], sa[1], sa[2]);
                        let n = sb[2];
                        for i in 0..bt {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            if before[a.0].requires_grad {
                                k::mm_bt_acc(
                                    gi,
                                    &bv.data()[i * kk * n..(i + 1) * kk * n],
                                    m,
                                    n,
                                    kk,
                                    &mut ga.data_mut()[i * m * kk..(i + 1) * m * kk],
                                );
                            }
                            if before[b.0].requires_grad {
                                k::mm_at_acc(
                                    &av.data()[i * m * kk..(i + 1) * m * kk],
                                    gi,
                                    kk,
                                    m,
                                    n,
                                    &mut gb.data_mut()[i * kk * n..(i + 1) * kk * n],
                                );
                            }
                        }
                    }
                    (3, 2) => {
                        let (bt, m, kk) = (sa[0], sa[1], sa[2]);
                        let n = sb[1];
                        for i in 0..bt {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            if before[a.0].requires_grad {
                                k::mm_bt_acc(
                                    gi,
                                    bv.data(),
                                    m,
                                    n,
                                    kk,
                                    &mut ga.data_mut()[i * m * kk..(i + 1) * m * kk],
                                );
                            }
                            if before[b.0].requires_grad {
                                k::mm_at_acc(
                                    &av.data()[i * m * kk..(i + 1) * m * kk],
                                    gi,
                                    kk,
                                    m,
                                    n,
                                    gb.data_mut(),
                                );
                            }
                        }
                    }
                    _ => unreachable!("matmul constructor validated ranks"),
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d {
                input,
                weight,
                stride,
                pad,
            } => {
                let (iv, wv) = (&before[input.0].value, &before[weight.0].value);
                let is = iv.shape();
                let ws = wv.shape();
                let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ho = k::conv_out_dim(h, kh, *stride, *pad);
                let wo = k::conv_out_dim(w, kw, *stride, *pad);
                let ckk = c * kh * kw;
                let mut gi = Tensor::zeros(is.to_vec());
                let mut gw = Tensor::zeros(ws.to_vec());
                let need_input = before[input.0].requires_grad;
                let need_weight = before[weight.0].requires_grad;
                // Patch matrices are recomputed here instead of being carried
                // forward in the node; memory stays O(one image).
                let mut cols = vec![T::zero(); ckk * ho * wo];
                let mut gcols = vec![T::zero(); ckk * ho * wo];
                for ni in 0..n {
                    let gslice = &g[ni * o * ho * wo..(ni + 1) * o * ho * wo];
                    if need_weight {
                        k::im2col(
                            &iv.data()[ni * c * h * w..(ni + 1) * c * h * w],
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut cols,
                        );
                        k::mm_bt_acc(gslice, &cols, o, ho * wo, ckk, gw.data_mut());
                    }
                    if need_input {
                        gcols.fill(T::zero());
                        k::mm_at_acc(wv.data(), gslice, ckk, o, ho * wo, &mut gcols);
                        k::col2im_add(
                            &gcols,
                            c,
                            h,
                            w,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            &mut gi.data_mut()[ni * c * h * w..(ni + 1) * c * h * w],
                        );
                    }
                }
                vec![(*input, gi), (*weight, gw)]
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = Tensor::zeros(before[input.0].value.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gid[src as usize] += g[o];
                    }
                }
                vec![(*input, gi)]
            }
            Op::Sum { input, map } => {
                let iv = &before[input.0].value;
                let mut gi = Tensor::zeros(iv.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    k::walk_mapped(iv.shape(), map, |i, o| gid[i] += g[o]);
                }
                vec![(*input, gi)]
            }
            Op::Mean {
                input,
                map,
                inv_count,
            } => {
                let iv = &before[input.0].value;
                let ic = *inv_count;
                let mut gi = Tensor::zeros(iv.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    k::walk_mapped(iv.shape(), map, |i, o| gid[i] += g[o] * ic);
                }
                vec![(*input, gi)]
            }
            Op::MaxReduce { input, argmax } => {
                let mut gi = Tensor::zeros(before[input.0].value.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        gid[src] += g[o];
                    }
                }
                vec![(*input, gi)]
            }
            Op::Softmax { input, axis } => {
                // gx = y * (gy - sum(gy * y)) per lane
                let y = node.value.data();
                let mut gi = Tensor::zeros(node.value.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    k::for_each_lane(node.value.shape(), *axis, |base, stride, len| {
                        let mut dot = T::zero();
                        for i in 0..len {
                            let p = base + i * stride;
                            dot += g[p] * y[p];
                        }
                        for i in 0..len {
                            let p = base + i * stride;
                            gid[p] = y[p] * (g[p] - dot);
                        }
                    });
                }
                vec![(*input, gi)]
            }
            Op::LogSoftmax { input, axis } => {
                // gx = gy - exp(y) * sum(gy) per lane
                let y = node.value.data();
                let mut gi = Tensor::zeros(node.value.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    k::for_each_lane(node.value.shape(), *axis, |base, stride, len| {
                        let mut total = T::zero();
                        for i in 0..len {
                            total += g[base + i * stride];
                        }
                        for i in 0..len {
                            let p = base + i * stride;
                            gid[p] = g[p] - y[p].exp() * total;
                        }
                    });
                }
                vec![(*input, gi)]
            }
            Op::Reshape(a) => {
                let shape = before[a.0].value.shape().to_vec();
                let delta = Tensor::new(shape, g.to_vec()).expect("same numel by construction");
                vec![(*a, delta)]
            }
            Op::Permute { input, perm } => {
                let iv = &before[input.0].value;
                let in_strides = contiguous_strides(iv.shape());
                let out_shape = node.value.shape();
                let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
                let mut gi = Tensor::zeros(iv.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    k::walk_mapped(out_shape, &mapped, |o, m| gid[m] += g[o]);
                }
                vec![(*input, gi)]
            }
            Op::Concat { inputs, axis } => {
                let total_axis = node.value.shape()[*axis];
                let (outer, _, inner) = Self::axis_blocks(node.value.shape(), *axis);
                let mut out = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &p in inputs {
                    let ps = before[p.0].value.shape();
                    let len = ps[*axis];
                    let mut gp = Tensor::zeros(ps.to_vec());
                    {
                        let gpd = gp.data_mut();
                        for o in 0..outer {
                            let src = (o * total_axis + offset) * inner;
                            let dst = o * len * inner;
                            gpd[dst..dst + len * inner]
                                .copy_from_slice(&g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                    out.push((p, gp));
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let iv = &before[input.0].value;
                let (outer, full, inner) = Self::axis_blocks(iv.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gi = Tensor::zeros(iv.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        gid[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                }
                vec![(*input, gi)]
            }
            Op::IndexSelect {
                input,
                axis,
                indices,
            } => {
                let iv = &before[input.0].value;
                let (outer, full, inner) = Self::axis_blocks(iv.shape(), *axis);
                let mut gi = Tensor::zeros(iv.shape().to_vec());
                {
                    let gid = gi.data_mut();
                    for o in 0..outer {
                        for (j, &ix) in indices.iter().enumerate() {
                            let dst = (o * full + ix) * inner;
                            let src = (o * indices.len() + j) * inner;
                            for t in 0..inner {
                                gid[dst + t] += g[src + t];
                            }
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::PairwiseSqdist(a, b) => {
                let (av, bv) = (&before[a.0].value, &before[b.0].value);
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[0];
                let two = T::one() + T::one();
                let mut ga = Tensor::zeros(av.shape().to_vec());
                let mut gb = Tensor::zeros(bv.shape().to_vec());
                {
                    let gad = ga.data_mut();
                    let gbd = gb.data_mut();
                    let (ad, bd) = (av.data(), bv.data());
                    for i in 0..n {
                        for j in 0..m {
                            let go = g[i * m + j] * two;
                            if go == T::zero() {
                                continue;
                            }
                            for t in 0..d {
                                let diff = ad[i * d + t] - bd[j * d + t];
                                gad[i * d + t] += go * diff;
                                gbd[j * d + t] += T::zero() - go * diff;
                            }
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
        }
    }
}
