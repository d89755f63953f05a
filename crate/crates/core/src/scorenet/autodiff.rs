//! Minimal reverse-mode differentiation over channel-major image tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and accumulates parameter gradients. Nodes that do
//! not depend on a trainable parameter are skipped entirely.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = A B + beta C` for row/column-strided matrices (`A` is m x k, `B` is k x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every addressed element was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `c x h x w` tensor stored channel-major; vectors use `h = w = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::ZERO; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data does not match shape");
        Self { c, h, w, data }
    }

    pub fn vector(data: Vec<T>) -> Self {
        let c = data.len();
        Self {
            c,
            h: 1,
            w: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub type NodeId = usize;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        stride: usize,
        cols: Option<Vec<T>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Scale(NodeId, T),
    Silu(NodeId),
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Film {
        x: NodeId,
        ss: NodeId,
    },
    Upsample(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward pass. `trainable[id]` selects which parameters receive gradients.
#[derive(Debug)]
pub struct Tape<'m, T> {
    nodes: Vec<Node<T>>,
    trainable: &'m [bool],
}

/// Source column of each output column for kernel offsets 0..3, with circular wrap.
fn column_taps(w: usize, stride: usize) -> [Vec<usize>; 3] {
    let wo = w / stride;
    std::array::from_fn(|kx| (0..wo).map(|ox| (ox * stride + kx + w - 1) % w).collect())
}

fn im2col<T: Scalar>(x: &Tensor<T>, stride: usize) -> Vec<T> {
    let (c, h, w) = x.shape();
    let (ho, wo) = (h / stride, w / stride);
    let n = ho * wo;
    let taps = column_taps(w, stride);
    let mut cols = vec![T::ZERO; c * 9 * n];
    for ci in 0..c {
        let src = &x.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for (kx, tap) in taps.iter().enumerate() {
                let row = &mut cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &src[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    if stride == 1 {
                        // interior columns are a shifted copy; only one edge wraps
                        match kx {
                            0 => {
                                dst[0] = line[w - 1];
                                dst[1..].copy_from_slice(&line[..w - 1]);
                            }
                            1 => dst.copy_from_slice(line),
                            _ => {
                                dst[..w - 1].copy_from_slice(&line[1..]);
                                dst[w - 1] = line[0];
                            }
                        }
                    } else {
                        for (d, &t) in dst.iter_mut().zip(tap) {
                            *d = line[t];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, dx: &mut [T]) {
    let (ho, wo) = (h / stride, w / stride);
    let n = ho * wo;
    let taps = column_taps(w, stride);
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for (kx, tap) in taps.iter().enumerate() {
                let row = &cols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    if stride == 1 {
                        match kx {
                            0 => {
                                line[w - 1] += src[0];
                                line[..w - 1]
                                    .iter_mut()
                                    .zip(&src[1..])
                                    .for_each(|(l, g)| *l += *g);
                            }
                            1 => line.iter_mut().zip(src).for_each(|(l, g)| *l += *g),
                            _ => {
                                line[1..]
                                    .iter_mut()
                                    .zip(&src[..w - 1])
                                    .for_each(|(l, g)| *l += *g);
                                line[0] += src[w - 1];
                            }
                        }
                    } else {
                        for (&g, &t) in src.iter().zip(tap) {
                            line[t] += g;
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

fn grad_slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::ZERO; len])
}

impl<'m, T: Scalar> Tape<'m, T> {
    pub fn new(trainable: &'m [bool]) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            trainable,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[id].value, Tensor::zeros(0, 0, 0))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> NodeId {
        let g = self.trainable.get(id).copied().unwrap_or(false);
        self.push(value.clone(), Op::Param(id), g)
    }

    /// 3x3 (zero rows, circular columns) or 1x1 convolution; `w` is `cout x (cin k k)`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, k: usize, stride: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let cout = self.nodes[b].value.len();
        let kk = xv.c * k * k;
        assert!(k == 1 || k == 3, "unsupported kernel size {k}");
        assert!(k == 3 || stride == 1, "1x1 convolutions are stride 1");
        assert_eq!(wv.len(), cout * kk, "conv weight shape");
        assert!(
            xv.h.is_multiple_of(stride) && xv.w.is_multiple_of(stride),
            "stride must divide the image"
        );
        let (ho, wo) = (xv.h / stride, xv.w / stride);
        let n = ho * wo;
        let cols = (k == 3).then(|| im2col(xv, stride));
        let mut out = Tensor::zeros(cout, ho, wo);
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(self.nodes[b].value.data[co]);
        }
        let bsrc: &[T] = cols.as_deref().unwrap_or(&xv.data);
        T::gemm(
            cout,
            kk,
            n,
            &wv.data,
            kk as isize,
            1,
            bsrc,
            n as isize,
            1,
            T::ONE,
            &mut out.data,
            n as isize,
            1,
        );
        let g = self.needs(&[x, w, b]);
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                cols,
            },
            g,
        )
    }

    /// `w x + b` on a vector node; `w` is `out x in` row-major.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.nodes[x].value.data;
        let wv = &self.nodes[w].value.data;
        let bv = &self.nodes[b].value.data;
        let (n_out, n_in) = (bv.len(), xv.len());
        assert_eq!(wv.len(), n_out * n_in, "linear weight shape");
        let y: Vec<T> = (0..n_out)
            .map(|o| {
                let mut s = bv[o];
                for (wi, xi) in wv[o * n_in..(o + 1) * n_in].iter().zip(xv) {
                    s += *wi * *xi;
                }
                s
            })
            .collect();
        let g = self.needs(&[x, w, b]);
        self.push(Tensor::vector(y), Op::Linear { x, w, b }, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(av.c, av.h, av.w, data);
        let g = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), g)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!((av.h, av.w), (bv.h, bv.w), "concat spatial mismatch");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.c + bv.c, av.h, av.w, data);
        let g = self.needs(&[a, b]);
        self.push(out, Op::Concat(a, b), g)
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let xv = &self.nodes[x].value;
        let out = Tensor::from_vec(xv.c, xv.h, xv.w, xv.data.iter().map(|v| *v * k).collect());
        let g = self.needs(&[x]);
        self.push(out, Op::Scale(x, k), g)
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let out = Tensor::from_vec(
            xv.c,
            xv.h,
            xv.w,
            xv.data.iter().map(|&v| v * sigmoid(v)).collect(),
        );
        let g = self.needs(&[x]);
        self.push(out, Op::Silu(x), g)
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, plane) = (xv.c, xv.plane());
        assert!(
            groups > 0 && c % groups == 0,
            "channels must split into groups"
        );
        let per = c / groups * plane;
        let gv = &self.nodes[gamma].value.data;
        let bv = &self.nodes[beta].value.data;
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut inv_std = Vec::with_capacity(groups);
        let mut out = Tensor::zeros(c, xv.h, xv.w);
        for g in 0..groups {
            let src = &xv.data[g * per..(g + 1) * per];
            let mean = src.iter().map(|v| v.to_f64()).sum::<f64>() / per as f64;
            let var = src.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / per as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(T::from_f64(is));
            for (j, v) in src.iter().enumerate() {
                let i = g * per + j;
                let xh = T::from_f64((v.to_f64() - mean) * is);
                xhat[i] = xh;
                let ch = i / plane;
                out.data[i] = xh * gv[ch] + bv[ch];
            }
        }
        let need = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            need,
        )
    }

    /// `x * (1 + scale_c) + shift_c` with `ss = [scale; shift]`.
    pub fn film(&mut self, x: NodeId, ss: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let s = &self.nodes[ss].value.data;
        assert_eq!(
            s.len(),
            2 * xv.c,
            "film vector must hold scale and shift per channel"
        );
        let plane = xv.plane();
        let mut out = xv.clone();
        for (ch, chunk) in out.data.chunks_mut(plane).enumerate() {
            let (a, b) = (T::ONE + s[ch], s[xv.c + ch]);
            chunk.iter_mut().for_each(|v| *v = *v * a + b);
        }
        let g = self.needs(&[x, ss]);
        self.push(out, Op::Film { x, ss }, g)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (c, h, w) = xv.shape();
        let mut out = Tensor::zeros(c, 2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data[(ch * 2 * h + y) * 2 * w + xx] =
                        xv.data[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let g = self.needs(&[x]);
        self.push(out, Op::Upsample(x), g)
    }

    /// Propagates `seed = dL/d(out)` back through the tape, adding parameter
    /// gradients into `param_grads[id]` for every trainable parameter.
    pub fn backward(&self, out: NodeId, seed: Vec<T>, param_grads: &mut [Vec<T>]) {
        assert_eq!(
            seed.len(),
            self.nodes[out].value.len(),
            "seed gradient shape"
        );
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let dst = &mut param_grads[*id];
                    assert_eq!(dst.len(), dy.len(), "parameter gradient buffer size");
                    dst.iter_mut().zip(&dy).for_each(|(d, g)| *d += *g);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    cols,
                } => {
                    let xv = &self.nodes[*x].value;
                    let cout = node.value.c;
                    let n = node.value.plane();
                    let kk = xv.c * k * k;
                    let bsrc: &[T] = cols.as_deref().unwrap_or(&xv.data);
                    if self.nodes[*b].needs_grad {
                        let db = grad_slot(&mut grads, *b, cout);
                        for (co, chunk) in dy.chunks(n).enumerate() {
                            let mut s = T::ZERO;
                            chunk.iter().for_each(|g| s += *g);
                            db[co] += s;
                        }
                    }
                    if self.nodes[*w].needs_grad {
                        let dw = grad_slot(&mut grads, *w, cout * kk);
                        T::gemm(
                            cout,
                            n,
                            kk,
                            &dy,
                            n as isize,
                            1,
                            bsrc,
                            1,
                            n as isize,
                            T::ONE,
                            dw,
                            kk as isize,
                            1,
                        );
                    }
                    if self.nodes[*x].needs_grad {
                        let wv = &self.nodes[*w].value.data;
                        let mut dcols = vec![T::ZERO; kk * n];
                        T::gemm(
                            kk,
                            cout,
                            n,
                            wv,
                            1,
                            kk as isize,
                            &dy,
                            n as isize,
                            1,
                            T::ZERO,
                            &mut dcols,
                            n as isize,
                            1,
                        );
                        let dx = grad_slot(&mut grads, *x, xv.len());
                        if *k == 3 {
                            col2im(&dcols, xv.c, xv.h, xv.w, *stride, dx);
                        } else {
                            dx.iter_mut().zip(&dcols).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value.data;
                    let (n_out, n_in) = (dy.len(), xv.len());
                    if self.nodes[*b].needs_grad {
                        let db = grad_slot(&mut grads, *b, n_out);
                        db.iter_mut().zip(&dy).for_each(|(d, g)| *d += *g);
                    }
                    if self.nodes[*w].needs_grad {
                        let dw = grad_slot(&mut grads, *w, n_out * n_in);
                        for o in 0..n_out {
                            for j in 0..n_in {
                                dw[o * n_in + j] += dy[o] * xv[j];
                            }
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        let wv = &self.nodes[*w].value.data;
                        let dx = grad_slot(&mut grads, *x, n_in);
                        for o in 0..n_out {
                            for j in 0..n_in {
                                dx[j] += wv[o * n_in + j] * dy[o];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in [a, b] {
                        if self.nodes[src].needs_grad {
                            let d = grad_slot(&mut grads, src, dy.len());
                            d.iter_mut().zip(&dy).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let split = self.nodes[*a].value.len();
                    for (src, part) in [(*a, &dy[..split]), (*b, &dy[split..])] {
                        if self.nodes[src].needs_grad {
                            let d = grad_slot(&mut grads, src, part.len());
                            d.iter_mut().zip(part).for_each(|(d, g)| *d += *g);
                        }
                    }
                }
                Op::Scale(x, k) => {
                    let d = grad_slot(&mut grads, *x, dy.len());
                    d.iter_mut().zip(&dy).for_each(|(d, g)| *d += *g * *k);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[*x].value.data;
                    let d = grad_slot(&mut grads, *x, dy.len());
                    for ((d, g), &v) in d.iter_mut().zip(&dy).zip(xv) {
                        let s = sigmoid(v);
                        *d += *g * (s + v * s * (T::ONE - s));
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    xhat,
                    inv_std,
                } => {
                    let c = node.value.c;
                    let plane = node.value.plane();
                    let per = c / groups * plane;
                    if self.nodes[*beta].needs_grad || self.nodes[*gamma].needs_grad {
                        let mut dg = vec![0.0f64; c];
                        let mut db = vec![0.0f64; c];
                        for (i, (g, xh)) in dy.iter().zip(xhat).enumerate() {
                            dg[i / plane] += (*g * *xh).to_f64();
                            db[i / plane] += g.to_f64();
                        }
                        for (src, vals) in [(*gamma, dg), (*beta, db)] {
                            if self.nodes[src].needs_grad {
                                let d = grad_slot(&mut grads, src, c);
                                d.iter_mut()
                                    .zip(vals)
                                    .for_each(|(d, v)| *d += T::from_f64(v));
                            }
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        let gv = &self.nodes[*gamma].value.data;
                        let mut dx = vec![T::ZERO; dy.len()];
                        for (g, is) in inv_std.iter().enumerate().take(*groups) {
                            let range = g * per..(g + 1) * per;
                            let (mut m1, mut m2) = (0.0f64, 0.0f64);
                            for i in range.clone() {
                                let dxh = (dy[i] * gv[i / plane]).to_f64();
                                m1 += dxh;
                                m2 += dxh * xhat[i].to_f64();
                            }
                            m1 /= per as f64;
                            m2 /= per as f64;
                            let is = is.to_f64();
                            for i in range {
                                let dxh = (dy[i] * gv[i / plane]).to_f64();
                                dx[i] = T::from_f64(is * (dxh - m1 - xhat[i].to_f64() * m2));
                            }
                        }
                        let d = grad_slot(&mut grads, *x, dy.len());
                        d.iter_mut().zip(dx).for_each(|(d, v)| *d += v);
                    }
                }
                Op::Film { x, ss } => {
                    let xv = &self.nodes[*x].value;
                    let s = &self.nodes[*ss].value.data;
                    let (c, plane) = (xv.c, xv.plane());
                    if self.nodes[*ss].needs_grad {
                        let mut acc = vec![0.0f64; 2 * c];
                        for (i, (g, v)) in dy.iter().zip(&xv.data).enumerate() {
                            acc[i / plane] += (*g * *v).to_f64();
                            acc[c + i / plane] += g.to_f64();
                        }
                        let d = grad_slot(&mut grads, *ss, 2 * c);
                        d.iter_mut()
                            .zip(acc)
                            .for_each(|(d, v)| *d += T::from_f64(v));
                    }
                    if self.nodes[*x].needs_grad {
                        let d = grad_slot(&mut grads, *x, dy.len());
                        for (i, (d, g)) in d.iter_mut().zip(&dy).enumerate() {
                            *d += *g * (T::ONE + s[i / plane]);
                        }
                    }
                }
                Op::Upsample(x) => {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = xv.shape();
                    let d = grad_slot(&mut grads, *x, xv.len());
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] +=
                                    dy[(ch * 2 * h + y) * 2 * w + xx];
                            }
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
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(
            c,
            h,
            w,
            (0..c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    /// Direct-loop convolution with the same padding rules.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &[f64],
        b: &[f64],
        k: usize,
        stride: usize,
    ) -> Tensor<f64> {
        let cout = b.len();
        let (ho, wo) = (x.h / stride, x.w / stride);
        let mut out = Tensor::zeros(cout, ho, wo);
        let r = (k / 2) as isize;
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride) as isize + ky as isize - r;
                                if iy < 0 || iy >= x.h as isize {
                                    continue;
                                }
                                let ix = ((ox * stride) as isize + kx as isize - r)
                                    .rem_euclid(x.w as isize)
                                    as usize;
                                s += w[((co * x.c + ci) * k + ky) * k + kx]
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix];
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let x = random(&mut rng, 3, 4, 6);
            let w = random(&mut rng, 5, 3, k * k);
            let b = random(&mut rng, 5, 1, 1);
            let mask = [false; 0];
            let mut tape = Tape::new(&mask);
            let (xi, wi, bi) = (
                tape.input(x.clone()),
                tape.input(w.clone()),
                tape.input(b.clone()),
            );
            let y = tape.conv(xi, wi, bi, k, stride);
            let expect = conv_reference(&x, &w.data, &b.data, k, stride);
            assert_eq!(tape.value(y).shape(), expect.shape());
            for (a, e) in tape.value(y).data.iter().zip(&expect.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_gradient_is_closed_form() {
        // L = <g, W x + b>  =>  dL/dW = g x^T, dL/db = g
        let mask = [true, true];
        let w = Tensor::from_vec(2, 3, 1, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let b = Tensor::vector(vec![0.1, -0.2]);
        let x = Tensor::vector(vec![2.0, -1.0, 4.0]);
        let mut tape = Tape::new(&mask);
        let xi = tape.input(x.clone());
        let wi = tape.param(0, &w);
        let bi = tape.param(1, &b);
        let y = tape.linear(xi, wi, bi);
        assert_eq!(
            tape.value(y).data,
            vec![2.0 - 2.0 + 12.0 + 0.1, -2.0 - 0.5 - 0.2]
        );
        let mut grads = vec![vec![0.0; 6], vec![0.0; 2]];
        tape.backward(y, vec![3.0, -2.0], &mut grads);
        assert_eq!(grads[0], vec![6.0, -3.0, 12.0, -4.0, 2.0, -8.0]);
        assert_eq!(grads[1], vec![3.0, -2.0]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mask = [false, true];
        let w = Tensor::from_vec(1, 1, 1, vec![2.0]);
        let b = Tensor::vector(vec![1.0]);
        let mut tape = Tape::new(&mask);
        let xi = tape.input(Tensor::vector(vec![3.0]));
        let wi = tape.param(0, &w);
        let bi = tape.param(1, &b);
        let y = tape.linear(xi, wi, bi);
        let mut grads = vec![vec![0.0], vec![0.0]];
        tape.backward(y, vec![1.0], &mut grads);
        assert_eq!(grads, vec![vec![0.0], vec![1.0]]);
    }
}
