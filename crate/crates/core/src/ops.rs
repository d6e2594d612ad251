//! Forward and adjoint kernels on plain tensors. The tape in
//! [`autodiff`](crate::autodiff) records these; they are also usable directly.

use crate::error::{dim_err, Result};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

fn expect_rank<T: Scalar>(op: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return dim_err(op, format!("expected rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return dim_err("matmul", format!("inner extents {k} vs {k2}"));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        MatView::row_major(0, k),
        b.data(),
        MatView::row_major(0, n),
        T::zero(),
        out.data_mut(),
        MatView::row_major(0, n),
    );
    Ok(out)
}

/// Gradients of `a·b` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = Tensor::zeros(&[m, k]);
    let mut db = Tensor::zeros(&[k, n]);
    // da = dy · bᵀ
    gemm(
        m,
        n,
        k,
        T::one(),
        dy.data(),
        MatView::row_major(0, n),
        b.data(),
        MatView::transposed(0, n),
        T::zero(),
        da.data_mut(),
        MatView::row_major(0, k),
    );
    // db = aᵀ · dy
    gemm(
        k,
        m,
        n,
        T::one(),
        a.data(),
        MatView::transposed(0, k),
        dy.data(),
        MatView::row_major(0, n),
        T::zero(),
        db.data_mut(),
        MatView::row_major(0, n),
    );
    (da, db)
}

/// Batched product `[B,m,k] × [B,k,n] → [B,m,n]`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("bmm", a, 3)?;
    expect_rank("bmm", b, 3)?;
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if bs != bs2 || k != k2 {
        return dim_err("bmm", format!("{:?} × {:?}", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[bs, m, n]);
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            MatView::row_major(i * m * k, k),
            b.data(),
            MatView::row_major(i * k * n, n),
            T::zero(),
            out.data_mut(),
            MatView::row_major(i * m * n, n),
        );
    }
    Ok(out)
}

pub fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let mut da = Tensor::zeros(&[bs, m, k]);
    let mut db = Tensor::zeros(&[bs, k, n]);
    for i in 0..bs {
        gemm(
            m,
            n,
            k,
            T::one(),
            dy.data(),
            MatView::row_major(i * m * n, n),
            b.data(),
            MatView::transposed(i * k * n, n),
            T::zero(),
            da.data_mut(),
            MatView::row_major(i * m * k, k),
        );
        gemm(
            k,
            m,
            n,
            T::one(),
            a.data(),
            MatView::transposed(i * m * k, k),
            dy.data(),
            MatView::row_major(i * m * n, n),
            T::zero(),
            db.data_mut(),
            MatView::row_major(i * k * n, n),
        );
    }
    (da, db)
}

/// Reorders the axes of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
pub fn permute3<T: Scalar>(x: &Tensor<T>, perm: [usize; 3]) -> Result<Tensor<T>> {
    expect_rank("permute3", x, 3)?;
    let mut seen = [false; 3];
    for &p in &perm {
        if p > 2 || seen[p] {
            return dim_err("permute3", format!("invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    let s = x.shape();
    let in_strides = [s[1] * s[2], s[2], 1];
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let st = [in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]];
    let src = x.data();
    let mut data = Vec::with_capacity(x.numel());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * st[0] + j * st[1];
            for l in 0..out_shape[2] {
                data.push(src[base + l * st[2]]);
            }
        }
    }
    Tensor::from_vec(&out_shape, data)
}

pub fn inverse_perm(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn transpose<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("transpose", x, 2)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let src = x.data();
    let mut data = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            data.push(src[i * c + j]);
        }
    }
    Tensor::from_vec(&[c, r], data)
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-shifted softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return dim_err("softmax", format!("axis {axis} for shape {:?}", x.shape()));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    if inner == 1 {
        d.chunks_exact_mut(len.max(1)).for_each(softmax_row);
        return Ok(out);
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for a in 0..len {
                mx = mx.max(d[base + a * inner]);
            }
            let mut total = T::zero();
            for a in 0..len {
                let e = (d[base + a * inner] - mx).exp_nonpos();
                d[base + a * inner] = e;
                total += e;
            }
            let inv = T::one() / total;
            for a in 0..len {
                d[base + a * inner] *= inv;
            }
        }
    }
    Ok(out)
}

const LANES: usize = 8;

// Reductions with independent accumulators so the compiler can keep them in
// vector registers.
fn lane_reduce<T: Scalar>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = f(acc[l], c[l]);
        }
    }
    let mut r = init;
    for &a in acc.iter().chain(tail) {
        r = f(r, a);
    }
    r
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mx = lane_reduce(row, T::neg_infinity(), |a, b| if b > a { b } else { a });
    row.iter_mut().for_each(|v| *v = (*v - mx).exp_nonpos());
    let inv = T::one() / lane_reduce(row, T::zero(), |a, b| a + b);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `out = scale · y ⊙ (dy − y·dy)` for one row.
fn softmax_row_backward<T: Scalar>(y: &[T], dy: &[T], out: &mut [T], scale: T) {
    for ((o, &a), &b) in out.iter_mut().zip(y).zip(dy) {
        *o = a * b;
    }
    let dot = lane_reduce(out, T::zero(), |a, b| a + b);
    for ((o, &a), &b) in out.iter_mut().zip(y).zip(dy) {
        *o = scale * a * (b - dot);
    }
}

/// `dx = y ⊙ (dy − Σ_axis dy⊙y)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut dx = Tensor::zeros(y.shape());
    let (yd, gd) = (y.data(), dy.data());
    let out = dx.data_mut();
    if inner == 1 {
        let n = len.max(1);
        for ((o, yr), gr) in out.chunks_exact_mut(n).zip(yd.chunks_exact(n)).zip(gd.chunks_exact(n)) {
            softmax_row_backward(yr, gr, o, T::one());
        }
        return dx;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                let idx = base + a * inner;
                dot += yd[idx] * gd[idx];
            }
            for a in 0..len {
                let idx = base + a * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    dx
}

/// Scaled dot-product attention per head: `softmax(scale · Q Kᵀ) V` on
/// `[h,T,d] × [h,S,d] × [h,S,e]`. Also returns the weights `[h,T,S]`, which
/// the backward pass reuses.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    for t in [q, k, v] {
        expect_rank("attention", t, 3)?;
    }
    let (h, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (s, e) = (k.shape()[1], v.shape()[2]);
    if k.shape() != [h, s, d] || v.shape()[..2] != [h, s] {
        return dim_err("attention", format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()));
    }
    let mut probs = Tensor::zeros(&[h, t, s]);
    let mut out = Tensor::zeros(&[h, t, e]);
    for i in 0..h {
        gemm(
            t,
            d,
            s,
            scale,
            q.data(),
            MatView::row_major(i * t * d, d),
            k.data(),
            MatView::transposed(i * s * d, d),
            T::zero(),
            probs.data_mut(),
            MatView::row_major(i * t * s, s),
        );
    }
    if s > 0 {
        probs.data_mut().chunks_exact_mut(s).for_each(softmax_row);
    }
    for i in 0..h {
        gemm(
            t,
            s,
            e,
            T::one(),
            probs.data(),
            MatView::row_major(i * t * s, s),
            v.data(),
            MatView::row_major(i * s * e, e),
            T::zero(),
            out.data_mut(),
            MatView::row_major(i * t * e, e),
        );
    }
    Ok((out, probs))
}

/// Gradients of [`attention`] with respect to `q`, `k`, `v`.
pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dout: &Tensor<T>,
    scale: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (h, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (s, e) = (k.shape()[1], v.shape()[2]);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); t * s];
    let mut ds = vec![T::zero(); t * s];
    for i in 0..h {
        let (po, qo, ko, vo, oo) = (i * t * s, i * t * d, i * s * d, i * s * e, i * t * e);
        // dV = Pᵀ dO
        gemm(s, t, e, T::one(), probs.data(), MatView::transposed(po, s), dout.data(), MatView::row_major(oo, e), T::zero(), dv.data_mut(), MatView::row_major(vo, e));
        // dP = dO Vᵀ
        gemm(t, e, s, T::one(), dout.data(), MatView::row_major(oo, e), v.data(), MatView::transposed(vo, e), T::zero(), &mut dp, MatView::row_major(0, s));
        if s > 0 {
            let pr = &probs.data()[po..po + t * s];
            for ((o, y), g) in ds.chunks_exact_mut(s).zip(pr.chunks_exact(s)).zip(dp.chunks_exact(s)) {
                softmax_row_backward(y, g, o, scale);
            }
        }
        // dQ = dS K, dK = dSᵀ Q
        gemm(t, s, d, T::one(), &ds, MatView::row_major(0, s), k.data(), MatView::row_major(ko, d), T::zero(), dq.data_mut(), MatView::row_major(qo, d));
        gemm(s, t, d, T::one(), &ds, MatView::transposed(0, s), q.data(), MatView::row_major(qo, d), T::zero(), dk.data_mut(), MatView::row_major(ko, d));
    }
    (dq, dk, dv)
}

/// Geometry of a channel-last 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return dim_err(
                "conv2d",
                format!("input {input:?} must be [H,W,C], kernel {kernel:?} [kh,kw,Cin/g,Cout]"),
            );
        }
        let (h, w, cin) = (input[0], input[1], input[2]);
        let (kh, kw, cg, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if stride == 0 {
            return dim_err("conv2d", "stride must be positive");
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return dim_err(
                "conv2d",
                format!("invalid group count {groups} for Cin={cin}, Cout={cout}"),
            );
        }
        if cg != cin / groups {
            return dim_err(
                "conv2d",
                format!("kernel has {cg} input channels per group, expected {}", cin / groups),
            );
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return dim_err(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * padding, w + 2 * padding),
            );
        }
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            padding,
            groups,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn cg(&self) -> usize {
        self.cin / self.groups
    }

    fn og(&self) -> usize {
        self.cout / self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.cg() == 1 && self.og() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0 && self.groups == 1
    }

    /// Input coordinate for an output coordinate and kernel tap, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Patch matrix `[oh·ow, kh·kw·cg]` for one group.
    fn im2col<T: Scalar>(&self, x: &[T], g: usize, cols: &mut Vec<T>) {
        let cg = self.cg();
        let kc = self.kh * self.kw * cg;
        cols.clear();
        cols.resize(self.oh * self.ow * kc, T::zero());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = (oy * self.ow + ox) * kc;
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let s = (iy * self.w + ix) * self.cin + g * cg;
                        let d = row + (ky * self.kw + kx) * cg;
                        cols[d..d + cg].copy_from_slice(&x[s..s + cg]);
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], g: usize, dx: &mut [T]) {
        let cg = self.cg();
        let kc = self.kh * self.kw * cg;
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = (oy * self.ow + ox) * kc;
                for ky in 0..self.kh {
                    let Some(iy) = self.src(oy, ky, self.h) else { continue };
                    for kx in 0..self.kw {
                        let Some(ix) = self.src(ox, kx, self.w) else { continue };
                        let s = (iy * self.w + ix) * self.cin + g * cg;
                        let d = row + (ky * self.kw + kx) * cg;
                        for c in 0..cg {
                            dx[s + c] += cols[d + c];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[H,W,Cin]` with a `[kh,kw,Cin/g,Cout]` kernel.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geo = ConvGeom::new(x.shape(), kernel.shape(), stride, padding, groups)?;
    let mut out = Tensor::zeros(&[geo.oh, geo.ow, geo.cout]);
    if geo.is_depthwise() {
        depthwise_forward(&geo, x.data(), kernel.data(), out.data_mut());
        return Ok(out);
    }
    let p = geo.oh * geo.ow;
    if geo.is_pointwise() {
        gemm(
            p,
            geo.cin,
            geo.cout,
            T::one(),
            x.data(),
            MatView::row_major(0, geo.cin),
            kernel.data(),
            MatView::row_major(0, geo.cout),
            T::zero(),
            out.data_mut(),
            MatView::row_major(0, geo.cout),
        );
        return Ok(out);
    }
    let kc = geo.kh * geo.kw * geo.cg();
    let og = geo.og();
    let mut cols = Vec::new();
    for g in 0..geo.groups {
        geo.im2col(x.data(), g, &mut cols);
        gemm(
            p,
            kc,
            og,
            T::one(),
            &cols,
            MatView::row_major(0, kc),
            kernel.data(),
            MatView::row_major(g * og, geo.cout),
            T::zero(),
            out.data_mut(),
            MatView::row_major(g * og, geo.cout),
        );
    }
    Ok(out)
}

fn depthwise_forward<T: Scalar>(geo: &ConvGeom, x: &[T], k: &[T], out: &mut [T]) {
    let c = geo.cin;
    for oy in 0..geo.oh {
        for ox in 0..geo.ow {
            let o = (oy * geo.ow + ox) * c;
            let acc = &mut out[o..o + c];
            for ky in 0..geo.kh {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                for kx in 0..geo.kw {
                    let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                    let xs = &x[(iy * geo.w + ix) * c..][..c];
                    let ks = &k[(ky * geo.kw + kx) * c..][..c];
                    for ((a, &xv), &kv) in acc.iter_mut().zip(xs).zip(ks) {
                        *a += xv * kv;
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(geo: &ConvGeom, x: &[T], k: &[T], dy: &[T], dx: &mut [T], dk: &mut [T]) {
    let c = geo.cin;
    for oy in 0..geo.oh {
        for ox in 0..geo.ow {
            let g = &dy[(oy * geo.ow + ox) * c..][..c];
            for ky in 0..geo.kh {
                let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                for kx in 0..geo.kw {
                    let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                    let xo = (iy * geo.w + ix) * c;
                    let ko = (ky * geo.kw + kx) * c;
                    for ch in 0..c {
                        dx[xo + ch] += g[ch] * k[ko + ch];
                        dk[ko + ch] += g[ch] * x[xo + ch];
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let geo = ConvGeom::new(x.shape(), kernel.shape(), stride, padding, groups)?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    if geo.is_depthwise() {
        depthwise_backward(&geo, x.data(), kernel.data(), dy.data(), dx.data_mut(), dk.data_mut());
        return Ok((dx, dk));
    }
    let p = geo.oh * geo.ow;
    if geo.is_pointwise() {
        let (cin, cout) = (geo.cin, geo.cout);
        gemm(
            cin,
            p,
            cout,
            T::one(),
            x.data(),
            MatView::transposed(0, cin),
            dy.data(),
            MatView::row_major(0, cout),
            T::zero(),
            dk.data_mut(),
            MatView::row_major(0, cout),
        );
        gemm(
            p,
            cout,
            cin,
            T::one(),
            dy.data(),
            MatView::row_major(0, cout),
            kernel.data(),
            MatView::transposed(0, cout),
            T::zero(),
            dx.data_mut(),
            MatView::row_major(0, cin),
        );
        return Ok((dx, dk));
    }
    let kc = geo.kh * geo.kw * geo.cg();
    let og = geo.og();
    let mut cols = Vec::new();
    let mut dcols = vec![T::zero(); p * kc];
    for g in 0..geo.groups {
        geo.im2col(x.data(), g, &mut cols);
        // dW[:, group] = colsᵀ · dy[:, group]
        gemm(
            kc,
            p,
            og,
            T::one(),
            &cols,
            MatView::transposed(0, kc),
            dy.data(),
            MatView::row_major(g * og, geo.cout),
            T::zero(),
            dk.data_mut(),
            MatView::row_major(g * og, geo.cout),
        );
        // dcols = dy[:, group] · W[:, group]ᵀ
        gemm(
            p,
            og,
            kc,
            T::one(),
            dy.data(),
            MatView::row_major(g * og, geo.cout),
            kernel.data(),
            MatView::transposed(g * og, geo.cout),
            T::zero(),
            &mut dcols,
            MatView::row_major(0, kc),
        );
        geo.col2im(&dcols, g, dx.data_mut());
    }
    Ok((dx, dk))
}

/// Row statistics used by both passes of layer normalization.
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes over the last axis, then applies per-channel gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().unwrap_or(&0);
    if c == 0 || gain.shape() != [c] || bias.shape() != [c] {
        return dim_err(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        );
    }
    let rows = x.numel() / c;
    let cf = T::from_usize_lossy(c);
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x.data()[r * c..(r + 1) * c];
        let mean = xs.iter().copied().sum::<T>() / cf;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            let h = (xs[j] - mean) * is;
            xhat.data_mut()[r * c + j] = h;
            out.data_mut()[r * c + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gain.numel();
    let rows = dy.numel() / c;
    let cf = T::from_usize_lossy(c);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    let xh = cache.xhat.data();
    for r in 0..rows {
        let g = &dy.data()[r * c..(r + 1) * c];
        let h = &xh[r * c..(r + 1) * c];
        let mut mean_d = T::zero();
        let mut mean_dh = T::zero();
        for j in 0..c {
            let d = g[j] * gain.data()[j];
            mean_d += d;
            mean_dh += d * h[j];
            dg.data_mut()[j] += g[j] * h[j];
            db.data_mut()[j] += g[j];
        }
        mean_d /= cf;
        mean_dh /= cf;
        let is = cache.inv_std[r];
        for j in 0..c {
            let d = g[j] * gain.data()[j];
            dx.data_mut()[r * c + j] = is * (d - mean_d - h[j] * mean_dh);
        }
    }
    (dx, dg, db)
}

/// Adds a `[C]` vector to every row of a tensor whose last extent is `C`.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if bias.shape() != [c] {
        return dim_err("add_bias", format!("x {:?}, bias {:?}", x.shape(), bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn bias_backward<T: Scalar>(dy: &Tensor<T>, c: usize) -> Tensor<T> {
    let mut db = Tensor::zeros(&[c]);
    for row in dy.data().chunks_exact(c) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    db
}

/// Concatenates tensors along their last axis; leading extents must agree.
pub fn concat_last<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = parts.first() else {
        return dim_err("concat_last", "no inputs");
    };
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    if first.rank() == 0 {
        return dim_err("concat_last", "scalar input");
    }
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return dim_err("concat_last", format!("{:?} vs {:?}", p.shape(), first.shape()));
        }
        widths.push(*p.shape().last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, data)
}

/// Channels `[start, start+len)` of the last axis.
pub fn narrow_last<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if start + len > c {
        return dim_err("narrow_last", format!("range {start}..{} of {c}", start + len));
    }
    let mut data = Vec::with_capacity(x.numel() / c.max(1) * len);
    for row in x.data().chunks_exact(c) {
        data.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::from_vec(&shape, data)
}

/// Nearest-neighbour 2× upsampling of `[H,W,C]`.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank("upsample_nearest2", x, 3)?;
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[2 * h, 2 * w, c]);
    for y in 0..2 * h {
        for xx in 0..2 * w {
            let s = ((y / 2) * w + xx / 2) * c;
            let d = (y * 2 * w + xx) * c;
            out.data_mut()[d..d + c].copy_from_slice(&x.data()[s..s + c]);
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_nearest2`]: 2×2 sum pooling.
pub fn upsample_nearest2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let (h2, w2, c) = (dy.shape()[0], dy.shape()[1], dy.shape()[2]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[h, w, c]);
    for y in 0..h2 {
        for xx in 0..w2 {
            let s = (y * w2 + xx) * c;
            let d = ((y / 2) * w + xx / 2) * c;
            for ch in 0..c {
                dx.data_mut()[d + ch] += dy.data()[s + ch];
            }
        }
    }
    dx
}

/// Gathers rows of a `[R, C]` tensor; `None` yields a zero row.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, idx: &[Option<usize>]) -> Result<Tensor<T>> {
    expect_rank("gather_rows", x, 2)?;
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * c);
    for i in idx {
        match *i {
            Some(i) if i < r => data.extend_from_slice(&x.data()[i * c..(i + 1) * c]),
            Some(i) => return dim_err("gather_rows", format!("row {i} of {r}")),
            None => data.extend(std::iter::repeat(T::zero()).take(c)),
        }
    }
    Tensor::from_vec(&[idx.len(), c], data)
}

pub fn scatter_rows<T: Scalar>(dy: &Tensor<T>, idx: &[Option<usize>], rows: usize) -> Tensor<T> {
    let c = dy.shape()[1];
    let mut dx = Tensor::zeros(&[rows, c]);
    for (k, i) in idx.iter().enumerate() {
        if let Some(i) = *i {
            for ch in 0..c {
                dx.data_mut()[i * c + ch] += dy.data()[k * c + ch];
            }
        }
    }
    dx
}
