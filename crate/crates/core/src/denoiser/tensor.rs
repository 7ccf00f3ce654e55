//! Single-sample feature maps and the layer kernels of the denoiser, with
//! hand-written backward passes.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of the network: `f32` for training, `f64` for
/// verification.
pub trait Scalar: Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `C = alpha·A·B + beta·C` on strided matrices, see `matrixmultiply`.
    ///
    /// # Safety
    /// Strides and dimensions must describe valid regions of the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view into a slice: `rows × cols` with row stride `ld`.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            ld: cols,
            transposed: false,
        }
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, ld: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            ld,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            assert!((self.rows - 1) * self.ld + self.cols <= self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c`, `c` row-major with row stride `ldc`.
pub fn gemm<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "inner dimensions differ");
    a.check();
    b.check();
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "output view out of bounds");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: all three views were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}

/// Feature map of one sample, laid out `[channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Fmap<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Fmap {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Fmap { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, ch: usize) -> &[T] {
        let p = self.plane();
        &self.data[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, ch: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[ch * p..(ch + 1) * p]
    }
}

/// Target size of one im2col strip, in elements.
const STRIP_ELEMS: usize = 1 << 20;

fn strip_rows(cin: usize, h: usize, w: usize) -> usize {
    (STRIP_ELEMS / (cin * 9 * w).max(1)).clamp(1, h)
}

/// im2col of rows `r0..r1` for a 3×3 kernel with zero padding 1.
fn im2col_strip<T: Scalar>(x: &Fmap<T>, r0: usize, r1: usize, cols: &mut Vec<T>) {
    let (h, w) = (x.h, x.w);
    let n = (r1 - r0) * w;
    cols.clear();
    cols.resize(x.c * 9 * n, T::zero());
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row_out = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for r in r0..r1 {
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let srow = &src[sr as usize * w..][..w];
                    let drow = &mut row_out[(r - r0) * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_strip`], accumulated into `dx`.
fn col2im_strip<T: Scalar>(dcols: &[T], r0: usize, r1: usize, dx: &mut Fmap<T>) {
    let (h, w) = (dx.h, dx.w);
    let n = (r1 - r0) * w;
    for ci in 0..dx.c {
        let dst = dx.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row_in = &dcols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for r in r0..r1 {
                    let sr = r as isize + ky as isize - 1;
                    if sr < 0 || sr >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sr as usize * w..][..w];
                    let g = &row_in[(r - r0) * w..][..w];
                    match kx {
                        0 => drow[..w - 1].iter_mut().zip(&g[1..]).for_each(|(d, v)| *d += *v),
                        1 => drow.iter_mut().zip(g).for_each(|(d, v)| *d += *v),
                        _ => drow[1..].iter_mut().zip(&g[..w - 1]).for_each(|(d, v)| *d += *v),
                    }
                }
            }
        }
    }
}

/// 3×3 convolution, stride 1, zero padding 1, no bias.
/// `weight` is `[cout][cin][3][3]`.
pub fn conv3x3<T: Scalar>(x: &Fmap<T>, weight: &[T], cout: usize) -> Fmap<T> {
    let cin = x.c;
    assert_eq!(weight.len(), cout * cin * 9);
    let mut y = Fmap::zeros(cout, x.h, x.w);
    let plane = x.plane();
    let step = strip_rows(cin, x.h, x.w);
    let mut cols = Vec::new();
    let mut r0 = 0;
    while r0 < x.h {
        let r1 = (r0 + step).min(x.h);
        im2col_strip(x, r0, r1, &mut cols);
        let n = (r1 - r0) * x.w;
        gemm(
            T::one(),
            Mat::new(weight, cout, cin * 9),
            Mat::new(&cols, cin * 9, n),
            T::zero(),
            &mut y.data[r0 * x.w..],
            plane,
        );
        r0 = r1;
    }
    y
}

/// Gradients of [`conv3x3`]: accumulates into `dweight`, returns `dx`
/// when `want_dx`.
pub fn conv3x3_backward<T: Scalar>(
    x: &Fmap<T>,
    weight: &[T],
    dy: &Fmap<T>,
    dweight: &mut [T],
    want_dx: bool,
) -> Option<Fmap<T>> {
    let cin = x.c;
    let cout = dy.c;
    let plane = x.plane();
    let step = strip_rows(cin, x.h, x.w);
    let mut dx = want_dx.then(|| Fmap::zeros(cin, x.h, x.w));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut r0 = 0;
    while r0 < x.h {
        let r1 = (r0 + step).min(x.h);
        let n = (r1 - r0) * x.w;
        im2col_strip(x, r0, r1, &mut cols);
        let dy_strip = Mat::strided(&dy.data[r0 * x.w..], cout, n, plane);
        gemm(T::one(), dy_strip, Mat::new(&cols, cin * 9, n).t(), T::one(), dweight, cin * 9);
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(cin * 9 * n, T::zero());
            gemm(T::one(), Mat::new(weight, cout, cin * 9).t(), dy_strip, T::zero(), &mut dcols, n);
            col2im_strip(&dcols, r0, r1, dx);
        }
        r0 = r1;
    }
    dx
}

/// 1×1 convolution with bias; `weight` is `[cout][cin]`.
pub fn conv1x1<T: Scalar>(x: &Fmap<T>, weight: &[T], bias: &[T]) -> Fmap<T> {
    let cout = bias.len();
    let mut y = Fmap::zeros(cout, x.h, x.w);
    for (co, &b) in bias.iter().enumerate() {
        y.channel_mut(co).iter_mut().for_each(|v| *v = b);
    }
    gemm(
        T::one(),
        Mat::new(weight, cout, x.c),
        Mat::new(&x.data, x.c, x.plane()),
        T::one(),
        &mut y.data,
        x.plane(),
    );
    y
}

pub fn conv1x1_backward<T: Scalar>(x: &Fmap<T>, weight: &[T], dy: &Fmap<T>, dweight: &mut [T], dbias: &mut [T]) -> Fmap<T> {
    let cout = dy.c;
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.channel(co).iter().copied().sum::<T>();
    }
    let p = x.plane();
    gemm(T::one(), Mat::new(&dy.data, cout, p), Mat::new(&x.data, x.c, p).t(), T::one(), dweight, x.c);
    let mut dx = Fmap::zeros(x.c, x.h, x.w);
    gemm(T::one(), Mat::new(weight, cout, x.c).t(), Mat::new(&dy.data, cout, p), T::zero(), &mut dx.data, p);
    dx
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel normalisation statistics.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Fmap<T>,
    pub inv_std: Vec<T>,
}

/// Normalises each channel over its spatial plane; optionally updates the
/// running statistics `(mean, var)` with momentum 0.1 and unbiased variance.
pub fn batchnorm_train<T: Scalar>(
    x: &Fmap<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&mut [T], &mut [T])>,
) -> (Fmap<T>, BnCache<T>) {
    let p = x.plane();
    let n = T::of(p as f64);
    let mut y = Fmap::zeros(x.c, x.h, x.w);
    let mut xhat = Fmap::zeros(x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for ch in 0..x.c {
        let src = x.channel(ch);
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + T::of(BN_EPS)).sqrt();
        let (g, b) = (gamma[ch], beta[ch]);
        let xh = xhat.channel_mut(ch);
        for (o, &v) in xh.iter_mut().zip(src) {
            *o = (v - mean) * is;
        }
        for (o, &v) in y.channel_mut(ch).iter_mut().zip(xhat.channel(ch)) {
            *o = g * v + b;
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    if let Some((rm, rv)) = running {
        let m = T::of(BN_MOMENTUM);
        let unbias = if p > 1 { n / (n - T::one()) } else { T::one() };
        for ch in 0..x.c {
            rm[ch] = (T::one() - m) * rm[ch] + m * means[ch];
            rv[ch] = (T::one() - m) * rv[ch] + m * vars[ch] * unbias;
        }
    }
    (y, BnCache { xhat, inv_std })
}

pub fn batchnorm_eval<T: Scalar>(x: &Fmap<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> Fmap<T> {
    let mut y = Fmap::zeros(x.c, x.h, x.w);
    for ch in 0..x.c {
        let scale = gamma[ch] / (var[ch] + T::of(BN_EPS)).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for (o, &v) in y.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
            *o = v * scale + shift;
        }
    }
    y
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Fmap<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Fmap<T> {
    let p = dy.plane();
    let n = T::of(p as f64);
    let mut dx = Fmap::zeros(dy.c, dy.h, dy.w);
    for ch in 0..dy.c {
        let g = dy.channel(ch);
        let xh = cache.xhat.channel(ch);
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        dgamma[ch] += sum_gx;
        dbeta[ch] += sum_g;
        let k = gamma[ch] * cache.inv_std[ch];
        let (mg, mgx) = (sum_g / n, sum_gx / n);
        for ((o, &gv), &xv) in dx.channel_mut(ch).iter_mut().zip(g).zip(xh) {
            *o = k * (gv - mg - xv * mgx);
        }
    }
    dx
}

pub fn relu_in_place<T: Scalar>(x: &mut Fmap<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` where the ReLU output was not positive.
pub fn relu_backward_in_place<T: Scalar>(out: &Fmap<T>, dy: &mut Fmap<T>) {
    dy.data.iter_mut().zip(&out.data).for_each(|(g, &o)| {
        if o <= T::zero() {
            *g = T::zero()
        }
    });
}

/// 2×2 max pooling, stride 2; returns the argmax offset `0..4` per output.
pub fn maxpool2<T: Scalar>(x: &Fmap<T>) -> (Fmap<T>, Vec<u8>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Fmap::zeros(x.c, h2, w2);
    let mut arg = vec![0u8; x.c * h2 * w2];
    for ch in 0..x.c {
        let src = x.channel(ch);
        for r in 0..h2 {
            for c in 0..w2 {
                let base = 2 * r * x.w + 2 * c;
                let cand = [src[base], src[base + 1], src[base + x.w], src[base + x.w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                let o = ch * h2 * w2 + r * w2 + c;
                y.data[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Fmap<T>, arg: &[u8], h: usize, w: usize) -> Fmap<T> {
    let mut dx = Fmap::zeros(dy.c, h, w);
    let (h2, w2) = (dy.h, dy.w);
    for ch in 0..dy.c {
        for r in 0..h2 {
            for c in 0..w2 {
                let o = ch * h2 * w2 + r * w2 + c;
                let k = arg[o] as usize;
                let at = ch * h * w + (2 * r + k / 2) * w + 2 * c + k % 2;
                dx.data[at] += dy.data[o];
            }
        }
    }
    dx
}

/// 2×2 transposed convolution, stride 2, with bias.
/// `weight` is `[cin][cout][2][2]`.
pub fn upconv2<T: Scalar>(x: &Fmap<T>, weight: &[T], bias: &[T]) -> Fmap<T> {
    let cout = bias.len();
    let p = x.plane();
    let mut tmp = vec![T::zero(); cout * 4 * p];
    gemm(T::one(), Mat::new(weight, x.c, cout * 4).t(), Mat::new(&x.data, x.c, p), T::zero(), &mut tmp, p);
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut y = Fmap::zeros(cout, h2, w2);
    for co in 0..cout {
        for k in 0..4 {
            let (a, b) = (k / 2, k % 2);
            let src = &tmp[(co * 4 + k) * p..][..p];
            let dst = y.channel_mut(co);
            for r in 0..x.h {
                for c in 0..x.w {
                    dst[(2 * r + a) * w2 + 2 * c + b] = src[r * x.w + c] + bias[co];
                }
            }
        }
    }
    y
}

pub fn upconv2_backward<T: Scalar>(x: &Fmap<T>, weight: &[T], dy: &Fmap<T>, dweight: &mut [T], dbias: &mut [T]) -> Fmap<T> {
    let cout = dy.c;
    let p = x.plane();
    let w2 = dy.w;
    let mut tmp = vec![T::zero(); cout * 4 * p];
    for co in 0..cout {
        let src = dy.channel(co);
        dbias[co] += src.iter().copied().sum::<T>();
        for k in 0..4 {
            let (a, b) = (k / 2, k % 2);
            let dst = &mut tmp[(co * 4 + k) * p..][..p];
            for r in 0..x.h {
                for c in 0..x.w {
                    dst[r * x.w + c] = src[(2 * r + a) * w2 + 2 * c + b];
                }
            }
        }
    }
    gemm(T::one(), Mat::new(&x.data, x.c, p), Mat::new(&tmp, cout * 4, p).t(), T::one(), dweight, cout * 4);
    let mut dx = Fmap::zeros(x.c, x.h, x.w);
    gemm(T::one(), Mat::new(weight, x.c, cout * 4), Mat::new(&tmp, cout * 4, p), T::zero(), &mut dx.data, p);
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Fmap<T>, b: &Fmap<T>) -> Fmap<T> {
    assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Fmap::from_vec(a.c + b.c, a.h, a.w, data)
}

pub fn split<T: Scalar>(x: Fmap<T>, first: usize) -> (Fmap<T>, Fmap<T>) {
    let cut = first * x.plane();
    let (h, w, c) = (x.h, x.w, x.c);
    let mut data = x.data;
    let second = data.split_off(cut);
    (Fmap::from_vec(first, h, w, data), Fmap::from_vec(c - first, h, w, second))
}
