//! Network layers with hand-written reverse-mode differentiation.
//!
//! Activations are `N x C x H x W` batches. Every layer caches what its
//! backward pass needs during `forward` and accumulates parameter gradients
//! in `backward`; callers zero gradients between steps.

use super::real::{gemm, Real};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, b: usize) -> &[T] {
        let len = self.image_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn image_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.image_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![T::zero(); len])
    }

    /// Centered uniform initialisation with the He bound `sqrt(6 / fan_in)`.
    pub fn he_uniform(len: usize, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::new(
            (0..len)
                .map(|_| T::from_f64(rng.uniform_range(-bound, bound)))
                .collect(),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn sgd_step(&mut self, lr: T) {
        for (v, g) in self.value.iter_mut().zip(&self.grad) {
            *v -= lr * *g;
        }
    }
}

/// Named view of a stored tensor, used by the optimizer, the checkpoint
/// writer and gradient checks.
pub struct TensorSlot<'a, T> {
    pub name: String,
    pub value: &'a mut Vec<T>,
    /// `None` for non-trainable buffers (batch-norm running statistics).
    pub grad: Option<&'a mut Vec<T>>,
}

fn param_slot<'a, T>(prefix: &str, name: &str, p: &'a mut Param<T>) -> TensorSlot<'a, T> {
    TensorSlot {
        name: format!("{prefix}.{name}"),
        value: &mut p.value,
        grad: Some(&mut p.grad),
    }
}

#[cfg(test)]
const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Width of the fixed-size row chunks the 3x3 kernels accumulate in.
const LANES: usize = 16;

#[inline]
fn padded_width(w: usize) -> usize {
    w + 2 + LANES
}

/// Copies `c` planes into zero-padded planes with one border pixel on every
/// side and `LANES` spare columns on the right, so row chunks never need
/// bounds handling.
fn pad_planes<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let wp = padded_width(w);
    let plane = (h + 2) * wp;
    let mut out = vec![T::zero(); c * plane];
    for ch in 0..c {
        for y in 0..h {
            let dst = ch * plane + (y + 1) * wp + 1;
            out[dst..dst + w].copy_from_slice(&x[ch * h * w + y * w..ch * h * w + (y + 1) * w]);
        }
    }
    out
}

/// `acc + a * b`, fused when `FUSED`.
#[inline(always)]
fn madd<T: Real, const FUSED: bool>(acc: T, a: T, b: T) -> T {
    if FUSED {
        a.mul_add(b, acc)
    } else {
        acc + a * b
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// Runs `$body` with AVX2/FMA code generation when the CPU supports it.
macro_rules! simd_dispatch {
    ($(#[$meta:meta])* fn $name:ident / $avx:ident => $body:ident<T>($($arg:ident: $ty:ty),* $(,)?)) => {
        $(#[$meta])*
        fn $name<T: Real>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                if has_avx2_fma() {
                    // SAFETY: the features were detected at runtime.
                    unsafe { return $avx($($arg),*) }
                }
            }
            $body::<T, false>($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $avx<T: Real>($($arg: $ty),*) {
            $body::<T, true>($($arg),*)
        }
    };
}

simd_dispatch! {
    /// `out[o][y][x] += sum_i sum_t k[(o * c_in + i) * 9 + t] * xp[i][y + ty][x + tx]`
    /// over padded input planes, with `t = 3 * ty + tx`.
    fn correlate3x3 / correlate3x3_avx2 => correlate3x3_body<T>(
        xp: &[T],
        c_in: usize,
        h: usize,
        w: usize,
        k: &[T],
        c_out: usize,
        out: &mut [T],
    )
}

#[inline(always)]
fn correlate3x3_body<T: Real, const FUSED: bool>(
    xp: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[T],
    c_out: usize,
    out: &mut [T],
) {
    let mut o = 0;
    while o + 4 <= c_out {
        correlate_block::<T, 4, FUSED>(xp, c_in, h, w, k, o, out);
        o += 4;
    }
    while o < c_out {
        correlate_block::<T, 1, FUSED>(xp, c_in, h, w, k, o, out);
        o += 1;
    }
}

/// Output channels `o0..o0 + OB`, sharing every input row load.
#[inline(always)]
fn correlate_block<T: Real, const OB: usize, const FUSED: bool>(
    xp: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: &[T],
    o0: usize,
    out: &mut [T],
) {
    let wp = padded_width(w);
    let plane = (h + 2) * wp;
    let hw = h * w;
    for y in 0..h {
        let mut x0 = 0;
        while x0 < w {
            let mut acc = [[T::zero(); LANES]; OB];
            for i in 0..c_in {
                let mut kv = [[T::zero(); 9]; OB];
                for (b, kb) in kv.iter_mut().enumerate() {
                    let at = ((o0 + b) * c_in + i) * 9;
                    kb.copy_from_slice(&k[at..at + 9]);
                }
                let base = i * plane + y * wp + x0;
                for ty in 0..3 {
                    let row: &[T; LANES + 2] = xp[base + ty * wp..base + ty * wp + LANES + 2]
                        .try_into()
                        .expect("padded row");
                    for tx in 0..3 {
                        for b in 0..OB {
                            let kk = kv[b][ty * 3 + tx];
                            for j in 0..LANES {
                                acc[b][j] = madd::<T, FUSED>(acc[b][j], kk, row[tx + j]);
                            }
                        }
                    }
                }
            }
            let len = LANES.min(w - x0);
            for (b, a) in acc.iter().enumerate() {
                let at = (o0 + b) * hw + y * w + x0;
                for (d, v) in out[at..at + len].iter_mut().zip(a) {
                    *d += *v;
                }
            }
            x0 += LANES;
        }
    }
}

/// Rows `(i * 9 + t)` of `col` hold padded plane `i` shifted by tap `t`.
fn im2col_padded<T: Real>(xp: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let wp = padded_width(w);
    let plane = (h + 2) * wp;
    let hw = h * w;
    for i in 0..c {
        for t in 0..9 {
            let (ty, tx) = (t / 3, t % 3);
            let dst = &mut col[(i * 9 + t) * hw..(i * 9 + t + 1) * hw];
            for y in 0..h {
                let src = i * plane + (y + ty) * wp + tx;
                dst[y * w..(y + 1) * w].copy_from_slice(&xp[src..src + w]);
            }
        }
    }
}

/// Kernel for the input gradient: transposed channels, flipped taps.
fn flip_kernel<T: Real>(k: &[T], c_in: usize, c_out: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k.len()];
    for o in 0..c_out {
        for i in 0..c_in {
            for t in 0..9 {
                out[(i * c_out + o) * 9 + 8 - t] = k[(o * c_in + i) * 9 + t];
            }
        }
    }
    out
}

simd_dispatch! {
    /// `acc[t] += sum_{y,x} g[y][x] * xp[y + ty][x + tx]` for one plane pair.
    fn tap_dots / tap_dots_avx2 => tap_dots_body<T>(g: &[T], xp: &[T], h: usize, w: usize, acc: &mut [T])
}

#[inline(always)]
fn tap_dots_body<T: Real, const FUSED: bool>(g: &[T], xp: &[T], h: usize, w: usize, acc: &mut [T]) {
    let wp = padded_width(w);
    for ty in 0..3 {
        let mut l0 = [T::zero(); LANES];
        let mut l1 = [T::zero(); LANES];
        let mut l2 = [T::zero(); LANES];
        let mut tail = [T::zero(); 3];
        for y in 0..h {
            let grow = &g[y * w..(y + 1) * w];
            let start = (y + ty) * wp;
            let mut x0 = 0;
            while x0 + LANES <= w {
                let a: &[T; LANES] = grow[x0..x0 + LANES].try_into().expect("chunk");
                let r: &[T; LANES + 2] =
                    xp[start + x0..start + x0 + LANES + 2].try_into().expect("padded row");
                for (tx, l) in [&mut l0, &mut l1, &mut l2].into_iter().enumerate() {
                    for j in 0..LANES {
                        l[j] = madd::<T, FUSED>(l[j], a[j], r[tx + j]);
                    }
                }
                x0 += LANES;
            }
            for x in x0..w {
                for (tx, t) in tail.iter_mut().enumerate() {
                    *t = madd::<T, FUSED>(*t, grow[x], xp[start + x + tx]);
                }
            }
        }
        for (tx, l) in [l0, l1, l2].iter().enumerate() {
            acc[ty * 3 + tx] += l.iter().copied().sum::<T>() + tail[tx];
        }
    }
}

/// Dense 3x3 convolution, stride 1, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv3x3<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out x c_in x 9`
    pub weight: Param<T>,
    pub bias: Param<T>,
    padded: Vec<T>,
    in_shape: (usize, usize, usize, usize),
}

impl<T: Real> Conv3x3<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            c_in,
            c_out,
            weight: Param::he_uniform(c_out * c_in * 9, c_in * 9, rng),
            bias: Param::zeros(c_out),
            padded: Vec::new(),
            in_shape: (0, 0, 0, 0),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.c_in * self.c_out * 9
    }

    pub fn forward(&mut self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.c_in, "conv input channels");
        let hw = x.plane();
        let mut out = Batch::zeros(x.n, self.c_out, x.h, x.w);
        self.padded = pad_planes(&x.data, x.n * x.c, x.h, x.w);
        let per_image = self.c_in * (x.h + 2) * padded_width(x.w);
        for b in 0..x.n {
            let y = out.image_mut(b);
            for (co, row) in y.chunks_exact_mut(hw).enumerate() {
                row.fill(self.bias.value[co]);
            }
            correlate3x3(
                &self.padded[b * per_image..(b + 1) * per_image],
                self.c_in,
                x.h,
                x.w,
                &self.weight.value,
                self.c_out,
                y,
            );
        }
        self.in_shape = (x.n, x.c, x.h, x.w);
        out
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let (n, c, h, w) = self.in_shape;
        let hw = h * w;
        let mut dx = Batch::zeros(n, c, h, w);
        let flipped = flip_kernel(&self.weight.value, self.c_in, self.c_out);
        let gp = pad_planes(&dy.data, n * self.c_out, h, w);
        let in_plane = (h + 2) * padded_width(w);
        let mut col = vec![T::zero(); c * 9 * hw];
        for b in 0..n {
            let g = dy.image(b);
            for (co, row) in g.chunks_exact(hw).enumerate() {
                self.bias.grad[co] += row.iter().copied().sum::<T>();
            }
            im2col_padded(&self.padded[b * c * in_plane..(b + 1) * c * in_plane], c, h, w, &mut col);
            gemm(
                false,
                true,
                self.c_out,
                c * 9,
                hw,
                T::one(),
                g,
                &col,
                T::one(),
                &mut self.weight.grad,
            );
            correlate3x3(
                &gp[b * self.c_out * in_plane..(b + 1) * self.c_out * in_plane],
                self.c_out,
                h,
                w,
                &flipped,
                self.c_in,
                dx.image_mut(b),
            );
        }
        dx
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        out.push(param_slot(prefix, "weight", &mut self.weight));
        out.push(param_slot(prefix, "bias", &mut self.bias));
    }
}

/// 1x1 convolution.
#[derive(Clone, Debug)]
pub struct Pointwise<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// `c_out x c_in`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Batch<T>>,
}

impl<T: Real> Pointwise<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            c_in,
            c_out,
            weight: Param::he_uniform(c_out * c_in, c_in, rng),
            bias: Param::zeros(c_out),
            input: None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.c_in * self.c_out
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.c_in, "pointwise input channels");
        let hw = x.plane();
        let mut out = Batch::zeros(x.n, self.c_out, x.h, x.w);
        for b in 0..x.n {
            let y = out.image_mut(b);
            for (co, row) in y.chunks_exact_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            gemm(
                false,
                false,
                self.c_out,
                hw,
                self.c_in,
                T::one(),
                &self.weight.value,
                x.image(b),
                T::one(),
                y,
            );
        }
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let x = self.input.as_ref().expect("forward before backward");
        let hw = x.plane();
        let mut dx = Batch::zeros(x.n, x.c, x.h, x.w);
        for b in 0..x.n {
            let g = dy.image(b);
            for (co, row) in g.chunks_exact(hw).enumerate() {
                self.bias.grad[co] += row.iter().copied().sum::<T>();
            }
            gemm(
                false,
                true,
                self.c_out,
                self.c_in,
                hw,
                T::one(),
                g,
                x.image(b),
                T::one(),
                &mut self.weight.grad,
            );
            gemm(
                true,
                false,
                self.c_in,
                hw,
                self.c_out,
                T::one(),
                &self.weight.value,
                g,
                T::zero(),
                dx.image_mut(b),
            );
        }
        dx
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        out.push(param_slot(prefix, "weight", &mut self.weight));
        out.push(param_slot(prefix, "bias", &mut self.bias));
    }
}

/// Per-channel 3x3 spatial convolution without bias.
#[derive(Clone, Debug)]
pub struct Depthwise<T> {
    pub c: usize,
    /// `c x 9`
    pub weight: Param<T>,
    padded: Vec<T>,
    in_shape: (usize, usize, usize, usize),
}

impl<T: Real> Depthwise<T> {
    pub fn new(c: usize, rng: &mut Rng) -> Self {
        Self {
            c,
            weight: Param::he_uniform(c * 9, 9, rng),
            padded: Vec::new(),
            in_shape: (0, 0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.c, "depthwise channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let plane = (h + 2) * padded_width(w);
        self.padded = pad_planes(&x.data, x.n * x.c, h, w);
        let mut out = x;
        out.data.fill(T::zero());
        for (i, dst) in out.data.chunks_exact_mut(hw).enumerate() {
            let ch = i % self.c;
            correlate3x3(
                &self.padded[i * plane..(i + 1) * plane],
                1,
                h,
                w,
                &self.weight.value[ch * 9..ch * 9 + 9],
                1,
                dst,
            );
        }
        self.in_shape = (out.n, out.c, h, w);
        out
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let (n, c, h, w) = self.in_shape;
        let hw = h * w;
        let plane = (h + 2) * padded_width(w);
        let flipped = flip_kernel(&self.weight.value, 1, c);
        let gp = pad_planes(&dy.data, n * c, h, w);
        let mut dx = Batch::zeros(n, c, h, w);
        for (i, dst) in dx.data.chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            tap_dots(
                &dy.data[i * hw..(i + 1) * hw],
                &self.padded[i * plane..(i + 1) * plane],
                h,
                w,
                &mut self.weight.grad[ch * 9..ch * 9 + 9],
            );
            correlate3x3(
                &gp[i * plane..(i + 1) * plane],
                1,
                h,
                w,
                &flipped[ch * 9..ch * 9 + 9],
                1,
                dst,
            );
        }
        dx
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        out.push(param_slot(prefix, "weight", &mut self.weight));
    }
}

/// 2x2 transposed convolution with stride 2 (exact 2x upsampling).
#[derive(Clone, Debug)]
pub struct UpConv<T> {
    pub c_in: usize,
    pub c_out: usize,
    /// `(c_out * 4) x c_in`; row `co * 4 + a * 2 + b` maps to output
    /// offset `(a, b)` within each 2x2 block.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Batch<T>>,
}

impl<T: Real> UpConv<T> {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self {
            c_in,
            c_out,
            weight: Param::he_uniform(c_out * 4 * c_in, c_in, rng),
            bias: Param::zeros(c_out),
            input: None,
        }
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        assert_eq!(x.c, self.c_in, "up-conv input channels");
        let hw = x.plane();
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut out = Batch::zeros(x.n, self.c_out, oh, ow);
        let mut tmp = vec![T::zero(); self.c_out * 4 * hw];
        for b in 0..x.n {
            gemm(
                false,
                false,
                self.c_out * 4,
                hw,
                self.c_in,
                T::one(),
                &self.weight.value,
                x.image(b),
                T::zero(),
                &mut tmp,
            );
            let y = out.image_mut(b);
            for co in 0..self.c_out {
                let bias = self.bias.value[co];
                let plane = &mut y[co * oh * ow..(co + 1) * oh * ow];
                for ab in 0..4 {
                    let (a, bb) = (ab / 2, ab % 2);
                    let src = &tmp[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                    for yy in 0..x.h {
                        let orow = (2 * yy + a) * ow;
                        for xx in 0..x.w {
                            plane[orow + 2 * xx + bb] = src[yy * x.w + xx] + bias;
                        }
                    }
                }
            }
        }
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Batch<T> {
        let x = self.input.as_ref().expect("forward before backward");
        let hw = x.plane();
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut dx = Batch::zeros(x.n, x.c, x.h, x.w);
        let mut dtmp = vec![T::zero(); self.c_out * 4 * hw];
        for b in 0..x.n {
            let g = dy.image(b);
            for co in 0..self.c_out {
                let plane = &g[co * oh * ow..(co + 1) * oh * ow];
                self.bias.grad[co] += plane.iter().copied().sum::<T>();
                for ab in 0..4 {
                    let (a, bb) = (ab / 2, ab % 2);
                    let dst = &mut dtmp[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                    for yy in 0..x.h {
                        let orow = (2 * yy + a) * ow;
                        for xx in 0..x.w {
                            dst[yy * x.w + xx] = plane[orow + 2 * xx + bb];
                        }
                    }
                }
            }
            gemm(
                false,
                true,
                self.c_out * 4,
                self.c_in,
                hw,
                T::one(),
                &dtmp,
                x.image(b),
                T::one(),
                &mut self.weight.grad,
            );
            gemm(
                true,
                false,
                self.c_in,
                hw,
                self.c_out * 4,
                T::one(),
                &self.weight.value,
                &dtmp,
                T::zero(),
                dx.image_mut(b),
            );
        }
        dx
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        out.push(param_slot(prefix, "weight", &mut self.weight));
        out.push(param_slot(prefix, "bias", &mut self.bias));
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Relu {
    pub fn forward<T: Real>(&mut self, x: Batch<T>) -> Batch<T> {
        let mut out = x;
        self.mask.clear();
        self.mask.reserve(out.data.len());
        for v in out.data.iter_mut() {
            let on = *v > T::zero();
            self.mask.push(on);
            if !on {
                *v = T::zero();
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: Batch<T>) -> Batch<T> {
        let mut dx = dy;
        for (d, on) in dx.data.iter_mut().zip(&self.mask) {
            if !on {
                *d = T::zero();
            }
        }
        dx
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalisation. In training with a batch of at least
/// two images the batch statistics are used and folded into the running
/// averages; otherwise the running averages normalise.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub c: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    used_batch_stats: bool,
    shape: (usize, usize, usize, usize),
}

impl<T: Real> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        Self {
            c,
            gamma: Param::new(vec![T::one(); c]),
            beta: Param::zeros(c),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            x_hat: Vec::new(),
            inv_std: Vec::new(),
            used_batch_stats: false,
            shape: (0, 0, 0, 0),
        }
    }

    pub fn forward(&mut self, x: Batch<T>, training: bool) -> Batch<T> {
        let hw = x.plane();
        let count = (x.n * hw) as f64;
        let eps = T::from_f64(BN_EPS);
        self.used_batch_stats = training && x.n >= 2;
        self.inv_std.clear();
        let mut means = Vec::with_capacity(self.c);
        for ch in 0..self.c {
            let (mean, var) = if self.used_batch_stats {
                let mut sum = 0.0;
                for b in 0..x.n {
                    sum += x.image(b)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for b in 0..x.n {
                    sq += x.image(b)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let m = T::from_f64(BN_MOMENTUM);
                let one_m = T::from_f64(1.0 - BN_MOMENTUM);
                self.running_mean[ch] = m * self.running_mean[ch] + one_m * T::from_f64(mean);
                self.running_var[ch] = m * self.running_var[ch] + one_m * T::from_f64(var);
                (T::from_f64(mean), T::from_f64(var))
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            means.push(mean);
            self.inv_std.push(T::one() / (var + eps).sqrt());
        }
        let mut out = x;
        self.x_hat.resize(out.data.len(), T::zero());
        let image_len = out.image_len();
        for b in 0..out.n {
            let base = b * image_len;
            for ch in 0..self.c {
                let (mean, inv) = (means[ch], self.inv_std[ch]);
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                let range = base + ch * hw..base + (ch + 1) * hw;
                for (o, xh) in out.data[range.clone()]
                    .iter_mut()
                    .zip(&mut self.x_hat[range])
                {
                    *xh = (*o - mean) * inv;
                    *o = g * *xh + be;
                }
            }
        }
        self.shape = (out.n, out.c, out.h, out.w);
        out
    }

    pub fn backward(&mut self, dy: Batch<T>) -> Batch<T> {
        let (n, c, h, w) = self.shape;
        let hw = h * w;
        let count = T::from_f64((n * hw) as f64);
        let mut dx = dy;
        for ch in 0..self.c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let range = b * c * hw + ch * hw..b * c * hw + (ch + 1) * hw;
                for (g, xh) in dx.data[range.clone()].iter().zip(&self.x_hat[range]) {
                    sum_dy += *g;
                    sum_dy_xhat += *g * *xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let scale = self.gamma.value[ch] * self.inv_std[ch];
            for b in 0..n {
                let range = b * c * hw + ch * hw..b * c * hw + (ch + 1) * hw;
                for (d, xh) in dx.data[range.clone()].iter_mut().zip(&self.x_hat[range]) {
                    *d = if self.used_batch_stats {
                        scale * (*d - sum_dy / count - *xh * sum_dy_xhat / count)
                    } else {
                        scale * *d
                    };
                }
            }
        }
        dx
    }

    pub fn slots<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorSlot<'a, T>>) {
        out.push(param_slot(prefix, "gamma", &mut self.gamma));
        out.push(param_slot(prefix, "beta", &mut self.beta));
        out.push(TensorSlot {
            name: format!("{prefix}.running_mean"),
            value: &mut self.running_mean,
            grad: None,
        });
        out.push(TensorSlot {
            name: format!("{prefix}.running_var"),
            value: &mut self.running_var,
            grad: None,
        });
    }
}

/// 2x2 max-pooling, stride 2. Ties resolve to the first maximum in
/// row-major window order.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool {
    pub fn forward<T: Real>(&mut self, x: &Batch<T>) -> Batch<T> {
        assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even sizes");
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Batch::zeros(x.n, x.c, oh, ow);
        self.argmax.clear();
        self.argmax.reserve(out.data.len());
        let mut o = 0;
        for b in 0..x.n {
            for ch in 0..x.c {
                let base = (b * x.c + ch) * x.h * x.w;
                for yy in 0..oh {
                    for xx in 0..ow {
                        let cands = [
                            base + 2 * yy * x.w + 2 * xx,
                            base + 2 * yy * x.w + 2 * xx + 1,
                            base + (2 * yy + 1) * x.w + 2 * xx,
                            base + (2 * yy + 1) * x.w + 2 * xx + 1,
                        ];
                        let mut best = cands[0];
                        for i in &cands[1..] {
                            if x.data[*i] > x.data[best] {
                                best = *i;
                            }
                        }
                        out.data[o] = x.data[best];
                        self.argmax.push(best);
                        o += 1;
                    }
                }
            }
        }
        self.in_shape = (x.n, x.c, x.h, x.w);
        out
    }

    pub fn backward<T: Real>(&self, dy: &Batch<T>) -> Batch<T> {
        let (n, c, h, w) = self.in_shape;
        let mut dx = Batch::zeros(n, c, h, w);
        for (g, i) in dy.data.iter().zip(&self.argmax) {
            dx.data[*i] += *g;
        }
        dx
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)` during
/// training, inference is the identity.
#[derive(Clone, Debug, Default)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<bool>>,
    scale: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Self {
            p,
            mask: None,
            scale: 1.0,
        }
    }

    pub fn forward<T: Real>(&mut self, x: Batch<T>, rng: Option<&mut Rng>) -> Batch<T> {
        let mut out = x;
        match rng {
            Some(rng) if self.p > 0.0 => {
                let scale = 1.0 / (1.0 - self.p);
                let mut mask = self.mask.take().unwrap_or_default();
                mask.clear();
                let threshold = (self.p * 4294967296.0) as u64;
                let len = out.data.len();
                while mask.len() < len {
                    let bits = rng.next_u64();
                    mask.push((bits & 0xffff_ffff) >= threshold);
                    if mask.len() < len {
                        mask.push((bits >> 32) >= threshold);
                    }
                }
                let scale = T::from_f64(scale);
                for (v, keep) in out.data.iter_mut().zip(&mask) {
                    *v = if *keep { *v * scale } else { T::zero() };
                }
                self.scale = scale.as_f64();
                self.mask = Some(mask);
            }
            _ => self.mask = None,
        }
        out
    }

    pub fn backward<T: Real>(&self, dy: Batch<T>) -> Batch<T> {
        let mut dx = dy;
        if let Some(mask) = &self.mask {
            let scale = T::from_f64(self.scale);
            for (v, keep) in dx.data.iter_mut().zip(mask) {
                *v = if *keep { *v * scale } else { T::zero() };
            }
        }
        dx
    }
}

/// Channel softmax at every pixel.
pub fn softmax_channels<T: Real>(x: &Batch<T>) -> Batch<T> {
    let hw = x.plane();
    let mut out = x.clone();
    for b in 0..x.n {
        let img = out.image_mut(b);
        for px in 0..hw {
            let mut max = T::neg_infinity();
            for ch in 0..x.c {
                max = max.max(img[ch * hw + px]);
            }
            let mut sum = T::zero();
            for ch in 0..x.c {
                let e = (img[ch * hw + px] - max).exp();
                img[ch * hw + px] = e;
                sum += e;
            }
            for ch in 0..x.c {
                img[ch * hw + px] /= sum;
            }
        }
    }
    out
}

/// Gradient with respect to softmax inputs given the outputs `p` and
/// `dL/dp`: `p * (g - sum_c p g)`.
pub fn softmax_backward<T: Real>(p: &Batch<T>, dp: &Batch<T>) -> Batch<T> {
    let hw = p.plane();
    let mut out = dp.clone();
    for b in 0..p.n {
        let pi = p.image(b);
        let gi = out.image_mut(b);
        for px in 0..hw {
            let mut dot = T::zero();
            for ch in 0..p.c {
                dot += pi[ch * hw + px] * gi[ch * hw + px];
            }
            for ch in 0..p.c {
                let idx = ch * hw + px;
                gi[idx] = pi[idx] * (gi[idx] - dot);
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Batch<T>, b: &Batch<T>) -> Batch<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shapes");
    let mut out = Batch::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let dst = out.image_mut(i);
        let la = a.image_len();
        dst[..la].copy_from_slice(a.image(i));
        dst[la..].copy_from_slice(b.image(i));
    }
    out
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Real>(x: &Batch<T>, c_first: usize) -> (Batch<T>, Batch<T>) {
    let mut a = Batch::zeros(x.n, c_first, x.h, x.w);
    let mut b = Batch::zeros(x.n, x.c - c_first, x.h, x.w);
    let la = a.image_len();
    for i in 0..x.n {
        let src = x.image(i);
        a.image_mut(i).copy_from_slice(&src[..la]);
        b.image_mut(i).copy_from_slice(&src[la..]);
    }
    (a, b)
}
