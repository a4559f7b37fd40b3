use rand::Rng;

use super::params::{Init, ParamId, Params};
use crate::real::Real;

/// Activation tensor in channel-major `C×B×H×W` layout.
///
/// Keeping channels outermost makes every convolution a single gemm over
/// the whole batch: the output of `W·col` is already in this layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            b,
            h,
            w,
            data: vec![T::ZERO; c * b * h * w],
        }
    }

    pub fn from_vec(c: usize, b: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * b * h * w, "activation buffer size");
        Self { c, b, h, w, data }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the `C × (B·H·W)` matrix view.
    pub fn cols(&self) -> usize {
        self.b * self.h * self.w
    }

    pub fn plane(&self, c: usize, b: usize) -> &[T] {
        let hw = self.hw();
        let o = (c * self.b + b) * hw;
        &self.data[o..o + hw]
    }

    pub fn plane_mut(&mut self, c: usize, b: usize) -> &mut [T] {
        let hw = self.hw();
        let o = (c * self.b + b) * hw;
        &mut self.data[o..o + hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks `self` on top of `other` along channels.
    pub fn concat_channels(&self, other: &Self) -> Self {
        debug_assert_eq!((self.b, self.h, self.w), (other.b, other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.c + other.c, self.b, self.h, self.w, data)
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(self, first: usize) -> (Self, Self) {
        let at = first * self.b * self.hw();
        let mut head = self.data;
        let tail = head.split_off(at);
        (
            Self::from_vec(first, self.b, self.h, self.w, head),
            Self::from_vec(self.c - first, self.b, self.h, self.w, tail),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks per-item planar `C×H×W` buffers into a batch.
    pub fn stack(c: usize, h: usize, w: usize, items: &[&[T]]) -> Self {
        let hw = h * w;
        let b = items.len();
        let mut out = Self::zeros(c, b, h, w);
        for (bi, item) in items.iter().enumerate() {
            assert_eq!(item.len(), c * hw, "planar item size");
            for ci in 0..c {
                out.plane_mut(ci, bi).copy_from_slice(&item[ci * hw..(ci + 1) * hw]);
            }
        }
        out
    }

    /// Planar `C×H×W` copy of batch item `b`.
    pub fn item(&self, b: usize) -> Vec<T> {
        (0..self.c).flat_map(|ci| self.plane(ci, b).iter().copied()).collect()
    }
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * v.sigmoid()).collect()
}

/// Multiplies `dy` by `d silu / dx` evaluated at `x`.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = v.sigmoid();
            g * s * (T::ONE + v * (T::ONE - s))
        })
        .collect()
}

/// Dense layer on row-major `[n, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(p: &mut Params<T>, name: &str, inp: usize, out: usize, init: Init, rng: &mut R) -> Self {
        let weight = p.add(format!("{name}.weight"), &[out, inp], init, rng);
        let bias = p.add(format!("{name}.bias"), &[out], Init::Zeros, rng);
        Self { weight, bias, inp, out }
    }

    pub fn param_count(inp: usize, out: usize) -> usize {
        inp * out + out
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.inp);
        let bias = p.get(self.bias);
        let mut y: Vec<T> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        T::gemm(
            rows,
            self.inp,
            self.out,
            T::ONE,
            x,
            (self.inp as isize, 1),
            p.get(self.weight),
            (1, self.inp as isize),
            T::ONE,
            &mut y,
            (self.out as isize, 1),
        );
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward<T: Real>(&self, p: &Params<T>, x: &[T], dy: &[T], rows: usize, g: &mut Params<T>) -> Vec<T> {
        let gb = g.get_mut(self.bias);
        for r in 0..rows {
            for (o, gbo) in gb.iter_mut().enumerate() {
                *gbo += dy[r * self.out + o];
            }
        }
        T::gemm(
            self.out,
            rows,
            self.inp,
            T::ONE,
            dy,
            (1, self.out as isize),
            x,
            (self.inp as isize, 1),
            T::ONE,
            g.get_mut(self.weight),
            (self.inp as isize, 1),
        );
        let mut dx = vec![T::ZERO; rows * self.inp];
        T::gemm(
            rows,
            self.out,
            self.inp,
            T::ONE,
            dy,
            (self.out as isize, 1),
            p.get(self.weight),
            (self.inp as isize, 1),
            T::ZERO,
            &mut dx,
            (self.inp as isize, 1),
        );
        dx
    }
}

/// Square-kernel convolution with zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut Params<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = p.add(format!("{name}.weight"), &[cout, cin, k, k], init, rng);
        let bias = p.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Samples per im2col chunk, sized so a chunk's patch matrix stays in cache.
    fn chunk_samples(&self, ho: usize, wo: usize, batch: usize) -> usize {
        (CHUNK_COLUMNS / (ho * wo).max(1)).clamp(1, batch.max(1))
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Act<T>) -> Act<T> {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let n = x.b * ho * wo;
        let kk = self.cin * self.k * self.k;
        let mut y = Act::zeros(self.cout, x.b, ho, wo);
        let bias = p.get(self.bias);
        for (co, chunk) in y.data.chunks_mut(n).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[co]);
        }
        let w = p.get(self.weight);
        if self.is_pointwise() {
            T::gemm(self.cout, kk, n, T::ONE, w, (kk as isize, 1), &x.data, (n as isize, 1), T::ONE, &mut y.data, (n as isize, 1));
            return y;
        }
        let per = self.chunk_samples(ho, wo, x.b);
        let mut b0 = 0;
        while b0 < x.b {
            let nb = per.min(x.b - b0);
            let cols = nb * ho * wo;
            let col = im2col(x, b0..b0 + nb, self.k, self.stride, ho, wo);
            let off = b0 * ho * wo;
            // Computed as yᵀ = colᵀ·Wᵀ: the long pixel axis as gemm rows packs better
            // than a handful of output channels.
            T::gemm(
                cols,
                kk,
                self.cout,
                T::ONE,
                &col,
                (1, cols as isize),
                w,
                (1, kk as isize),
                T::ONE,
                &mut y.data[off..],
                (1, n as isize),
            );
            b0 += nb;
        }
        y
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, x: &Act<T>, dy: &Act<T>, g: &mut Params<T>) -> Act<T> {
        let (ho, wo) = (dy.h, dy.w);
        let n = x.b * ho * wo;
        let kk = self.cin * self.k * self.k;
        for (gb, chunk) in g.get_mut(self.bias).iter_mut().zip(dy.data.chunks(n)) {
            *gb += chunk.iter().copied().sum::<T>();
        }
        let w = p.get(self.weight);
        if self.is_pointwise() {
            T::gemm(self.cout, n, kk, T::ONE, &dy.data, (n as isize, 1), &x.data, (1, n as isize), T::ONE, g.get_mut(self.weight), (kk as isize, 1));
            let mut dx = vec![T::ZERO; kk * n];
            T::gemm(kk, self.cout, n, T::ONE, w, (1, kk as isize), &dy.data, (n as isize, 1), T::ZERO, &mut dx, (n as isize, 1));
            return Act::from_vec(x.c, x.b, x.h, x.w, dx);
        }
        let mut dx = Act::zeros(x.c, x.b, x.h, x.w);
        let per = self.chunk_samples(ho, wo, x.b);
        let mut b0 = 0;
        while b0 < x.b {
            let nb = per.min(x.b - b0);
            let cols = nb * ho * wo;
            let off = b0 * ho * wo;
            let col = im2col(x, b0..b0 + nb, self.k, self.stride, ho, wo);
            T::gemm(
                self.cout,
                cols,
                kk,
                T::ONE,
                &dy.data[off..],
                (n as isize, 1),
                &col,
                (1, cols as isize),
                T::ONE,
                g.get_mut(self.weight),
                (kk as isize, 1),
            );
            let mut dcol = col;
            T::gemm(
                kk,
                self.cout,
                cols,
                T::ONE,
                w,
                (1, kk as isize),
                &dy.data[off..],
                (n as isize, 1),
                T::ZERO,
                &mut dcol,
                (cols as isize, 1),
            );
            col2im(&dcol, &mut dx, b0..b0 + nb, self.k, self.stride, ho, wo);
            b0 += nb;
        }
        dx
    }
}

/// Target width of one im2col chunk, in output columns.
const CHUNK_COLUMNS: usize = 1024;

/// Unfolds `x` into a `(C·k·k) × (B·Ho·Wo)` patch matrix.
fn im2col<T: Real>(x: &Act<T>, samples: std::ops::Range<usize>, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let b0 = samples.start;
    let n = samples.len() * ho * wo;
    let mut col = vec![T::ZERO; x.c * k * k * n];
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let dx = kx as isize - pad;
                for b in samples.clone() {
                    let src = x.plane(ci, b);
                    let lb = b - b0;
                    for oy in 0..ho {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst = &mut col[row + (lb * ho + oy) * wo..row + (lb * ho + oy + 1) * wo];
                        if stride == 1 {
                            let lo = (-dx).max(0) as usize;
                            let hi = (x.w as isize - dx).min(wo as isize) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + dx) as usize;
                                dst[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride) as isize + dx;
                                if ix >= 0 && ix < x.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a chunk's patch-matrix gradient back into `x`.
fn col2im<T: Real>(col: &[T], x: &mut Act<T>, samples: std::ops::Range<usize>, k: usize, stride: usize, ho: usize, wo: usize) {
    let pad = (k / 2) as isize;
    let b0 = samples.start;
    let n = samples.len() * ho * wo;
    let (h, w) = (x.h, x.w);
    for ci in 0..x.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                let dx = kx as isize - pad;
                for b in samples.clone() {
                    let lb = b - b0;
                    let dst = x.plane_mut(ci, b);
                    for oy in 0..ho {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &col[row + (lb * ho + oy) * wo..row + (lb * ho + oy + 1) * wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

/// Normalized activations and per-(sample, group) inverse std.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub xhat: Act<T>,
    pub rstd: Vec<f64>,
}

impl GroupNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(p: &mut Params<T>, name: &str, groups: usize, channels: usize, rng: &mut R) -> Self {
        debug_assert_eq!(channels % groups, 0);
        let gamma = p.add(format!("{name}.weight"), &[channels], Init::Ones, rng);
        let beta = p.add(format!("{name}.bias"), &[channels], Init::Zeros, rng);
        Self {
            gamma,
            beta,
            groups,
            channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Act<T>) -> (Act<T>, GroupNormCache<T>) {
        let cpg = self.channels / self.groups;
        let hw = x.hw();
        let count = (cpg * hw) as f64;
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut xhat = Act::zeros(x.c, x.b, x.h, x.w);
        let mut y = Act::zeros(x.c, x.b, x.h, x.w);
        let mut rstd = vec![0.0; x.b * self.groups];
        for b in 0..x.b {
            for g in 0..self.groups {
                let chans = g * cpg..(g + 1) * cpg;
                let mut sum = 0.0;
                for c in chans.clone() {
                    sum += x.plane(c, b).iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut var = 0.0;
                for c in chans.clone() {
                    var += x.plane(c, b).iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
                }
                let r = 1.0 / (var / count + GROUP_NORM_EPS).sqrt();
                rstd[b * self.groups + g] = r;
                let (mean_t, r_t) = (T::from_f64(mean), T::from_f64(r));
                for c in chans {
                    let (gc, bc) = (gamma[c], beta[c]);
                    let src = x.plane(c, b);
                    let o = (c * x.b + b) * hw;
                    for i in 0..hw {
                        let v = (src[i] - mean_t) * r_t;
                        xhat.data[o + i] = v;
                        y.data[o + i] = v * gc + bc;
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, cache: &GroupNormCache<T>, dy: &Act<T>, g: &mut Params<T>) -> Act<T> {
        let cpg = self.channels / self.groups;
        let xhat = &cache.xhat;
        let hw = xhat.hw();
        let count = (cpg * hw) as f64;
        let gamma = p.get(self.gamma).to_vec();
        {
            let mut dgamma = vec![T::ZERO; self.channels];
            let mut dbeta = vec![T::ZERO; self.channels];
            for c in 0..self.channels {
                for b in 0..xhat.b {
                    let (xs, ds) = (xhat.plane(c, b), dy.plane(c, b));
                    dgamma[c] += xs.iter().zip(ds).map(|(&a, &d)| a * d).sum::<T>();
                    dbeta[c] += ds.iter().copied().sum::<T>();
                }
            }
            for (a, b) in g.get_mut(self.gamma).iter_mut().zip(dgamma) {
                *a += b;
            }
            for (a, b) in g.get_mut(self.beta).iter_mut().zip(dbeta) {
                *a += b;
            }
        }
        let mut dx = Act::zeros(xhat.c, xhat.b, xhat.h, xhat.w);
        for b in 0..xhat.b {
            for grp in 0..self.groups {
                let chans = grp * cpg..(grp + 1) * cpg;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for c in chans.clone() {
                    let gc = gamma[c].to_f64();
                    for (&a, &d) in xhat.plane(c, b).iter().zip(dy.plane(c, b)) {
                        let dxh = d.to_f64() * gc;
                        sum_d += dxh;
                        sum_dx += dxh * a.to_f64();
                    }
                }
                let r = cache.rstd[b * self.groups + grp];
                let mean_d = T::from_f64(sum_d / count);
                let mean_dx = T::from_f64(sum_dx / count);
                let r_t = T::from_f64(r);
                for c in chans {
                    let gc = gamma[c];
                    let o = (c * xhat.b + b) * hw;
                    for i in 0..hw {
                        let dxh = dy.data[o + i] * gc;
                        dx.data[o + i] = r_t * (dxh - mean_d - xhat.data[o + i] * mean_dx);
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x<T: Real>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.b, h2, w2);
    for c in 0..x.c {
        for b in 0..x.b {
            let src = x.plane(c, b);
            let dst = y.plane_mut(c, b);
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[yy * w2 + xx] = src[(yy / 2) * x.w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2x_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.b, h, w);
    for c in 0..dy.c {
        for b in 0..dy.b {
            let src = dy.plane(c, b);
            let dst = dx.plane_mut(c, b);
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
                }
            }
        }
    }
    dx
}

/// Pre-norm multi-head self-attention over flattened spatial positions,
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub norm: GroupNorm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    norm: GroupNormCache<T>,
    normed: Act<T>,
    qkv: Act<T>,
    /// Softmax weights, one `L×L` block per (sample, head).
    probs: Vec<T>,
    mixed: Act<T>,
}

impl SelfAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        p: &mut Params<T>,
        name: &str,
        channels: usize,
        groups: usize,
        head_channels: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let norm = GroupNorm::new(p, &format!("{name}.norm"), groups, channels, rng);
        let qkv = Conv2d::new(p, &format!("{name}.qkv"), channels, 3 * channels, 1, 1, init, rng);
        let proj = Conv2d::new(p, &format!("{name}.proj"), channels, channels, 1, 1, init, rng);
        Self {
            norm,
            qkv,
            proj,
            channels,
            heads: channels / head_channels,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        GroupNorm::param_count(channels) + Conv2d::param_count(channels, 3 * channels, 1) + Conv2d::param_count(channels, channels, 1)
    }

    pub fn forward<T: Real>(&self, p: &Params<T>, x: &Act<T>) -> (Act<T>, AttentionCache<T>) {
        let c = self.channels;
        let dh = c / self.heads;
        let l = x.hw();
        let n = x.cols();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (normed, norm) = self.norm.forward(p, x);
        let qkv = self.qkv.forward(p, &normed);
        let mut probs = vec![T::ZERO; x.b * self.heads * l * l];
        let mut mixed = Act::zeros(c, x.b, x.h, x.w);
        for b in 0..x.b {
            for hd in 0..self.heads {
                let q = &qkv.data[(hd * dh) * n + b * l..];
                let k = &qkv.data[(c + hd * dh) * n + b * l..];
                let v = &qkv.data[(2 * c + hd * dh) * n + b * l..];
                let pb = &mut probs[(b * self.heads + hd) * l * l..(b * self.heads + hd + 1) * l * l];
                T::gemm(l, dh, l, scale, q, (1, n as isize), k, (n as isize, 1), T::ZERO, pb, (l as isize, 1));
                for row in pb.chunks_mut(l) {
                    let m = row.iter().copied().fold(row[0], T::max);
                    let mut s = T::ZERO;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    let inv = T::ONE / s;
                    row.iter_mut().for_each(|v| *v *= inv);
                }
                let out = &mut mixed.data[(hd * dh) * n + b * l..];
                T::gemm(dh, l, l, T::ONE, v, (n as isize, 1), pb, (1, l as isize), T::ZERO, out, (n as isize, 1));
            }
        }
        let mut y = self.proj.forward(p, &mixed);
        y.add_assign(x);
        (
            y,
            AttentionCache {
                norm,
                normed,
                qkv,
                probs,
                mixed,
            },
        )
    }

    pub fn backward<T: Real>(&self, p: &Params<T>, cache: &AttentionCache<T>, dy: &Act<T>, g: &mut Params<T>) -> Act<T> {
        let c = self.channels;
        let dh = c / self.heads;
        let l = dy.hw();
        let n = dy.cols();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let dmixed = self.proj.backward(p, &cache.mixed, dy, g);
        let qkv = &cache.qkv;
        let mut dqkv = Act::zeros(3 * c, dy.b, dy.h, dy.w);
        let mut dp = vec![T::ZERO; l * l];
        for b in 0..dy.b {
            for hd in 0..self.heads {
                let (qo, ko, vo) = ((hd * dh) * n + b * l, (c + hd * dh) * n + b * l, (2 * c + hd * dh) * n + b * l);
                let pb = &cache.probs[(b * self.heads + hd) * l * l..(b * self.heads + hd + 1) * l * l];
                let dout = &dmixed.data[(hd * dh) * n + b * l..];
                // dV = dO · P
                T::gemm(dh, l, l, T::ONE, dout, (n as isize, 1), pb, (l as isize, 1), T::ZERO, &mut dqkv.data[vo..], (n as isize, 1));
                // dP = dOᵀ · V
                T::gemm(l, dh, l, T::ONE, dout, (1, n as isize), &qkv.data[vo..], (n as isize, 1), T::ZERO, &mut dp, (l as isize, 1));
                for (prow, drow) in pb.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                // dQ = scale · K · dSᵀ, dK = scale · Q · dS
                T::gemm(dh, l, l, scale, &qkv.data[ko..], (n as isize, 1), &dp, (1, l as isize), T::ZERO, &mut dqkv.data[qo..], (n as isize, 1));
                T::gemm(dh, l, l, scale, &qkv.data[qo..], (n as isize, 1), &dp, (l as isize, 1), T::ZERO, &mut dqkv.data[ko..], (n as isize, 1));
            }
        }
        let dnormed = self.qkv.backward(p, &cache.normed, &dqkv, g);
        let mut dx = self.norm.backward(p, &cache.norm, &dnormed, g);
        dx.add_assign(dy);
        dx
    }
}
