//! Reverse-mode tape over [`Tensor`] values with shared parameters.

use matrixmultiply::sgemm;
use serde::{Deserialize, Serialize};

use super::kernels::{diff_weight_backward, diff_weight_forward, instnorm_backward, instnorm_forward, DiffWeightCache};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.01;

/// Target size of one im2col slab in forward-only convolutions.
const SLAB_FLOATS: usize = 1 << 20;
const SHIFT_SLAB_FLOATS: usize = 1 << 17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub data: Vec<f32>,
}

/// Ordered parameter list; indices are stable for a given configuration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param { name: name.into(), shape, data });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f32>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub weight: usize,
    pub bias: Option<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    fn pad(&self) -> usize {
        self.kernel / 2
    }
}

enum Op {
    Leaf,
    Conv { x: Var, spec: ConvSpec, cols: Option<Vec<f32>> },
    ConvShifted { x: Var, spec: ConvSpec },
    UpConv { x: Var, weight: usize, bias: Option<usize> },
    Norm { x: Var, affine: Option<(usize, usize)>, normed: Vec<f32>, inv_std: Vec<f32> },
    LeakyRelu { x: Var },
    Add(Var, Var),
    Concat(Var, Var),
    DiffWeight { x0: Var, xt: Var, affine: Option<(usize, usize)>, cache: DiffWeightCache<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    /// Forward only: nothing is kept for backward and convolutions run in slabs.
    no_grad: bool,
    nodes: Vec<Node>,
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

fn im2col(x: &Tensor, k: usize, s: usize, p: usize, out: [usize; 3]) -> Vec<f32> {
    im2col_slab(x, k, s, p, out, 0..out[0])
}

/// Columns for the output planes `zs` only.
fn im2col_slab(x: &Tensor, k: usize, s: usize, p: usize, out: [usize; 3], zs: std::ops::Range<usize>) -> Vec<f32> {
    let [d, h, w] = x.spatial;
    let n = zs.len() * out[1] * out[2];
    let rows = x.channels * k * k * k;
    let mut cols = vec![0.0f32; rows * n];
    let mut row = 0;
    for c in 0..x.channels {
        let src = x.channel(c);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut i = 0;
                    for oz in zs.clone() {
                        let iz = (oz * s + kz) as isize - p as isize;
                        for oy in 0..out[1] {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                i += out[2];
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            let line = &mut dst[i..i + out[2]];
                            if s == 1 {
                                let lo = p.saturating_sub(kx);
                                let hi = out[2].min((w + p).saturating_sub(kx));
                                if lo < hi {
                                    let start = base + lo + kx - p;
                                    line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                                }
                            } else {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *v = src[base + ix as usize];
                                    }
                                }
                            }
                            i += out[2];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], channels: usize, spatial: [usize; 3], k: usize, s: usize, p: usize, out: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = spatial;
    let n = out.iter().product::<usize>();
    let mut x = vec![0.0f32; channels * d * h * w];
    let mut row = 0;
    for c in 0..channels {
        let dst = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * n..(row + 1) * n];
                    let mut i = 0;
                    for oz in 0..out[0] {
                        let iz = (oz * s + kz) as isize - p as isize;
                        for oy in 0..out[1] {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                i += out[2];
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            for ox in 0..out[2] {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ix as usize] += src[i];
                                }
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    x
}

/// Channels zero-padded by `p` on every side, stored with a margin so that
/// any kernel offset of a padded-plane index stays inside its channel.
struct Padded {
    data: Vec<f32>,
    p: usize,
    spatial: [usize; 3],
    pw: usize,
    hw: usize,
    margin: usize,
    stride: usize,
}

impl Padded {
    fn zeros(channels: usize, spatial: [usize; 3], p: usize) -> Self {
        let [d, h, w] = spatial;
        let pw = w + 2 * p;
        let hw = (h + 2 * p) * pw;
        let margin = p * pw + p;
        let stride = (d + 2 * p) * hw + 2 * margin;
        Self { data: vec![0.0; channels * stride], p, spatial, pw, hw, margin, stride }
    }

    fn of(x: &Tensor, p: usize) -> Self {
        let mut out = Self::zeros(x.channels, x.spatial, p);
        for c in 0..x.channels {
            out.fill_interior(c, x.channel(c));
        }
        out
    }

    fn row(&self, c: usize, z: usize, y: usize) -> usize {
        c * self.stride + self.margin + (z + self.p) * self.hw + (y + self.p) * self.pw + self.p
    }

    fn fill_interior(&mut self, c: usize, src: &[f32]) {
        let [d, h, w] = self.spatial;
        for z in 0..d {
            for y in 0..h {
                let at = self.row(c, z, y);
                self.data[at..at + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }

    fn interior(&self, c: usize) -> Vec<f32> {
        let [d, h, w] = self.spatial;
        let mut out = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                let at = self.row(c, z, y);
                out.extend_from_slice(&self.data[at..at + w]);
            }
        }
        out
    }

    /// Start of the view shifted by kernel offset `(kz, ky, kx)` for output
    /// planes beginning at `z0`.
    fn shifted(&self, z0: usize, (kz, ky, kx): (usize, usize, usize)) -> usize {
        let p = self.p;
        self.margin + (z0 + p) * self.hw + kz * self.hw + ky * self.pw + kx - (p * self.hw + p * self.pw + p)
    }
}

fn kernel_offsets(k: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..k).flat_map(move |a| (0..k).flat_map(move |b| (0..k).map(move |c| (a, b, c))))
}

/// General-stride `c = a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
unsafe fn sgemm_strided(m: usize, k: usize, n: usize, a: *const f32, sa: [usize; 2], b: *const f32, sb: [usize; 2], beta: f32, c: *mut f32, sc: [usize; 2]) {
    // SAFETY: forwarded from the caller.
    unsafe {
        sgemm(m, k, n, 1.0, a, sa[0] as isize, sa[1] as isize, b, sb[0] as isize, sb[1] as isize, beta, c, sc[0] as isize, sc[1] as isize);
    }
}

/// Same-size stride-1 convolution added into `y`, as one GEMM per kernel
/// offset over a zero-padded copy of `x`, a slab of output planes at a time.
fn conv_shifted(x: &Tensor, w: &[f32], co: usize, k: usize, y: &mut [f32]) {
    let ci = x.channels;
    let xp = Padded::of(x, k / 2);
    let [d, h, wd] = x.spatial;
    let (hw, kk, n) = (xp.hw, k * k * k, d * h * wd);
    let nz = (SHIFT_SLAB_FLOATS / ((ci + co) * hw)).clamp(1, d);
    let mut acc = vec![0.0f32; co * nz * hw];
    for z0 in (0..d).step_by(nz) {
        let z1 = (z0 + nz).min(d);
        let len = (z1 - z0) * hw;
        for (koff, off) in kernel_offsets(k).enumerate() {
            let start = xp.shifted(z0, off);
            // SAFETY: every row of the view lies within one padded channel.
            unsafe {
                sgemm_strided(
                    co,
                    ci,
                    len,
                    w.as_ptr().add(koff),
                    [ci * kk, kk],
                    xp.data.as_ptr().add(start),
                    [xp.stride, 1],
                    if koff == 0 { 0.0 } else { 1.0 },
                    acc.as_mut_ptr(),
                    [len, 1],
                );
            }
        }
        let p = xp.p;
        for o in 0..co {
            for z in z0..z1 {
                for yy in 0..h {
                    let src = &acc[o * len + (z - z0) * hw + (yy + p) * xp.pw + p..][..wd];
                    let dst = &mut y[o * n + (z * h + yy) * wd..][..wd];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Backward of [`conv_shifted`]: adds the weight gradient into `dw` and
/// returns the input gradient.
fn conv_shifted_backward(x: &Tensor, w: &[f32], co: usize, k: usize, gy: &[f32], dw: &mut [f32]) -> Vec<f32> {
    let ci = x.channels;
    let p = k / 2;
    let xp = Padded::of(x, p);
    let mut gp = Padded::zeros(co, x.spatial, p);
    let n = x.voxels();
    for o in 0..co {
        gp.fill_interior(o, &gy[o * n..(o + 1) * n]);
    }
    let mut dxp = Padded::zeros(ci, x.spatial, p);
    let kk = k * k * k;
    let len = x.spatial[0] * xp.hw;
    let g0 = gp.shifted(0, (p, p, p));
    for (koff, off) in kernel_offsets(k).enumerate() {
        let start = xp.shifted(0, off);
        // SAFETY: views stay within their padded channels; `dw` holds co*ci*kk values.
        unsafe {
            sgemm_strided(
                co,
                len,
                ci,
                gp.data.as_ptr().add(g0),
                [gp.stride, 1],
                xp.data.as_ptr().add(start),
                [1, xp.stride],
                1.0,
                dw.as_mut_ptr().add(koff),
                [ci * kk, kk],
            );
            sgemm_strided(
                ci,
                co,
                len,
                w.as_ptr().add(koff),
                [kk, ci * kk],
                gp.data.as_ptr().add(g0),
                [gp.stride, 1],
                1.0,
                dxp.data.as_mut_ptr().add(start),
                [dxp.stride, 1],
            );
        }
    }
    (0..ci).flat_map(|c| dxp.interior(c)).collect()
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32]) {
    gemm_ldc(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n);
}

#[allow(clippy::too_many_arguments)]
fn gemm_ldc(m: usize, k: usize, n: usize, a: &[f32], rsa: usize, csa: usize, b: &[f32], rsb: usize, csb: usize, beta: f32, c: &mut [f32], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller's slices cover the strided extents used here.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn accumulate(dst: &mut Vec<f32>, src: &[f32]) {
    if dst.is_empty() {
        dst.extend_from_slice(src);
    } else {
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, no_grad: false, nodes: Vec::new() }
    }

    /// A graph that only evaluates; calling [`Graph::backward`] on it panics.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Self { params, no_grad: true, nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn p(&self, i: usize) -> &[f32] {
        &self.params.params[i].data
    }

    pub fn conv(&mut self, x: Var, spec: ConvSpec) -> Result<Var> {
        let xin = self.value(x);
        let w = &self.params.params[spec.weight];
        let (co, ci) = (w.shape[0], w.shape[1]);
        if ci != xin.channels {
            return Err(Error::Shape(format!("conv {} expects {ci} channels, got {}", w.name, xin.channels)));
        }
        let (k, s, p) = (spec.kernel, spec.stride, spec.pad());
        let out = xin.spatial.map(|n| conv_out(n, k, s, p));
        let n = out.iter().product::<usize>();
        let rows = ci * k * k * k;
        let mut y = vec![0.0f32; co * n];
        if let Some(bi) = spec.bias {
            for (c, &bv) in self.p(bi).iter().enumerate() {
                y[c * n..(c + 1) * n].fill(bv);
            }
        }
        if s == 1 && k > 1 {
            conv_shifted(xin, &w.data, co, k, &mut y);
            let op = if self.no_grad { Op::Leaf } else { Op::ConvShifted { x, spec } };
            return Ok(self.push(Tensor { channels: co, spatial: out, data: y }, op));
        }
        if self.no_grad && !(k == 1 && s == 1) {
            let plane = out[1] * out[2];
            let step = (SLAB_FLOATS / (rows * plane)).clamp(1, out[0]);
            for z0 in (0..out[0]).step_by(step) {
                let zs = z0..(z0 + step).min(out[0]);
                let m = zs.len() * plane;
                let cols = im2col_slab(xin, k, s, p, out, zs);
                gemm_ldc(co, rows, m, &w.data, rows, 1, &cols, m, 1, 1.0, &mut y[z0 * plane..], n);
            }
            return Ok(self.push(Tensor { channels: co, spatial: out, data: y }, Op::Leaf));
        }
        let cols = if k == 1 && s == 1 { None } else { Some(im2col(xin, k, s, p, out)) };
        let b = cols.as_deref().unwrap_or(&xin.data);
        gemm(co, rows, n, &w.data, rows, 1, b, n, 1, 1.0, &mut y);
        let op = if self.no_grad { Op::Leaf } else { Op::Conv { x, spec, cols } };
        Ok(self.push(Tensor { channels: co, spatial: out, data: y }, op))
    }

    /// 2x2x2 transposed convolution with stride 2; weight shape `(ci, co, 2, 2, 2)`.
    pub fn up_conv(&mut self, x: Var, weight: usize, bias: Option<usize>) -> Result<Var> {
        let xin = self.value(x);
        let w = &self.params.params[weight];
        let (ci, co) = (w.shape[0], w.shape[1]);
        if ci != xin.channels {
            return Err(Error::Shape(format!("{} expects {ci} channels, got {}", w.name, xin.channels)));
        }
        let n = xin.voxels();
        let m = co * 8;
        let mut y = vec![0.0f32; m * n];
        gemm(m, ci, n, &w.data, 1, m, &xin.data, n, 1, 0.0, &mut y);
        let [d, h, wd] = xin.spatial;
        let out_s = [2 * d, 2 * h, 2 * wd];
        let mut out = Tensor::zeros(co, out_s);
        let bias_v = bias.map(|b| self.p(b));
        for c in 0..co {
            let bv = bias_v.map_or(0.0, |b| b[c]);
            for off in 0..8 {
                let (a, bb, cc) = (off >> 2, (off >> 1) & 1, off & 1);
                let src = &y[(c * 8 + off) * n..(c * 8 + off + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        let dst = ((c * out_s[0] + 2 * z + a) * out_s[1] + 2 * yy + bb) * out_s[2] + cc;
                        let row = (z * h + yy) * wd;
                        for x in 0..wd {
                            out.data[dst + 2 * x] = src[row + x] + bv;
                        }
                    }
                }
            }
        }
        Ok(self.push(out, Op::UpConv { x, weight, bias }))
    }

    pub fn norm(&mut self, x: Var, affine: Option<(usize, usize)>, eps: f32) -> Var {
        let xin = self.value(x);
        let (normed, inv_std) = instnorm_forward(&xin.data, xin.channels, eps);
        let (channels, spatial) = (xin.channels, xin.spatial);
        let (mut data, kept) = if self.no_grad { (normed, None) } else { (normed.clone(), Some(normed)) };
        if let Some((g, b)) = affine {
            let n = data.len() / channels;
            let (g, b) = (self.p(g), self.p(b));
            for (i, v) in data.iter_mut().enumerate() {
                *v = g[i / n] * *v + b[i / n];
            }
        }
        let out = Tensor { channels, spatial, data };
        match kept {
            Some(normed) => self.push(out, Op::Norm { x, affine, normed, inv_std }),
            None => self.push(out, Op::Leaf),
        }
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let xin = self.value(x);
        let data = xin.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
        let out = Tensor { channels: xin.channels, spatial: xin.spatial, data };
        self.push(out, Op::LeakyRelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape("add operands differ".into()));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor { channels: ta.channels, spatial: ta.spatial, data };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.spatial != tb.spatial {
            return Err(Error::Shape(format!("concat {:?} with {:?}", ta.spatial, tb.spatial)));
        }
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let out = Tensor { channels: ta.channels + tb.channels, spatial: ta.spatial, data };
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn diff_weight(&mut self, x0: Var, xt: Var, affine: Option<(usize, usize)>, eps: f32) -> Result<Var> {
        let (a, b) = (self.value(x0), self.value(xt));
        if !a.same_shape(b) {
            return Err(Error::Shape("difference weighting operands differ".into()));
        }
        let aff = affine.map(|(g, bb)| (self.p(g), self.p(bb)));
        let (data, cache) = diff_weight_forward(&a.data, &b.data, b.channels, eps, aff);
        let out = Tensor { channels: b.channels, spatial: b.spatial, data };
        Ok(self.push(out, Op::DiffWeight { x0, xt, affine, cache }))
    }

    /// Back-propagates `seed` from `out`, adding parameter gradients to `grads`.
    pub fn backward(&self, out: Var, seed: Vec<f32>, grads: &mut [Vec<f32>]) {
        assert!(!self.no_grad, "backward on a no_grad graph");
        let mut g: Vec<Vec<f32>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        g[out.0] = seed;
        for i in (0..=out.0).rev() {
            if g[i].is_empty() {
                continue;
            }
            let gi = std::mem::take(&mut g[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, spec, cols } => {
                    let xin = self.value(*x);
                    let w = &self.params.params[spec.weight];
                    let co = w.shape[0];
                    let n = node.value.voxels();
                    let rows = w.data.len() / co;
                    if let Some(bi) = spec.bias {
                        for c in 0..co {
                            grads[bi][c] += gi[c * n..(c + 1) * n].iter().sum::<f32>();
                        }
                    }
                    let b = cols.as_deref().unwrap_or(&xin.data);
                    gemm(co, n, rows, &gi, n, 1, b, 1, n, 1.0, &mut grads[spec.weight]);
                    let mut dcols = vec![0.0f32; rows * n];
                    gemm(rows, co, n, &w.data, 1, rows, &gi, n, 1, 0.0, &mut dcols);
                    let dx = if cols.is_some() {
                        col2im(&dcols, xin.channels, xin.spatial, spec.kernel, spec.stride, spec.pad(), node.value.spatial)
                    } else {
                        dcols
                    };
                    accumulate(&mut g[x.0], &dx);
                }
                Op::ConvShifted { x, spec } => {
                    let xin = self.value(*x);
                    let w = &self.params.params[spec.weight];
                    let co = w.shape[0];
                    let n = node.value.voxels();
                    if let Some(bi) = spec.bias {
                        for c in 0..co {
                            grads[bi][c] += gi[c * n..(c + 1) * n].iter().sum::<f32>();
                        }
                    }
                    let dx = conv_shifted_backward(xin, &w.data, co, spec.kernel, &gi, &mut grads[spec.weight]);
                    accumulate(&mut g[x.0], &dx);
                }
                Op::UpConv { x, weight, bias } => {
                    let xin = self.value(*x);
                    let w = &self.params.params[*weight];
                    let (ci, co) = (w.shape[0], w.shape[1]);
                    let n = xin.voxels();
                    let m = co * 8;
                    let [d, h, wd] = xin.spatial;
                    let os = node.value.spatial;
                    let mut gy = vec![0.0f32; m * n];
                    for c in 0..co {
                        for off in 0..8 {
                            let (a, bb, cc) = (off >> 2, (off >> 1) & 1, off & 1);
                            let dst = &mut gy[(c * 8 + off) * n..(c * 8 + off + 1) * n];
                            for z in 0..d {
                                for yy in 0..h {
                                    let src = ((c * os[0] + 2 * z + a) * os[1] + 2 * yy + bb) * os[2] + cc;
                                    let row = (z * h + yy) * wd;
                                    for xx in 0..wd {
                                        dst[row + xx] = gi[src + 2 * xx];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(bi) = bias {
                        let on = node.value.voxels();
                        for c in 0..co {
                            grads[*bi][c] += gi[c * on..(c + 1) * on].iter().sum::<f32>();
                        }
                    }
                    gemm(ci, n, m, &xin.data, n, 1, &gy, 1, n, 1.0, &mut grads[*weight]);
                    let mut dx = vec![0.0f32; ci * n];
                    gemm(ci, m, n, &w.data, m, 1, &gy, n, 1, 0.0, &mut dx);
                    accumulate(&mut g[x.0], &dx);
                }
                Op::Norm { x, affine, normed, inv_std } => {
                    let n = node.value.voxels();
                    let gn: Vec<f32> = match affine {
                        Some((gp, bp)) => {
                            let gamma = self.p(*gp);
                            for (idx, (&gv, &h)) in gi.iter().zip(normed).enumerate() {
                                grads[*gp][idx / n] += gv * h;
                                grads[*bp][idx / n] += gv;
                            }
                            gi.iter().enumerate().map(|(idx, &gv)| gv * gamma[idx / n]).collect()
                        }
                        None => gi,
                    };
                    let dx = instnorm_backward(&gn, normed, inv_std);
                    accumulate(&mut g[x.0], &dx);
                }
                Op::LeakyRelu { x } => {
                    let xin = self.value(*x);
                    let dx: Vec<f32> = gi.iter().zip(&xin.data).map(|(&gv, &v)| if v > 0.0 { gv } else { LEAKY_SLOPE * gv }).collect();
                    accumulate(&mut g[x.0], &dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g[a.0], &gi);
                    accumulate(&mut g[b.0], &gi);
                }
                Op::Concat(a, b) => {
                    let split = self.value(*a).data.len();
                    accumulate(&mut g[a.0], &gi[..split]);
                    accumulate(&mut g[b.0], &gi[split..]);
                }
                Op::DiffWeight { x0, xt, affine, cache } => {
                    let aff = affine.map(|(gp, bp)| (self.p(gp), self.p(bp)));
                    let r = diff_weight_backward(&gi, &self.value(*xt).data, cache, aff);
                    if let Some((gp, bp)) = affine {
                        for (a, b) in grads[*gp].iter_mut().zip(&r.gamma) {
                            *a += b;
                        }
                        for (a, b) in grads[*bp].iter_mut().zip(&r.beta) {
                            *a += b;
                        }
                    }
                    accumulate(&mut g[x0.0], &r.x0);
                    accumulate(&mut g[xt.0], &r.xt);
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

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct loop convolution used as an oracle.
    fn conv_reference(x: &Tensor, w: &[f32], co: usize, k: usize, s: usize) -> Tensor {
        let p = k / 2;
        let out = x.spatial.map(|n| conv_out(n, k, s, p));
        let mut t = Tensor::zeros(co, out);
        let [d, h, wd] = x.spatial;
        for o in 0..co {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = 0.0f64;
                        for c in 0..x.channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * s + kz) as isize - p as isize;
                                        let iy = (oy * s + ky) as isize - p as isize;
                                        let ix = (ox * s + kx) as isize - p as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let wi = (((o * x.channels + c) * k + kz) * k + ky) * k + kx;
                                        let xi = ((c * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        acc += (w[wi] * x.data[xi]) as f64;
                                    }
                                }
                            }
                        }
                        t.data[((o * out[0] + oz) * out[1] + oy) * out[2] + ox] = acc as f32;
                    }
                }
            }
        }
        t
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let x = Tensor::from_vec(2, [4, 6, 5], random(&mut rng, 2 * 120)).unwrap();
            let mut ps = ParamStore::default();
            let w = ps.push("w", vec![3, 2, k, k, k], random(&mut rng, 6 * k * k * k));
            let mut g = Graph::new(&ps);
            let xv = g.input(x.clone());
            let y = g.conv(xv, ConvSpec { weight: w, bias: None, kernel: k, stride: s }).unwrap();
            let r = conv_reference(&x, &ps.params[w].data, 3, k, s);
            assert_eq!(g.value(y).spatial, r.spatial);
            for (a, b) in g.value(y).data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn shifted_convolution_gradients_match_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ci, co, k, sp) = (3, 4, 3, [5, 4, 6]);
        let x = Tensor::from_vec(ci, sp, random(&mut rng, ci * 120)).unwrap();
        let w = random(&mut rng, co * ci * 27);
        let gy = random(&mut rng, co * 120);
        let n = 120;
        let rows = ci * 27;
        let cols = im2col(&x, k, 1, 1, sp);
        let mut dw_ref = vec![0.0f32; co * rows];
        gemm(co, n, rows, &gy, n, 1, &cols, 1, n, 1.0, &mut dw_ref);
        let mut dcols = vec![0.0f32; rows * n];
        gemm(rows, co, n, &w, 1, rows, &gy, n, 1, 0.0, &mut dcols);
        let dx_ref = col2im(&dcols, ci, sp, k, 1, 1, sp);
        let mut dw = vec![0.0f32; co * rows];
        let dx = conv_shifted_backward(&x, &w, co, k, &gy, &mut dw);
        for (a, b) in dw.iter().zip(&dw_ref).chain(dx.iter().zip(&dx_ref)) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_only_convolution_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s) in [(3, 1), (3, 2)] {
            let x = Tensor::from_vec(8, [7, 48, 48], random(&mut rng, 8 * 7 * 48 * 48)).unwrap();
            let mut ps = ParamStore::default();
            let w = ps.push("w", vec![5, 8, k, k, k], random(&mut rng, 40 * k * k * k));
            let b = ps.push("b", vec![5], random(&mut rng, 5));
            let spec = ConvSpec { weight: w, bias: Some(b), kernel: k, stride: s };
            let mut full = Graph::new(&ps);
            let xv = full.input(x.clone());
            let yf = full.conv(xv, spec).unwrap();
            let mut slab = Graph::no_grad(&ps);
            let xv = slab.input(x);
            let ys = slab.conv(xv, spec).unwrap();
            assert_eq!(full.value(yf).spatial, slab.value(ys).spatial);
            for (a, b) in full.value(yf).data.iter().zip(&slab.value(ys).data) {
                assert!((a - b).abs() < 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
            }
        }
    }

    /// Finite-difference check of a small graph exercising every op.
    #[test]
    fn graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::default();
        let x = Tensor::from_vec(2, [4, 4, 4], random(&mut rng, 128)).unwrap();
        let x0 = Tensor::from_vec(2, [4, 4, 4], random(&mut rng, 128)).unwrap();
        let c1 = ps.push("c1", vec![3, 2, 3, 3, 3], random(&mut rng, 162));
        let gam = ps.push("g", vec![3], vec![1.1, 0.9, 1.2]);
        let bet = ps.push("b", vec![3], vec![0.1, -0.1, 0.0]);
        let down = ps.push("down", vec![3, 3, 3, 3, 3], random(&mut rng, 243));
        let up = ps.push("up", vec![3, 2, 2, 2, 2], random(&mut rng, 48));
        let ub = ps.push("ub", vec![2], vec![0.05, -0.05]);
        let head = ps.push("head", vec![1, 4, 1, 1, 1], random(&mut rng, 4));
        let hb = ps.push("hb", vec![1], vec![0.2]);
        let target = random(&mut rng, 64);

        let run = |ps: &ParamStore, grads: Option<&mut Vec<Vec<f32>>>| -> f64 {
            let mut g = Graph::new(ps);
            let xv = g.input(x.clone());
            let x0v = g.input(x0.clone());
            let dw = g.diff_weight(x0v, xv, None, 1e-5).unwrap();
            let h = g.conv(dw, ConvSpec { weight: c1, bias: None, kernel: 3, stride: 1 }).unwrap();
            let h = g.norm(h, Some((gam, bet)), 1e-5);
            let h = g.leaky_relu(h);
            let d = g.conv(h, ConvSpec { weight: down, bias: None, kernel: 3, stride: 2 }).unwrap();
            let u = g.up_conv(d, up, Some(ub)).unwrap();
            let u = g.add(u, xv).unwrap();
            let c = g.concat(u, xv).unwrap();
            let o = g.conv(c, ConvSpec { weight: head, bias: Some(hb), kernel: 1, stride: 1 }).unwrap();
            let out = g.value(o).data.clone();
            let loss: f64 = out.iter().zip(&target).map(|(a, b)| (a * b) as f64).sum();
            if let Some(grads) = grads {
                g.backward(o, target.clone(), grads);
            }
            loss
        };
        let mut grads = ps.zeros_like();
        run(&ps, Some(&mut grads));
        let h = 1e-2f32;
        for (pi, p) in ps.params.iter().enumerate() {
            for i in (0..p.data.len()).step_by(5) {
                let mut plus = ps.clone();
                plus.params[pi].data[i] += h;
                let mut minus = ps.clone();
                minus.params[pi].data[i] -= h;
                let fd = (run(&plus, None) - run(&minus, None)) / (2.0 * h as f64);
                let an = grads[pi][i] as f64;
                let tol = 2e-2 * fd.abs().max(an.abs()).max(1.0);
                assert!((fd - an).abs() < tol, "{} [{i}]: fd {fd} vs analytic {an}", p.name);
            }
        }
    }
}
