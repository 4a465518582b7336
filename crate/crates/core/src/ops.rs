//! Dense volumetric primitives: depthwise perception, per-voxel dense maps,
//! batch normalization and resampling, plus the raw kernels their gradients
//! are built from.
//!
//! The forward kernels are written so that the value computed for a voxel
//! depends only on its neighbourhood, never on where the voxel sits inside
//! the array being processed. Tiled and full-frame execution rely on this to
//! agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Zero-padded depthwise cross-correlation of `[b,c,z,y,x]` with `[c,k,k,k]`.
pub fn depthwise_conv3d(input: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let [b, c, z, y, x] = input.dims5()?;
    let k = check_kernels(kernels, c)?;
    let dims = [z, y, x];
    let vox = z * y * x;
    let mut out = Tensor::zeros(vec![b, c, z, y, x]);
    let k3 = k * k * k;
    for (plane, (src, dst)) in input
        .data()
        .chunks_exact(vox)
        .zip(out.data_mut().chunks_exact_mut(vox))
        .enumerate()
    {
        let ch = plane % c;
        let w = &kernels.data()[ch * k3..(ch + 1) * k3];
        conv_plane(src, dims, w, k, [0, 0, 0], dims, dst);
    }
    Ok(out)
}

/// Validate a `[c,k,k,k]` kernel bank and return `k`.
pub(crate) fn check_kernels(kernels: &Tensor, c: usize) -> Result<usize> {
    let &[kc, k0, k1, k2] = kernels.shape() else {
        return Err(Error::Shape(format!(
            "perception kernels must be [c,k,k,k], got {:?}",
            kernels.shape()
        )));
    };
    if kc != c {
        return Err(Error::Shape(format!(
            "kernel bank has {kc} channels, input has {c}"
        )));
    }
    if k0 != k1 || k1 != k2 {
        return Err(Error::Shape(format!(
            "kernels must be cubic, got {k0}x{k1}x{k2}"
        )));
    }
    if k0 % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k0}")));
    }
    Ok(k0)
}

/// Correlate one channel plane with a `k³` kernel, writing the output voxels
/// of the box `[lo, lo + ext)` (in `src` coordinates) into `out`, which has
/// extents `ext`. Taps outside `src` read as zero.
pub(crate) fn conv_plane(
    src: &[f32],
    dims: [usize; 3],
    w: &[f32],
    k: usize,
    lo: [usize; 3],
    ext: [usize; 3],
    out: &mut [f32],
) {
    debug_assert_eq!(src.len(), dims[0] * dims[1] * dims[2]);
    debug_assert_eq!(out.len(), ext[0] * ext[1] * ext[2]);
    let r = (k / 2) as isize;
    for oz in 0..ext[0] {
        let z = (lo[0] + oz) as isize;
        for oy in 0..ext[1] {
            let y = (lo[1] + oy) as isize;
            let row_start = (oz * ext[1] + oy) * ext[2];
            let out_row = &mut out[row_start..row_start + ext[2]];
            out_row.fill(0.0);
            for kz in 0..k {
                let sz = z + kz as isize - r;
                if sz < 0 || sz >= dims[0] as isize {
                    continue;
                }
                for ky in 0..k {
                    let sy = y + ky as isize - r;
                    if sy < 0 || sy >= dims[1] as isize {
                        continue;
                    }
                    let src_row = &src[(sz as usize * dims[1] + sy as usize) * dims[2]..]
                        [..dims[2]];
                    let wrow = &w[(kz * k + ky) * k..][..k];
                    match k {
                        3 => conv_row::<3>(out_row, src_row, wrow, lo[2]),
                        5 => conv_row::<5>(out_row, src_row, wrow, lo[2]),
                        7 => conv_row::<7>(out_row, src_row, wrow, lo[2]),
                        _ => conv_row_any(out_row, src_row, wrow, lo[2]),
                    }
                }
            }
        }
    }
}

/// `out[x] += Σ_kx w[kx]·src[lo + x + kx − r]` over in-range taps, adding
/// taps in ascending `kx` so every kernel size rounds the same way.
fn conv_row_any(out: &mut [f32], src: &[f32], w: &[f32], lo: usize) {
    let r = (w.len() / 2) as isize;
    let nx = src.len() as isize;
    for (x, o) in out.iter_mut().enumerate() {
        let c = lo as isize + x as isize - r;
        let mut acc = *o;
        for (kx, &wv) in w.iter().enumerate() {
            let sx = c + kx as isize;
            if sx >= 0 && sx < nx {
                acc += wv * src[sx as usize];
            }
        }
        *o = acc;
    }
}

fn conv_row<const K: usize>(out: &mut [f32], src: &[f32], w: &[f32], lo: usize) {
    let r = K / 2;
    let w: [f32; K] = w.try_into().expect("kernel row");
    // x in [a, b) has every tap in range
    let a = r.saturating_sub(lo).min(out.len());
    let b = src.len().saturating_sub(lo + r).min(out.len()).max(a);
    conv_row_any(&mut out[..a], src, &w, lo);
    // lo + a >= r whenever the interior is non-empty
    let base = (lo + a).saturating_sub(r);
    for (i, o) in out[a..b].iter_mut().enumerate() {
        let s = &src[base + i..base + i + K];
        let mut acc = *o;
        for kx in 0..K {
            acc += w[kx] * s[kx];
        }
        *o = acc;
    }
    conv_row_any(&mut out[b..], src, &w, lo + b);
}

/// Gradient of [`conv_plane`] (full box) with respect to its input.
pub(crate) fn conv_plane_backward_input(
    dy: &[f32],
    dims: [usize; 3],
    w: &[f32],
    k: usize,
    dx: &mut [f32],
) {
    let r = (k / 2) as isize;
    let nx = dims[2] as isize;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let dy_row = &dy[(z * dims[1] + y) * dims[2]..][..dims[2]];
            for kz in 0..k {
                let sz = z as isize + kz as isize - r;
                if sz < 0 || sz >= dims[0] as isize {
                    continue;
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= dims[1] as isize {
                        continue;
                    }
                    let row = (sz as usize * dims[1] + sy as usize) * dims[2];
                    let dx_row = &mut dx[row..row + dims[2]];
                    for kx in 0..k {
                        let wv = w[(kz * k + ky) * k + kx];
                        let off = kx as isize - r;
                        let start = (-off).max(0) as usize;
                        let end = (nx - off).min(nx) as usize;
                        if end <= start {
                            continue;
                        }
                        let d = &mut dx_row[(start as isize + off) as usize..(end as isize + off) as usize];
                        for (g, &v) in d.iter_mut().zip(&dy_row[start..end]) {
                            *g += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of [`conv_plane`] (full box) with respect to its kernel,
/// accumulated into `dw`.
pub(crate) fn conv_plane_backward_kernel(
    dy: &[f32],
    x: &[f32],
    dims: [usize; 3],
    k: usize,
    dw: &mut [f64],
) {
    let r = (k / 2) as isize;
    let nx = dims[2] as isize;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let dy_row = &dy[(z * dims[1] + y) * dims[2]..][..dims[2]];
            for kz in 0..k {
                let sz = z as isize + kz as isize - r;
                if sz < 0 || sz >= dims[0] as isize {
                    continue;
                }
                for ky in 0..k {
                    let sy = y as isize + ky as isize - r;
                    if sy < 0 || sy >= dims[1] as isize {
                        continue;
                    }
                    let x_row = &x[(sz as usize * dims[1] + sy as usize) * dims[2]..][..dims[2]];
                    for kx in 0..k {
                        let off = kx as isize - r;
                        let start = (-off).max(0) as usize;
                        let end = (nx - off).min(nx) as usize;
                        if end <= start {
                            continue;
                        }
                        let xs = &x_row[(start as isize + off) as usize..(end as isize + off) as usize];
                        dw[(kz * k + ky) * k + kx] += dot(&dy_row[start..end], xs) as f64;
                    }
                }
            }
        }
    }
}

/// Lane-split dot product (vectorizes; fixed summation order).
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

/// `C = A·B + beta·C` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    // SAFETY: the three asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Apply `weight·x + bias` to a `[f, n]` block of voxel columns.
pub(crate) fn dense_block(x: &[f32], f: usize, n: usize, weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let fo = bias.len();
    gemm(fo, f, n, weight, f, 1, x, n, 1, 0.0, out, n, 1);
    for (row, &b) in out.chunks_exact_mut(n).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

/// The same affine map applied independently at every voxel.
pub fn dense_per_voxel(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [b, f, z, y, x] = input.dims5()?;
    let fo = check_dense(weight, bias, f)?;
    let vox = z * y * x;
    let mut out = Tensor::zeros(vec![b, fo, z, y, x]);
    for (src, dst) in input
        .data()
        .chunks_exact(f * vox)
        .zip(out.data_mut().chunks_exact_mut(fo * vox))
    {
        dense_block(src, f, vox, weight.data(), bias.data(), dst);
    }
    Ok(out)
}

pub(crate) fn check_dense(weight: &Tensor, bias: &Tensor, f: usize) -> Result<usize> {
    let &[fo, fi] = weight.shape() else {
        return Err(Error::Shape(format!(
            "dense weight must be [out,in], got {:?}",
            weight.shape()
        )));
    };
    if fi != f {
        return Err(Error::Shape(format!(
            "dense weight expects {fi} input features, input has {f}"
        )));
    }
    if bias.shape() != [fo] {
        return Err(Error::Shape(format!(
            "dense bias must be [{fo}], got {:?}",
            bias.shape()
        )));
    }
    Ok(fo)
}

/// Affine parameters and running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::filled(vec![channels], 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `sqrt(running_var + eps)`.
    pub(crate) fn eval_denominators(&self) -> Vec<f32> {
        self.running_var
            .data()
            .iter()
            .map(|&v| (v + BN_EPS).sqrt())
            .collect()
    }

    pub(crate) fn update_running(&mut self, stats: &BatchStats) {
        let m = BN_MOMENTUM;
        for (rm, &mean) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *rm = (1.0 - m) * *rm + m * mean;
        }
        for (rv, &var) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *rv = (1.0 - m) * *rv + m * var as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    Train,
    #[default]
    Eval,
}

/// Per-channel batch statistics over `(b, z, y, x)`.
#[derive(Clone, Debug)]
pub(crate) struct BatchStats {
    pub mean: Vec<f32>,
    pub invstd: Vec<f32>,
    pub var_unbiased: Vec<f64>,
}

pub(crate) fn batch_stats(x: &[f32], b: usize, ch: usize, vox: usize) -> Result<BatchStats> {
    let count = b * vox;
    if count < 2 {
        return Err(Error::DegenerateBatch(count));
    }
    let mut mean = vec![0.0f32; ch];
    let mut invstd = vec![0.0f32; ch];
    let mut var_unbiased = vec![0.0f64; ch];
    for c in 0..ch {
        let mut s = 0.0f64;
        for bi in 0..b {
            s += x[(bi * ch + c) * vox..][..vox].iter().map(|&v| v as f64).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0f64;
        for bi in 0..b {
            ss += x[(bi * ch + c) * vox..][..vox]
                .iter()
                .map(|&v| {
                    let d = v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let var = ss / count as f64;
        mean[c] = mu as f32;
        invstd[c] = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
        var_unbiased[c] = ss / (count - 1) as f64;
    }
    Ok(BatchStats {
        mean,
        invstd,
        var_unbiased,
    })
}

#[inline]
pub(crate) fn bn_eval_scalar(x: f32, mean: f32, denom: f32, gamma: f32, beta: f32) -> f32 {
    (x - mean) / denom * gamma + beta
}

pub(crate) fn bn_train_apply(
    x: &[f32],
    b: usize,
    ch: usize,
    vox: usize,
    stats: &BatchStats,
    gamma: &[f32],
    beta: &[f32],
    out: &mut [f32],
) {
    for bi in 0..b {
        for c in 0..ch {
            let o = (bi * ch + c) * vox;
            let (m, s, g, bt) = (stats.mean[c], stats.invstd[c], gamma[c], beta[c]);
            for (d, &v) in out[o..o + vox].iter_mut().zip(&x[o..o + vox]) {
                *d = (v - m) * s * g + bt;
            }
        }
    }
}

pub(crate) fn bn_eval_apply(
    x: &[f32],
    b: usize,
    ch: usize,
    vox: usize,
    params: &BatchNormParams,
    out: &mut [f32],
) {
    let denom = params.eval_denominators();
    let (rm, g, bt) = (
        params.running_mean.data(),
        params.gamma.data(),
        params.beta.data(),
    );
    for bi in 0..b {
        for c in 0..ch {
            let o = (bi * ch + c) * vox;
            for (d, &v) in out[o..o + vox].iter_mut().zip(&x[o..o + vox]) {
                *d = bn_eval_scalar(v, rm[c], denom[c], g[c], bt[c]);
            }
        }
    }
}

/// Batch normalization over `(b, z, y, x)` per channel.
///
/// Train mode normalizes with batch statistics and updates the running
/// estimates (momentum 0.1, unbiased variance); eval mode uses the running
/// estimates. `eps = 1e-5`.
pub fn batchnorm3d(input: &Tensor, params: &mut BatchNormParams, mode: BnMode) -> Result<Tensor> {
    let [b, ch, z, y, x] = input.dims5()?;
    if params.channels() != ch {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {ch}",
            params.channels()
        )));
    }
    let vox = z * y * x;
    let mut out = Tensor::zeros(input.shape().to_vec());
    match mode {
        BnMode::Train => {
            let stats = batch_stats(input.data(), b, ch, vox)?;
            bn_train_apply(
                input.data(),
                b,
                ch,
                vox,
                &stats,
                params.gamma.data(),
                params.beta.data(),
                out.data_mut(),
            );
            params.update_running(&stats);
        }
        BnMode::Eval => bn_eval_apply(input.data(), b, ch, vox, params, out.data_mut()),
    }
    Ok(out)
}

/// Rational scale factor `num / den` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Self {
        Self { num, den }
    }

    pub fn up(factor: u32) -> Self {
        Self { num: factor, den: 1 }
    }

    pub fn down(factor: u32) -> Self {
        Self { num: 1, den: factor }
    }

    fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleMode {
    #[default]
    Nearest,
    Trilinear,
    Meanpool,
}

/// Source taps along one axis for every destination coordinate:
/// `out[i] = (1 - w1[i]) * in[i0[i]] + w1[i] * in[i1[i]]`.
#[derive(Clone, Debug)]
pub(crate) struct AxisMap {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f32>,
}

impl AxisMap {
    /// Map destination coordinates `dst_origin..dst_origin+dst_len` onto a
    /// source window `src_origin..src_origin+src_len`, both in global
    /// coordinates of their own grids, for scale `ratio` (dst per src).
    pub fn new(
        src_origin: usize,
        src_len: usize,
        dst_origin: usize,
        dst_len: usize,
        ratio: Ratio,
        linear: bool,
    ) -> Self {
        let mut i0 = Vec::with_capacity(dst_len);
        let mut i1 = Vec::with_capacity(dst_len);
        let mut w1 = Vec::with_capacity(dst_len);
        let last = src_len as isize - 1;
        for d in 0..dst_len {
            let g = (dst_origin + d) as u64;
            if linear {
                let pos = (g as f64 + 0.5) * ratio.den as f64 / ratio.num as f64 - 0.5;
                let local = (pos - src_origin as f64).clamp(0.0, last as f64);
                let a = local.floor() as isize;
                let b = (a + 1).min(last);
                i0.push(a as usize);
                i1.push(b as usize);
                w1.push((local - a as f64) as f32);
            } else {
                let src = (g * ratio.den as u64 / ratio.num as u64) as isize - src_origin as isize;
                let s = src.clamp(0, last) as usize;
                i0.push(s);
                i1.push(s);
                w1.push(0.0);
            }
        }
        Self { i0, i1, w1 }
    }
}

/// Resample one plane through separable axis maps.
pub(crate) fn resample_plane(
    src: &[f32],
    sdims: [usize; 3],
    maps: &[AxisMap; 3],
    linear: bool,
    out: &mut [f32],
) {
    let (nz, ny, nx) = (maps[0].i0.len(), maps[1].i0.len(), maps[2].i0.len());
    let at = |z: usize, y: usize, x: usize| src[(z * sdims[1] + y) * sdims[2] + x];
    for z in 0..nz {
        for y in 0..ny {
            let row = &mut out[(z * ny + y) * nx..][..nx];
            if !linear {
                let (sz, sy) = (maps[0].i0[z], maps[1].i0[y]);
                for (x, o) in row.iter_mut().enumerate() {
                    *o = at(sz, sy, maps[2].i0[x]);
                }
                continue;
            }
            let (z0, z1, wz) = (maps[0].i0[z], maps[0].i1[z], maps[0].w1[z]);
            let (y0, y1, wy) = (maps[1].i0[y], maps[1].i1[y], maps[1].w1[y]);
            for (x, o) in row.iter_mut().enumerate() {
                let (x0, x1, wx) = (maps[2].i0[x], maps[2].i1[x], maps[2].w1[x]);
                let c00 = at(z0, y0, x0) * (1.0 - wx) + at(z0, y0, x1) * wx;
                let c01 = at(z0, y1, x0) * (1.0 - wx) + at(z0, y1, x1) * wx;
                let c10 = at(z1, y0, x0) * (1.0 - wx) + at(z1, y0, x1) * wx;
                let c11 = at(z1, y1, x0) * (1.0 - wx) + at(z1, y1, x1) * wx;
                let c0 = c00 * (1.0 - wy) + c01 * wy;
                let c1 = c10 * (1.0 - wy) + c11 * wy;
                *o = c0 * (1.0 - wz) + c1 * wz;
            }
        }
    }
}

/// Transpose of [`resample_plane`], accumulated into `dsrc`.
pub(crate) fn resample_plane_backward(
    dout: &[f32],
    sdims: [usize; 3],
    maps: &[AxisMap; 3],
    linear: bool,
    dsrc: &mut [f32],
) {
    let (nz, ny, nx) = (maps[0].i0.len(), maps[1].i0.len(), maps[2].i0.len());
    let idx = |z: usize, y: usize, x: usize| (z * sdims[1] + y) * sdims[2] + x;
    for z in 0..nz {
        for y in 0..ny {
            let row = &dout[(z * ny + y) * nx..][..nx];
            if !linear {
                let (sz, sy) = (maps[0].i0[z], maps[1].i0[y]);
                for (x, &g) in row.iter().enumerate() {
                    dsrc[idx(sz, sy, maps[2].i0[x])] += g;
                }
                continue;
            }
            let (z0, z1, wz) = (maps[0].i0[z], maps[0].i1[z], maps[0].w1[z]);
            let (y0, y1, wy) = (maps[1].i0[y], maps[1].i1[y], maps[1].w1[y]);
            for (x, &g) in row.iter().enumerate() {
                let (x0, x1, wx) = (maps[2].i0[x], maps[2].i1[x], maps[2].w1[x]);
                for (zz, fz) in [(z0, 1.0 - wz), (z1, wz)] {
                    for (yy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                        for (xx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                            dsrc[idx(zz, yy, xx)] += g * fz * fy * fx;
                        }
                    }
                }
            }
        }
    }
}

fn scaled_extent(e: usize, r: Ratio) -> usize {
    ((e as f64 * r.as_f64()).round() as usize).max(1)
}

/// Resample the three trailing spatial axes of a tensor.
///
/// Nearest and trilinear produce `round(extent × factor)` voxels (at least
/// one); nearest maps `src = floor(dst / factor)`, trilinear samples voxel
/// centres. Meanpool needs factors of the form `1/m` and averages
/// non-overlapping `m`-blocks; a trailing partial block is averaged over the
/// voxels it has, giving `ceil(extent / m)` outputs.
pub fn resample(input: &Tensor, factor: [Ratio; 3], mode: ResampleMode) -> Result<Tensor> {
    for r in factor {
        if r.num == 0 || r.den == 0 {
            return Err(Error::Config(format!(
                "resample factor must be positive, got {}/{}",
                r.num, r.den
            )));
        }
    }
    let shape = input.shape();
    if shape.len() < 3 {
        return Err(Error::Shape(format!(
            "resample needs three spatial axes, got {shape:?}"
        )));
    }
    let lead = &shape[..shape.len() - 3];
    let sdims = [
        shape[shape.len() - 3],
        shape[shape.len() - 2],
        shape[shape.len() - 1],
    ];
    let planes: usize = lead.iter().product();
    let svox = sdims.iter().product::<usize>();

    let ddims: [usize; 3] = match mode {
        ResampleMode::Meanpool => {
            let mut d = [0; 3];
            for a in 0..3 {
                if factor[a].num != 1 {
                    return Err(Error::Config(format!(
                        "meanpool needs factors 1/m, got {}/{}",
                        factor[a].num, factor[a].den
                    )));
                }
                d[a] = sdims[a].div_ceil(factor[a].den as usize);
            }
            d
        }
        _ => [
            scaled_extent(sdims[0], factor[0]),
            scaled_extent(sdims[1], factor[1]),
            scaled_extent(sdims[2], factor[2]),
        ],
    };
    let dvox = ddims.iter().product::<usize>();
    let mut out_shape = lead.to_vec();
    out_shape.extend_from_slice(&ddims);
    let mut out = Tensor::zeros(out_shape);

    if mode == ResampleMode::Meanpool {
        let m = [
            factor[0].den as usize,
            factor[1].den as usize,
            factor[2].den as usize,
        ];
        for (src, dst) in input
            .data()
            .chunks_exact(svox)
            .zip(out.data_mut().chunks_exact_mut(dvox))
        {
            meanpool_plane(src, sdims, m, ddims, dst);
        }
        return Ok(out);
    }

    let linear = mode == ResampleMode::Trilinear;
    let maps = [
        AxisMap::new(0, sdims[0], 0, ddims[0], factor[0], linear),
        AxisMap::new(0, sdims[1], 0, ddims[1], factor[1], linear),
        AxisMap::new(0, sdims[2], 0, ddims[2], factor[2], linear),
    ];
    for p in 0..planes {
        resample_plane(
            &input.data()[p * svox..(p + 1) * svox],
            sdims,
            &maps,
            linear,
            &mut out.data_mut()[p * dvox..(p + 1) * dvox],
        );
    }
    Ok(out)
}

fn meanpool_plane(src: &[f32], sdims: [usize; 3], m: [usize; 3], ddims: [usize; 3], out: &mut [f32]) {
    for z in 0..ddims[0] {
        for y in 0..ddims[1] {
            for x in 0..ddims[2] {
                let mut s = 0.0f64;
                let mut n = 0usize;
                for sz in z * m[0]..((z + 1) * m[0]).min(sdims[0]) {
                    for sy in y * m[1]..((y + 1) * m[1]).min(sdims[1]) {
                        for sx in x * m[2]..((x + 1) * m[2]).min(sdims[2]) {
                            s += src[(sz * sdims[1] + sy) * sdims[2] + sx] as f64;
                            n += 1;
                        }
                    }
                }
                out[(z * ddims[1] + y) * ddims[2] + x] = (s / n as f64) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_of_zeros_is_zero() {
        let input = Tensor::zeros(vec![2, 3, 4, 5, 6]);
        let kernels = random_tensor(&[3, 3, 3, 3], 1);
        let out = depthwise_conv3d(&input, &kernels).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let input = random_tensor(&[1, 2, 4, 5, 3], 2);
        for k in [1, 3, 5] {
            let mut kernels = Tensor::zeros(vec![2, k, k, k]);
            let centre = (k * k * k) / 2;
            kernels.data_mut()[centre] = 1.0;
            kernels.data_mut()[k * k * k + centre] = 1.0;
            let out = depthwise_conv3d(&input, &kernels).unwrap();
            assert_eq!(out, input);
        }
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let input = Tensor::filled(vec![1, 1, 3, 3, 3], 1.0);
        let kernels = Tensor::filled(vec![1, 3, 3, 3], 1.0);
        let out = depthwise_conv3d(&input, &kernels).unwrap();
        let at = |z: usize, y: usize, x: usize| out.data()[(z * 3 + y) * 3 + x];
        assert_eq!(at(1, 1, 1), 27.0);
        assert_eq!(at(0, 0, 0), 8.0);
        assert_eq!(at(0, 1, 1), 18.0);
        assert_eq!(at(0, 0, 1), 12.0);
    }

    #[test]
    fn even_kernel_is_config_error() {
        let input = Tensor::zeros(vec![1, 1, 4, 4, 4]);
        let kernels = Tensor::zeros(vec![1, 2, 2, 2]);
        assert!(matches!(
            depthwise_conv3d(&input, &kernels),
            Err(Error::Config(_))
        ));
        let wrong_c = Tensor::zeros(vec![2, 3, 3, 3]);
        assert!(matches!(
            depthwise_conv3d(&input, &wrong_c),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let input = random_tensor(&[2, 2, 5, 4, 6], 3);
        let kernels = random_tensor(&[2, 3, 3, 3], 4);
        let out = depthwise_conv3d(&input, &kernels).unwrap();
        let [b, c, z, y, x] = input.dims5().unwrap();
        for bi in 0..b {
            for ci in 0..c {
                for zi in 0..z {
                    for yi in 0..y {
                        for xi in 0..x {
                            let mut s = 0.0f64;
                            for kz in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let (sz, sy, sx) = (
                                            zi as isize + kz - 1,
                                            yi as isize + ky - 1,
                                            xi as isize + kx - 1,
                                        );
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= z as isize || sy >= y as isize || sx >= x as isize {
                                            continue;
                                        }
                                        let iv = input.data()[(((bi * c + ci) * z + sz as usize) * y + sy as usize) * x + sx as usize];
                                        let kv = kernels.data()[((ci * 3 + kz as usize) * 3 + ky as usize) * 3 + kx as usize];
                                        s += iv as f64 * kv as f64;
                                    }
                                }
                            }
                            let got = out.data()[(((bi * c + ci) * z + zi) * y + yi) * x + xi];
                            assert!((got as f64 - s).abs() < 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_region_is_position_independent() {
        let input = random_tensor(&[1, 1, 7, 8, 9], 5);
        let kernels = random_tensor(&[1, 3, 3, 3], 6);
        let full = depthwise_conv3d(&input, &kernels).unwrap();
        let mut sub = vec![0.0; 3 * 4 * 5];
        conv_plane(input.data(), [7, 8, 9], kernels.data(), 3, [2, 1, 3], [3, 4, 5], &mut sub);
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let g = full.data()[((z + 2) * 8 + y + 1) * 9 + x + 3];
                    assert_eq!(g.to_bits(), sub[(z * 4 + y) * 5 + x].to_bits());
                }
            }
        }
    }

    #[test]
    fn dense_identity_and_sum() {
        let input = random_tensor(&[2, 3, 2, 2, 2], 7);
        let eye = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let out = dense_per_voxel(&input, &eye, &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(out, input);

        let ones = Tensor::filled(vec![1, 2, 2, 2, 2], 1.0);
        let w = Tensor::filled(vec![1, 2], 1.0);
        let out = dense_per_voxel(&ones, &w, &Tensor::zeros(vec![1])).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.0));

        let bad = Tensor::zeros(vec![3, 4]);
        assert!(matches!(
            dense_per_voxel(&input, &bad, &Tensor::zeros(vec![3])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dense_matches_per_voxel_loop() {
        let input = random_tensor(&[1, 2, 2, 2, 2], 8);
        let w = random_tensor(&[3, 2], 9);
        let bias = random_tensor(&[3], 10);
        let out = dense_per_voxel(&input, &w, &bias).unwrap();
        for v in 0..8 {
            for o in 0..3 {
                let mut s = bias.data()[o] as f64;
                for i in 0..2 {
                    s += w.data()[o * 2 + i] as f64 * input.data()[i * 8 + v] as f64;
                }
                assert!((out.data()[o * 8 + v] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let input = random_tensor(&[2, 3, 3, 3, 3], 11);
        let mut p = BatchNormParams::new(3);
        let out = batchnorm3d(&input, &mut p, BnMode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| out.data()[(b * 3 + c) * 27..][..27].iter().map(|&v| v as f64))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "{mean}");
            // eps shifts the variance by ~eps / var
            assert!((var - 1.0).abs() < 1e-3, "{var}");
        }
        assert!(p.running_mean.data().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let input = random_tensor(&[1, 2, 2, 2, 2], 12);
        let mut p = BatchNormParams::new(2);
        p.gamma = Tensor::zeros(vec![2]);
        p.beta = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        for mode in [BnMode::Train, BnMode::Eval] {
            let out = batchnorm3d(&input, &mut p.clone(), mode).unwrap();
            assert!(out.data()[..8].iter().all(|&v| v == 0.25));
            assert!(out.data()[8..].iter().all(|&v| v == -3.0));
        }
    }

    #[test]
    fn batchnorm_eval_matches_scalar_formula() {
        let input = random_tensor(&[1, 2, 2, 2, 2], 13);
        let mut p = BatchNormParams::new(2);
        p.running_mean = Tensor::new(vec![2], vec![0.3, -0.2]).unwrap();
        p.running_var = Tensor::new(vec![2], vec![0.5, 2.0]).unwrap();
        p.gamma = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
        p.beta = Tensor::new(vec![2], vec![0.1, -0.4]).unwrap();
        let out = batchnorm3d(&input, &mut p.clone(), BnMode::Eval).unwrap();
        for c in 0..2 {
            for v in 0..8 {
                let x = input.data()[c * 8 + v] as f64;
                let m = p.running_mean.data()[c] as f64;
                let var = p.running_var.data()[c] as f64;
                let want = (x - m) / (var + 1e-5).sqrt() * p.gamma.data()[c] as f64
                    + p.beta.data()[c] as f64;
                assert!((out.data()[c * 8 + v] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batchnorm_single_element_is_degenerate() {
        let input = Tensor::zeros(vec![1, 2, 1, 1, 1]);
        let mut p = BatchNormParams::new(2);
        assert!(matches!(
            batchnorm3d(&input, &mut p, BnMode::Train),
            Err(Error::DegenerateBatch(1))
        ));
        assert!(batchnorm3d(&input, &mut p, BnMode::Eval).is_ok());
    }

    #[test]
    fn resample_identity_and_replication() {
        let input = random_tensor(&[1, 2, 3, 4, 5], 14);
        for mode in [ResampleMode::Nearest, ResampleMode::Trilinear, ResampleMode::Meanpool] {
            let out = resample(&input, [Ratio::ONE; 3], mode).unwrap();
            assert_eq!(out, input);
        }
        let small = random_tensor(&[1, 1, 2, 2, 2], 15);
        let up = resample(&small, [Ratio::up(2); 3], ResampleMode::Nearest).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(
                        up.data()[(z * 4 + y) * 4 + x],
                        small.data()[((z / 2) * 2 + y / 2) * 2 + x / 2]
                    );
                }
            }
        }
        assert!(matches!(
            resample(&small, [Ratio::new(0, 1); 3], ResampleMode::Nearest),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn meanpool_averages_blocks() {
        let ramp = Tensor::from_fn(vec![4, 4, 4], |i| i as f32);
        let out = resample(&ramp, [Ratio::down(2); 3], ResampleMode::Meanpool).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += ramp.data()[((2 * z + dz) * 4 + 2 * y + dy) * 4 + 2 * x + dx];
                            }
                        }
                    }
                    assert_eq!(out.data()[(z * 2 + y) * 2 + x], s / 8.0);
                }
            }
        }
    }

    #[test]
    fn trilinear_preserves_constants() {
        let input = Tensor::filled(vec![1, 1, 3, 3, 3], 0.75);
        let out = resample(&input, [Ratio::up(3); 3], ResampleMode::Trilinear).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn conv_is_linear(seed in 0u64..1000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let x = random_tensor(&[1, 2, 4, 3, 5], seed);
            let y = random_tensor(&[1, 2, 4, 3, 5], seed + 1);
            let k = random_tensor(&[2, 3, 3, 3], seed + 2);
            let mut mix = x.clone();
            for (m, (&xv, &yv)) in mix.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
                *m = a * xv + b * yv;
            }
            let lhs = depthwise_conv3d(&mix, &k).unwrap();
            let cx = depthwise_conv3d(&x, &k).unwrap();
            let cy = depthwise_conv3d(&y, &k).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * cx.data()[i] + b * cy.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-5);
            }
        }

        #[test]
        fn nearest_upsample_then_stride_is_identity(
            seed in 0u64..1000, f in 1u32..4, z in 1usize..4, y in 1usize..4, x in 1usize..4
        ) {
            let input = random_tensor(&[1, z, y, x], seed);
            let up = resample(&input, [Ratio::up(f); 3], ResampleMode::Nearest).unwrap();
            let f = f as usize;
            let (uy, ux) = (y * f, x * f);
            for zi in 0..z {
                for yi in 0..y {
                    for xi in 0..x {
                        let u = up.data()[((zi * f) * uy + yi * f) * ux + xi * f];
                        prop_assert_eq!(u, input.data()[(zi * y + yi) * x + xi]);
                    }
                }
            }
        }
    }
}
