//! Forward and backward kernels for the layers of the segmentation networks.
//! All tensors are single samples ([`Volume`]); batching happens one level up.

use super::tensor::Volume;

/// Upper bound on the im2col buffer, in floats.
const IM2COL_BUDGET: usize = 1 << 21;

#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa as usize + (k.max(1) - 1) * csa as usize + 1 || k == 0);
    // SAFETY: callers pass slices whose extents cover every (row, col)
    // addressed through the given strides; all strides are non-negative.
    unsafe {
        matrixmultiply::sgemm(
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
        );
    }
}

fn conv_out_dims(dims: [usize; 3], k: usize) -> [usize; 3] {
    [dims[0] + 1 - k, dims[1] + 1 - k, dims[2] + 1 - k]
}

fn planes_per_chunk(rows: usize, plane: usize, total: usize) -> usize {
    (IM2COL_BUDGET / (rows * plane).max(1)).clamp(1, total)
}

fn im2col(x: &Volume, k: usize, z0: usize, nz: usize, out_dims: [usize; 3], cols: &mut [f32]) {
    let [_, ho, wo] = out_dims;
    let p = nz * ho * wo;
    let mut r = 0;
    for ci in 0..x.channels {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for dz in 0..nz {
                        for y in 0..ho {
                            let src = x.index(ci, z0 + dz + kz, y + ky, kx);
                            let dst = (dz * ho + y) * wo;
                            row[dst..dst + wo].copy_from_slice(&x.data[src..src + wo]);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn col2im(dx: &mut Volume, k: usize, z0: usize, nz: usize, out_dims: [usize; 3], cols: &[f32]) {
    let [_, ho, wo] = out_dims;
    let p = nz * ho * wo;
    let mut r = 0;
    for ci in 0..dx.channels {
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[r * p..(r + 1) * p];
                    for dz in 0..nz {
                        for y in 0..ho {
                            let dst = dx.index(ci, z0 + dz + kz, y + ky, kx);
                            let src = (dz * ho + y) * wo;
                            for (d, s) in dx.data[dst..dst + wo].iter_mut().zip(&row[src..src + wo]) {
                                *d += *s;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Wide rows or few channels favour direct summation over im2col.
fn prefers_direct(in_ch: usize, out_ch: usize, out_width: usize) -> bool {
    out_width >= 24 || in_ch * out_ch <= 16
}

fn weight_index(co: usize, ci: usize, cin: usize, k: usize) -> usize {
    (co * cin + ci) * k * k * k
}

fn conv3d_direct(x: &Volume, weight: &[f32], y: &mut Volume, k: usize) {
    let cin = x.channels;
    let od = y.dims;
    let w = od[2];
    let mut acc = vec![0.0f32; w];
    for co in 0..y.channels {
        for z in 0..od[0] {
            for r in 0..od[1] {
                let out = y.index(co, z, r, 0);
                acc.copy_from_slice(&y.data[out..out + w]);
                for ci in 0..cin {
                    let wc = &weight[weight_index(co, ci, cin, k)..];
                    for kz in 0..k {
                        for ky in 0..k {
                            let src = x.index(ci, z + kz, r + ky, 0);
                            let row = &x.data[src..src + w + k - 1];
                            for kx in 0..k {
                                let wv = wc[(kz * k + ky) * k + kx];
                                for (a, &v) in acc.iter_mut().zip(&row[kx..kx + w]) {
                                    *a += wv * v;
                                }
                            }
                        }
                    }
                }
                y.data[out..out + w].copy_from_slice(&acc);
            }
        }
    }
}

fn conv3d_direct_backward(x: &Volume, weight: &[f32], dy: &Volume, k: usize, dweight: &mut [f32], mut dx: Option<&mut Volume>) {
    let cin = x.channels;
    let od = dy.dims;
    let w = od[2];
    for co in 0..dy.channels {
        for z in 0..od[0] {
            for r in 0..od[1] {
                let g = dy.index(co, z, r, 0);
                let grow = &dy.data[g..g + w];
                for ci in 0..cin {
                    let base = weight_index(co, ci, cin, k);
                    for kz in 0..k {
                        for ky in 0..k {
                            let src = x.index(ci, z + kz, r + ky, 0);
                            let row = &x.data[src..src + w + k - 1];
                            for kx in 0..k {
                                let wi = base + (kz * k + ky) * k + kx;
                                dweight[wi] += grow.iter().zip(&row[kx..kx + w]).map(|(a, b)| a * b).sum::<f32>();
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let drow = &mut dx.data[src..src + w + k - 1];
                                for kx in 0..k {
                                    let wv = weight[base + (kz * k + ky) * k + kx];
                                    for (d, &a) in drow[kx..kx + w].iter_mut().zip(grow) {
                                        *d += wv * a;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unpadded convolution with cubic kernel `k`; weights `[out, in, k, k, k]`.
pub fn conv3d(x: &Volume, weight: &[f32], bias: &[f32], out_ch: usize, k: usize) -> Volume {
    let kk = x.channels * k * k * k;
    assert_eq!(weight.len(), out_ch * kk, "conv weight shape");
    let od = conv_out_dims(x.dims, k);
    let mut y = Volume::zeros(out_ch, od);
    let out_n = y.spatial_len();
    for (co, b) in bias.iter().enumerate() {
        y.data[co * out_n..(co + 1) * out_n].fill(*b);
    }
    if k == 1 {
        gemm(out_ch, kk, out_n, weight, kk as isize, 1, &x.data, out_n as isize, 1, 1.0, &mut y.data, out_n as isize, 1);
        return y;
    }
    if prefers_direct(x.channels, out_ch, od[2]) {
        conv3d_direct(x, weight, &mut y, k);
        return y;
    }
    let plane = od[1] * od[2];
    let chunk = planes_per_chunk(kk, plane, od[0]);
    let mut cols = vec![0.0f32; kk * chunk * plane];
    let mut z0 = 0;
    while z0 < od[0] {
        let nz = chunk.min(od[0] - z0);
        let p = nz * plane;
        im2col(x, k, z0, nz, od, &mut cols[..kk * p]);
        gemm(
            out_ch,
            kk,
            p,
            weight,
            kk as isize,
            1,
            &cols[..kk * p],
            p as isize,
            1,
            1.0,
            &mut y.data[z0 * plane..],
            out_n as isize,
            1,
        );
        z0 += nz;
    }
    y
}

/// Accumulates weight and bias gradients and returns the input gradient
/// when `need_dx`.
pub fn conv3d_backward(
    x: &Volume,
    weight: &[f32],
    dy: &Volume,
    k: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_dx: bool,
) -> Option<Volume> {
    let out_ch = dy.channels;
    let kk = x.channels * k * k * k;
    let od = dy.dims;
    let out_n = dy.spatial_len();
    for (co, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[co * out_n..(co + 1) * out_n].iter().sum::<f32>();
    }
    if k == 1 {
        // dW += dY · Xᵀ ; dX = Wᵀ · dY
        gemm(out_ch, out_n, kk, &dy.data, out_n as isize, 1, &x.data, 1, out_n as isize, 1.0, dweight, kk as isize, 1);
        if !need_dx {
            return None;
        }
        let mut dx = Volume::zeros(x.channels, x.dims);
        gemm(kk, out_ch, out_n, weight, 1, kk as isize, &dy.data, out_n as isize, 1, 0.0, &mut dx.data, out_n as isize, 1);
        return Some(dx);
    }
    if prefers_direct(x.channels, out_ch, od[2]) {
        let mut dx = need_dx.then(|| Volume::zeros(x.channels, x.dims));
        conv3d_direct_backward(x, weight, dy, k, dweight, dx.as_mut());
        return dx;
    }
    let plane = od[1] * od[2];
    let chunk = planes_per_chunk(kk, plane, od[0]);
    let mut cols = vec![0.0f32; kk * chunk * plane];
    let mut dcols = if need_dx { vec![0.0f32; kk * chunk * plane] } else { Vec::new() };
    let mut dx = need_dx.then(|| Volume::zeros(x.channels, x.dims));
    let mut z0 = 0;
    while z0 < od[0] {
        let nz = chunk.min(od[0] - z0);
        let p = nz * plane;
        im2col(x, k, z0, nz, od, &mut cols[..kk * p]);
        let dy_chunk = &dy.data[z0 * plane..];
        gemm(out_ch, p, kk, dy_chunk, out_n as isize, 1, &cols[..kk * p], 1, p as isize, 1.0, dweight, kk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            gemm(kk, out_ch, p, weight, 1, kk as isize, dy_chunk, out_n as isize, 1, 0.0, &mut dcols[..kk * p], p as isize, 1);
            col2im(dx, k, z0, nz, od, &dcols[..kk * p]);
        }
        z0 += nz;
    }
    dx
}

/// 2³ max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat index of the selected input element.
pub fn max_pool2(x: &Volume) -> (Volume, Vec<u32>) {
    let od = x.dims.map(|d| d / 2);
    let mut y = Volume::zeros(x.channels, od);
    let mut arg = vec![0u32; y.data.len()];
    let mut o = 0;
    for c in 0..x.channels {
        for z in 0..od[0] {
            for yy in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best_i = x.index(c, 2 * z, 2 * yy, 2 * xx);
                    let mut best = x.data[best_i];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let base = x.index(c, 2 * z + dz, 2 * yy + dy, 2 * xx);
                            for dx in 0..2 {
                                let v = x.data[base + dx];
                                if v > best {
                                    best = v;
                                    best_i = base + dx;
                                }
                            }
                        }
                    }
                    y.data[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &Volume, arg: &[u32], in_dims: [usize; 3]) -> Volume {
    let mut dx = Volume::zeros(dy.channels, in_dims);
    for (g, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] += *g;
    }
    dx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    /// Separable linear interpolation with half-voxel alignment and edge
    /// clamping.
    #[default]
    Trilinear,
    Nearest,
}

/// Source taps for output index `i` of a 2× upsampling along an axis of
/// length `n`.
#[inline]
fn taps(mode: Upsample, i: usize, n: usize) -> [(usize, f32); 2] {
    let k = i / 2;
    match mode {
        Upsample::Nearest => [(k, 1.0), (k, 0.0)],
        Upsample::Trilinear => {
            let other = if i % 2 == 0 { k.saturating_sub(1) } else { (k + 1).min(n - 1) };
            [(k, 0.75), (other, 0.25)]
        }
    }
}

/// Doubles one spatial axis (0 = depth). `shape` is `[outer, n, inner]`.
fn upsample_axis(data: &[f32], outer: usize, n: usize, inner: usize, mode: Upsample) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * 2 * n * inner];
    for o in 0..outer {
        let src = &data[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..2 * n {
            let row = &mut dst[i * inner..(i + 1) * inner];
            for (s, w) in taps(mode, i, n) {
                if w == 0.0 {
                    continue;
                }
                for (d, v) in row.iter_mut().zip(&src[s * inner..(s + 1) * inner]) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

fn upsample_axis_backward(grad: &[f32], outer: usize, n: usize, inner: usize, mode: Upsample) -> Vec<f32> {
    let mut out = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        let g = &grad[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..2 * n {
            let row = &g[i * inner..(i + 1) * inner];
            for (s, w) in taps(mode, i, n) {
                if w == 0.0 {
                    continue;
                }
                for (d, v) in dst[s * inner..(s + 1) * inner].iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
    }
    out
}

/// 2× upsampling of every spatial axis.
pub fn upsample2(x: &Volume, mode: Upsample) -> Volume {
    let [d, h, w] = x.dims;
    let c = x.channels;
    let a = upsample_axis(&x.data, c * d * h, w, 1, mode);
    let b = upsample_axis(&a, c * d, h, 2 * w, mode);
    let out = upsample_axis(&b, c, d, 4 * h * w, mode);
    Volume::from_data(c, [2 * d, 2 * h, 2 * w], out)
}

pub fn upsample2_backward(dy: &Volume, mode: Upsample) -> Volume {
    let [d, h, w] = dy.dims.map(|v| v / 2);
    let c = dy.channels;
    let b = upsample_axis_backward(&dy.data, c, d, 4 * h * w, mode);
    let a = upsample_axis_backward(&b, c * d, h, 2 * w, mode);
    let out = upsample_axis_backward(&a, c * d * h, w, 1, mode);
    Volume::from_data(c, [d, h, w], out)
}

pub fn leaky_relu_in_place(x: &mut Volume, slope: f32) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Gradient through a leaky ReLU given its output.
pub fn leaky_relu_backward(out: &Volume, dy: &mut Volume, slope: f32) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g *= slope;
        }
    }
}

/// Softmax cross-entropy averaged over every voxel of the batch. `targets`
/// hold class indices. Returns the loss and the logit gradients.
pub fn softmax_cross_entropy(logits: &[Volume], targets: &[Vec<u8>]) -> (f32, Vec<Volume>) {
    let total: usize = logits.iter().map(|l| l.spatial_len()).sum();
    let inv = 1.0 / total as f32;
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        let n = l.spatial_len();
        assert_eq!(t.len(), n, "target size");
        let classes = l.channels;
        let mut g = Volume::zeros(classes, l.dims);
        let mut probs = vec![0.0f32; classes];
        for v in 0..n {
            let mut max = f32::NEG_INFINITY;
            for c in 0..classes {
                max = max.max(l.data[c * n + v]);
            }
            let mut sum = 0.0f32;
            for c in 0..classes {
                let e = (l.data[c * n + v] - max).exp();
                probs[c] = e;
                sum += e;
            }
            let target = t[v] as usize;
            let p = (probs[target] / sum) as f64;
            loss -= if p.is_nan() { f64::NAN } else { p.max(1e-30).ln() };
            for c in 0..classes {
                let p = probs[c] / sum;
                g.data[c * n + v] = (p - if c == target { 1.0 } else { 0.0 }) * inv;
            }
        }
        grads.push(g);
    }
    ((loss / total as f64) as f32, grads)
}

/// Per-voxel argmax over channels.
pub fn argmax_channels(logits: &Volume) -> Vec<usize> {
    let n = logits.spatial_len();
    (0..n)
        .map(|v| {
            let mut best = 0;
            for c in 1..logits.channels {
                if logits.data[c * n + v] > logits.data[best * n + v] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Batch-normalization statistics per channel over every sample and voxel.
pub fn channel_stats(xs: &[Volume]) -> (Vec<f64>, Vec<f64>, usize) {
    let c = xs[0].channels;
    let count: usize = xs.iter().map(|x| x.spatial_len()).sum();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let s: f64 = xs.iter().map(|x| x.channel(ch).iter().map(|&v| v as f64).sum::<f64>()).sum();
        let m = s / count as f64;
        let ss: f64 = xs
            .iter()
            .map(|x| x.channel(ch).iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>())
            .sum();
        mean[ch] = m;
        var[ch] = ss / count as f64;
    }
    (mean, var, count)
}
