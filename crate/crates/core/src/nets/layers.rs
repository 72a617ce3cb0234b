use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{self, Upsample};
use super::tensor::{concat_channels, split_channels, uncrop, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Weight,
    /// Running statistic; saved in checkpoints, never optimized.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
}

impl Param {
    fn new(value: Vec<f32>, shape: Vec<usize>, kind: ParamKind) -> Self {
        let grad = match kind {
            ParamKind::Weight => vec![0.0; value.len()],
            ParamKind::Buffer => Vec::new(),
        };
        Self {
            value,
            grad,
            shape,
            kind,
            trainable: kind == ParamKind::Weight,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Named parameter listing, implemented by every layer.
pub trait Params {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
}

impl Conv {
    /// He-normal initialization for leaky-ReLU networks.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let fan_in = in_ch * k * k * k;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("finite std");
        let weight = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::new(weight, vec![out_ch, in_ch, k, k, k], ParamKind::Weight),
            bias: Param::new(vec![0.0; out_ch], vec![out_ch], ParamKind::Weight),
            in_ch,
            out_ch,
            k,
        }
    }

    pub fn forward(&self, x: &Volume) -> Volume {
        ops::conv3d(x, &self.weight.value, &self.bias.value, self.out_ch, self.k)
    }

    pub fn backward(&mut self, x: &Volume, dy: &Volume, need_dx: bool) -> Option<Volume> {
        ops::conv3d_backward(x, &self.weight.value, dy, self.k, &mut self.weight.grad, &mut self.bias.grad, need_dx)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.weight.trainable = trainable;
        self.bias.trainable = trainable;
    }
}

impl Params for Conv {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Clone)]
struct BnCache {
    xhat: Vec<Volume>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels], vec![channels], ParamKind::Weight),
            beta: Param::new(vec![0.0; channels], vec![channels], ParamKind::Weight),
            running_mean: Param::new(vec![0.0; channels], vec![channels], ParamKind::Buffer),
            running_var: Param::new(vec![1.0; channels], vec![channels], ParamKind::Buffer),
        }
    }

    fn forward_train(&mut self, xs: &[Volume]) -> (Vec<Volume>, BnCache) {
        let (mean, var, count) = ops::channel_stats(xs);
        let channels = mean.len();
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..channels {
            let rm = &mut self.running_mean.value[c];
            *rm = ((1.0 - BN_MOMENTUM) * *rm as f64 + BN_MOMENTUM * mean[c]) as f32;
            let rv = &mut self.running_var.value[c];
            *rv = ((1.0 - BN_MOMENTUM) * *rv as f64 + BN_MOMENTUM * var[c] * unbias) as f32;
        }
        let mut xhats = Vec::with_capacity(xs.len());
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xhat = x.clone();
            let mut y = x.clone();
            let n = x.spatial_len();
            for c in 0..channels {
                let m = mean[c] as f32;
                let (g, b, s) = (self.gamma.value[c], self.beta.value[c], inv_std[c]);
                let range = c * n..(c + 1) * n;
                for (h, o) in xhat.data[range.clone()].iter_mut().zip(&mut y.data[range]) {
                    *h = (*h - m) * s;
                    *o = g * *h + b;
                }
            }
            xhats.push(xhat);
            ys.push(y);
        }
        (ys, BnCache { xhat: xhats, inv_std })
    }

    fn forward_eval(&self, x: &Volume) -> Volume {
        let mut y = x.clone();
        let n = x.spatial_len();
        for c in 0..x.channels {
            let s = (1.0 / (self.running_var.value[c] as f64 + BN_EPS).sqrt()) as f32;
            let scale = self.gamma.value[c] * s;
            let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
            for v in &mut y.data[c * n..(c + 1) * n] {
                *v = *v * scale + shift;
            }
        }
        y
    }

    fn backward(&mut self, cache: &BnCache, dys: &[Volume], need_dx: bool) -> Option<Vec<Volume>> {
        let channels = self.gamma.value.len();
        let count: usize = dys.iter().map(|d| d.spatial_len()).sum();
        let mut sum_dy = vec![0.0f64; channels];
        let mut sum_dy_xhat = vec![0.0f64; channels];
        for (dy, xhat) in dys.iter().zip(&cache.xhat) {
            for c in 0..channels {
                for (&g, &h) in dy.channel(c).iter().zip(xhat.channel(c)) {
                    sum_dy[c] += g as f64;
                    sum_dy_xhat[c] += (g * h) as f64;
                }
            }
        }
        for c in 0..channels {
            self.gamma.grad[c] += sum_dy_xhat[c] as f32;
            self.beta.grad[c] += sum_dy[c] as f32;
        }
        if !need_dx {
            return None;
        }
        let nf = count as f32;
        Some(
            dys.iter()
                .zip(&cache.xhat)
                .map(|(dy, xhat)| {
                    let mut dx = dy.clone();
                    let n = dy.spatial_len();
                    for c in 0..channels {
                        let k = self.gamma.value[c] * cache.inv_std[c] / nf;
                        let (sd, sdx) = (sum_dy[c] as f32, sum_dy_xhat[c] as f32);
                        for (d, &h) in dx.data[c * n..(c + 1) * n].iter_mut().zip(xhat.channel(c)) {
                            *d = k * (nf * *d - sd - h * sdx);
                        }
                    }
                    dx
                })
                .collect(),
        )
    }

    fn set_trainable(&mut self, trainable: bool) {
        self.gamma.trainable = trainable;
        self.beta.trainable = trainable;
    }
}

impl Params for BatchNorm {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}

/// Batch normalization → unpadded 3³ convolution → leaky ReLU.
#[derive(Clone)]
pub struct ConvBlock {
    pub bn: BatchNorm,
    pub conv: Conv,
    slope: f32,
    cache: Option<BlockCache>,
}

impl std::fmt::Debug for ConvBlock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConvBlock")
            .field("in", &self.conv.in_ch)
            .field("out", &self.conv.out_ch)
            .finish()
    }
}

#[derive(Clone)]
struct BlockCache {
    bn: BnCache,
    normed: Vec<Volume>,
    out: Vec<Volume>,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_ch: usize, out_ch: usize, slope: f32) -> Self {
        Self {
            bn: BatchNorm::new(in_ch),
            conv: Conv::new(rng, in_ch, out_ch, 3),
            slope,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_ch
    }

    pub fn forward(&mut self, xs: &[Volume], mode: Mode) -> Vec<Volume> {
        match mode {
            Mode::Eval => xs
                .iter()
                .map(|x| {
                    let mut y = self.conv.forward(&self.bn.forward_eval(x));
                    ops::leaky_relu_in_place(&mut y, self.slope);
                    y
                })
                .collect(),
            Mode::Train => {
                let (normed, bn_cache) = self.bn.forward_train(xs);
                let out: Vec<Volume> = normed
                    .iter()
                    .map(|x| {
                        let mut y = self.conv.forward(x);
                        ops::leaky_relu_in_place(&mut y, self.slope);
                        y
                    })
                    .collect();
                self.cache = Some(BlockCache {
                    bn: bn_cache,
                    normed,
                    out: out.clone(),
                });
                out
            }
        }
    }

    pub fn backward(&mut self, mut dys: Vec<Volume>, need_dx: bool) -> Option<Vec<Volume>> {
        let cache = self.cache.take().expect("backward without a training forward pass");
        let mut dnormed = Vec::with_capacity(dys.len());
        for ((dy, out), x) in dys.iter_mut().zip(&cache.out).zip(&cache.normed) {
            ops::leaky_relu_backward(out, dy, self.slope);
            dnormed.push(self.conv.backward(x, dy, true).expect("input gradient requested"));
        }
        self.bn.backward(&cache.bn, &dnormed, need_dx)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.bn.set_trainable(trainable);
        self.conv.set_trainable(trainable);
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl Params for ConvBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.bn.params(&join(prefix, "bn"), out);
        self.conv.params(&join(prefix, "conv"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.bn.params_mut(&join(prefix, "bn"), out);
        self.conv.params_mut(&join(prefix, "conv"), out);
    }
}

/// Encoder–decoder body of a UNet: `depth − 1` pooled levels of widths
/// c, 2c, 4c, …, a bottom level of width c·2^(depth−1), and a mirrored
/// decoder whose skip inputs are center-cropped encoder maps.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub encoder: Vec<[ConvBlock; 2]>,
    pub bottom: [ConvBlock; 2],
    /// Indexed by level, shallowest first.
    pub decoder: Vec<[ConvBlock; 2]>,
    pub upsample: Upsample,
    cache: Option<TrunkCache>,
}

#[derive(Debug, Clone)]
struct TrunkCache {
    pool_args: Vec<Vec<Vec<u32>>>,
    skip_dims: Vec<[usize; 3]>,
    skip_channels: Vec<usize>,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_ch: usize, width: usize, depth: usize, slope: f32, upsample: Upsample) -> Self {
        let w = |level: usize| width << level;
        let mut encoder = Vec::new();
        let mut prev = in_ch;
        for level in 0..depth - 1 {
            encoder.push([ConvBlock::new(rng, prev, w(level), slope), ConvBlock::new(rng, w(level), w(level), slope)]);
            prev = w(level);
        }
        let bottom_w = w(depth - 1);
        let bottom = [ConvBlock::new(rng, prev, bottom_w, slope), ConvBlock::new(rng, bottom_w, bottom_w, slope)];
        let mut decoder: Vec<[ConvBlock; 2]> = Vec::new();
        let mut below = bottom_w;
        for level in (0..depth - 1).rev() {
            let inp = w(level) + below;
            decoder.push([ConvBlock::new(rng, inp, w(level), slope), ConvBlock::new(rng, w(level), w(level), slope)]);
            below = w(level);
        }
        decoder.reverse();
        Self {
            encoder,
            bottom,
            decoder,
            upsample,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.encoder[0][0].conv.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.decoder[0][1].out_channels()
    }

    pub fn forward(&mut self, xs: &[Volume], mode: Mode) -> Vec<Volume> {
        let mut x = xs.to_vec();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut pool_args = Vec::with_capacity(self.encoder.len());
        for [a, b] in self.encoder.iter_mut() {
            x = a.forward(&x, mode);
            x = b.forward(&x, mode);
            let (pooled, args): (Vec<_>, Vec<_>) = x.iter().map(ops::max_pool2).unzip();
            skips.push(std::mem::replace(&mut x, pooled));
            pool_args.push(args);
        }
        let [a, b] = &mut self.bottom;
        x = a.forward(&x, mode);
        x = b.forward(&x, mode);
        let skip_dims: Vec<[usize; 3]> = skips.iter().map(|s| s[0].dims).collect();
        let skip_channels: Vec<usize> = skips.iter().map(|s| s[0].channels).collect();
        for level in (0..self.decoder.len()).rev() {
            let up: Vec<Volume> = x.iter().map(|v| ops::upsample2(v, self.upsample)).collect();
            let merged: Vec<Volume> = skips[level]
                .iter()
                .zip(&up)
                .map(|(s, u)| concat_channels(&s.center_crop(u.dims), u))
                .collect();
            skips[level].clear();
            let [a, b] = &mut self.decoder[level];
            x = a.forward(&merged, mode);
            x = b.forward(&x, mode);
        }
        self.cache = (mode == Mode::Train).then_some(TrunkCache {
            pool_args,
            skip_dims,
            skip_channels,
        });
        x
    }

    pub fn backward(&mut self, dys: Vec<Volume>, need_dx: bool) -> Option<Vec<Volume>> {
        let cache = self.cache.take().expect("backward without a training forward pass");
        let levels = self.decoder.len();
        let mut skip_grads: Vec<Vec<Volume>> = Vec::with_capacity(levels);
        let mut d = dys;
        for level in 0..levels {
            let [a, b] = &mut self.decoder[level];
            let dm = b.backward(d, true).unwrap();
            let dmerged = a.backward(dm, true).unwrap();
            let mut dup = Vec::with_capacity(dmerged.len());
            let mut dskip = Vec::with_capacity(dmerged.len());
            for g in dmerged {
                let (ds, du) = split_channels(&g, cache.skip_channels[level]);
                dskip.push(uncrop(&ds, cache.skip_dims[level]));
                dup.push(ops::upsample2_backward(&du, self.upsample));
            }
            skip_grads.push(dskip);
            d = dup;
        }
        let [a, b] = &mut self.bottom;
        d = b.backward(d, true).unwrap();
        d = a.backward(d, true).unwrap();
        for level in (0..self.encoder.len()).rev() {
            let mut pre: Vec<Volume> = d
                .iter()
                .zip(&cache.pool_args[level])
                .map(|(g, args)| ops::max_pool2_backward(g, args, cache.skip_dims[level]))
                .collect();
            for (p, s) in pre.iter_mut().zip(&skip_grads[level]) {
                for (a, b) in p.data.iter_mut().zip(&s.data) {
                    *a += *b;
                }
            }
            let [a, b] = &mut self.encoder[level];
            let dmid = b.backward(pre, true).unwrap();
            let want = need_dx || level > 0;
            match a.backward(dmid, want) {
                Some(g) => d = g,
                None => return None,
            }
        }
        Some(d)
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for blocks in self.encoder.iter_mut().chain(std::iter::once(&mut self.bottom)).chain(self.decoder.iter_mut()) {
            for b in blocks.iter_mut() {
                b.set_trainable(trainable);
            }
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for blocks in self.encoder.iter_mut().chain(std::iter::once(&mut self.bottom)).chain(self.decoder.iter_mut()) {
            for b in blocks.iter_mut() {
                b.clear_cache();
            }
        }
    }
}

impl Params for Trunk {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (l, [a, b]) in self.encoder.iter().enumerate() {
            a.params(&join(prefix, &format!("enc{l}.a")), out);
            b.params(&join(prefix, &format!("enc{l}.b")), out);
        }
        self.bottom[0].params(&join(prefix, "bottom.a"), out);
        self.bottom[1].params(&join(prefix, "bottom.b"), out);
        for (l, [a, b]) in self.decoder.iter().enumerate() {
            a.params(&join(prefix, &format!("dec{l}.a")), out);
            b.params(&join(prefix, &format!("dec{l}.b")), out);
        }
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (l, [a, b]) in self.encoder.iter_mut().enumerate() {
            a.params_mut(&join(prefix, &format!("enc{l}.a")), out);
            b.params_mut(&join(prefix, &format!("enc{l}.b")), out);
        }
        let [a, b] = &mut self.bottom;
        a.params_mut(&join(prefix, "bottom.a"), out);
        b.params_mut(&join(prefix, "bottom.b"), out);
        for (l, [a, b]) in self.decoder.iter_mut().enumerate() {
            a.params_mut(&join(prefix, &format!("dec{l}.a")), out);
            b.params_mut(&join(prefix, &format!("dec{l}.b")), out);
        }
    }
}

/// A trunk followed by a 1³ convolution + leaky ReLU head producing the
/// pathway's feature maps.
#[derive(Debug, Clone)]
pub struct Pathway {
    pub trunk: Trunk,
    pub head: Conv,
    slope: f32,
    pub trunk_frozen: bool,
    pub head_frozen: bool,
    head_cache: Option<(Vec<Volume>, Vec<Volume>)>,
}

impl Pathway {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_ch: usize,
        width: usize,
        depth: usize,
        head_width: usize,
        slope: f32,
        upsample: Upsample,
    ) -> Self {
        let trunk = Trunk::new(rng, in_ch, width, depth, slope, upsample);
        let head = Conv::new(rng, width, head_width, 1);
        Self {
            trunk,
            head,
            slope,
            trunk_frozen: false,
            head_frozen: false,
            head_cache: None,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.head.out_ch
    }

    /// Re-draws the head weights (used when a pretrained pathway's final
    /// layer is replaced).
    pub fn reinit_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.head = Conv::new(rng, self.head.in_ch, self.head.out_ch, 1);
    }

    pub fn freeze(&mut self, trunk: bool, head: bool) {
        self.trunk_frozen = trunk;
        self.head_frozen = head;
        self.trunk.set_trainable(!trunk);
        self.head.set_trainable(!head);
    }

    pub fn is_trainable(&self) -> bool {
        !(self.trunk_frozen && self.head_frozen)
    }

    pub fn forward(&mut self, xs: &[Volume], mode: Mode) -> Vec<Volume> {
        let trunk_mode = if self.trunk_frozen { Mode::Eval } else { mode };
        let body = self.trunk.forward(xs, trunk_mode);
        let out: Vec<Volume> = body
            .iter()
            .map(|x| {
                let mut y = self.head.forward(x);
                ops::leaky_relu_in_place(&mut y, self.slope);
                y
            })
            .collect();
        self.head_cache = (mode == Mode::Train && !self.head_frozen).then(|| (body, out.clone()));
        out
    }

    pub fn backward(&mut self, mut dys: Vec<Volume>, need_dx: bool) -> Option<Vec<Volume>> {
        if self.head_frozen && self.trunk_frozen {
            return None;
        }
        let (body, out) = self.head_cache.take().expect("backward without a training forward pass");
        let need_body = !self.trunk_frozen;
        let mut dbody = Vec::with_capacity(dys.len());
        for ((dy, o), x) in dys.iter_mut().zip(&out).zip(&body) {
            ops::leaky_relu_backward(o, dy, self.slope);
            if let Some(g) = self.head.backward(x, dy, need_body) {
                dbody.push(g);
            }
        }
        if !need_body {
            return None;
        }
        self.trunk.backward(dbody, need_dx)
    }

    pub fn clear_cache(&mut self) {
        self.head_cache = None;
        self.trunk.clear_cache();
    }
}

impl Params for Pathway {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.trunk.params(&join(prefix, "trunk"), out);
        self.head.params(&join(prefix, "head"), out);
    }
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.trunk.params_mut(&join(prefix, "trunk"), out);
        self.head.params_mut(&join(prefix, "head"), out);
    }
}
