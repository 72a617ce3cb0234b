/// Dense channel-major 3D feature map: `data[((c * d + z) * h + y) * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn filled(channels: usize, dims: [usize; 3], value: f32) -> Self {
        Self {
            channels,
            dims,
            data: vec![value; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_data(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2], "volume data length");
        Self { channels, dims, data }
    }

    pub fn spatial_len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    /// Copies the listed channels into a new volume, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Volume {
        let mut data = Vec::with_capacity(channels.len() * self.spatial_len());
        for &c in channels {
            data.extend_from_slice(self.channel(c));
        }
        Volume::from_data(channels.len(), self.dims, data)
    }

    /// Central crop to `dims`. Offsets are `(size - target) / 2` per axis.
    pub fn center_crop(&self, dims: [usize; 3]) -> Volume {
        if dims == self.dims {
            return self.clone();
        }
        let off = crop_offsets(self.dims, dims);
        let mut out = Volume::zeros(self.channels, dims);
        for c in 0..self.channels {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    let src = self.index(c, z + off[0], y + off[1], off[2]);
                    let dst = out.index(c, z, y, 0);
                    out.data[dst..dst + dims[2]].copy_from_slice(&self.data[src..src + dims[2]]);
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn crop_offsets(from: [usize; 3], to: [usize; 3]) -> [usize; 3] {
    [
        (from[0] - to[0]) / 2,
        (from[1] - to[1]) / 2,
        (from[2] - to[2]) / 2,
    ]
}

/// Adjoint of [`Volume::center_crop`]: places `grad` inside a zero volume of
/// `dims` at the crop offsets.
pub fn uncrop(grad: &Volume, dims: [usize; 3]) -> Volume {
    if grad.dims == dims {
        return grad.clone();
    }
    let off = crop_offsets(dims, grad.dims);
    let mut out = Volume::zeros(grad.channels, dims);
    for c in 0..grad.channels {
        for z in 0..grad.dims[0] {
            for y in 0..grad.dims[1] {
                let src = grad.index(c, z, y, 0);
                let dst = out.index(c, z + off[0], y + off[1], off[2]);
                out.data[dst..dst + grad.dims[2]].copy_from_slice(&grad.data[src..src + grad.dims[2]]);
            }
        }
    }
    out
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Volume, b: &Volume) -> Volume {
    assert_eq!(a.dims, b.dims, "concat spatial dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Volume::from_data(a.channels + b.channels, a.dims, data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(v: &Volume, first: usize) -> (Volume, Volume) {
    let n = v.spatial_len();
    let a = Volume::from_data(first, v.dims, v.data[..first * n].to_vec());
    let b = Volume::from_data(v.channels - first, v.dims, v.data[first * n..].to_vec());
    (a, b)
}
