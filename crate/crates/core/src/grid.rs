use crate::error::{Error, Result};

/// Lower clamp for per-channel standard deviations. Keeps normalization and
/// its gradients finite on constant channels.
pub const STD_EPS: f32 = 1e-5;

/// Dense row-major feature map: `channels` planes of `height * width` floats.
///
/// This is the single value carrier for the 2D networks; images are grids
/// with 3 channels, rasterized feature maps have D channels, and network
/// parameters are packed into grids by the ops that consume them.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Grid {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "grid data length {} does not match {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Grid {
            channels,
            height,
            width,
            data,
        })
    }

    /// Scalar wrapped as a 1x1x1 grid (loss values on the tape).
    pub fn scalar(value: f32) -> Self {
        Grid {
            channels: 1,
            height: 1,
            width: 1,
            data: vec![value],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Elements per channel plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    /// First non-finite value, if any. Forward ops debug-assert on this.
    pub fn non_finite(&self) -> Option<f32> {
        self.data.iter().copied().find(|v| !v.is_finite())
    }

    pub fn scalar_value(&self) -> f32 {
        debug_assert_eq!(self.shape(), (1, 1, 1));
        self.data[0]
    }
}

/// Per-channel mean and standard deviation of a grid. Doubles as the style
/// code driving the per-channel affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Code that makes the per-channel affine transform the identity.
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Population mean and standard deviation per channel, accumulated in f64.
/// The std is clamped below at [`STD_EPS`].
pub fn channel_stats(input: &Grid) -> ChannelStats {
    let n = input.plane() as f64;
    let mut mean = Vec::with_capacity(input.channels());
    let mut std = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let plane = input.channel(c);
        let mut sum = 0.0f64;
        for &v in plane {
            sum += v as f64;
        }
        let mu = sum / n;
        let mut sq = 0.0f64;
        for &v in plane {
            let d = v as f64 - mu;
            sq += d * d;
        }
        let sigma = (sq / n).sqrt() as f32;
        mean.push(mu as f32);
        std.push(sigma.max(STD_EPS));
    }
    ChannelStats { mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_plane() {
        // Channel [1, 2, 3, 4]: mean 2.5, population variance 1.25.
        let g = Grid::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = channel_stats(&g);
        assert!((s.mean[0] - 2.5).abs() < 1e-7);
        assert!((s.std[0] - 1.25f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn constant_channel_clamps_std() {
        let g = Grid::filled(2, 3, 3, 7.0);
        let s = channel_stats(&g);
        assert_eq!(s.std, vec![STD_EPS, STD_EPS]);
        assert!((s.mean[0] - 7.0).abs() < 1e-6);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Grid::from_vec(2, 2, 2, vec![0.0; 7]).is_err());
    }
}
