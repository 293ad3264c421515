//! Pixel-space video and codec-space latent containers.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{MiveError, Result};

/// Pixel video with shape `T x 3 x H x W` and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video(Array4<f64>);

impl Video {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[1] != 3 {
            return Err(MiveError::shape(format!(
                "video must have 3 colour channels, got {}",
                data.shape()[1]
            )));
        }
        if data.shape()[0] == 0 {
            return Err(MiveError::shape("video has no frames"));
        }
        Ok(Self(data))
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self(Array4::zeros((frames, 3, height, width)))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    /// `(T, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames(), self.height(), self.width())
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.0
    }

    /// Frame `t` as a single-frame video.
    pub fn frame(&self, t: usize) -> Video {
        Video(self.0.slice(s![t..t + 1, .., .., ..]).to_owned())
    }

    pub fn frame_view(&self, t: usize) -> ArrayView3<'_, f64> {
        self.0.index_axis(Axis(0), t)
    }

    /// Rec. 601 luma `0.299 R + 0.587 G + 0.114 B` of frame `t`.
    pub fn luma(&self, t: usize) -> Array2<f64> {
        let f = self.frame_view(t);
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * f[[0, y, x]] + 0.587 * f[[1, y, x]] + 0.114 * f[[2, y, x]]
        })
    }

    /// Mean absolute difference over every element.
    pub fn mean_abs_diff(&self, other: &Video) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.0.len() as f64;
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }

    pub fn check_same_shape(&self, other: &Video) -> Result<()> {
        if self.0.shape() != other.0.shape() {
            return Err(MiveError::shape(format!(
                "video shapes differ: {:?} vs {:?}",
                self.0.shape(),
                other.0.shape()
            )));
        }
        Ok(())
    }

    /// Pixels (per frame) where any channel differs.
    pub fn diff_mask(&self, other: &Video) -> Result<Array3<bool>> {
        self.check_same_shape(other)?;
        let (t, h, w) = self.dims();
        Ok(Array3::from_shape_fn((t, h, w), |(f, y, x)| {
            (0..3).any(|c| self.0[[f, c, y, x]] != other.0[[f, c, y, x]])
        }))
    }
}

/// Codec latent with shape `T_lat x C x H' x W'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Array4<f64>,
    /// Whether temporal index 0 is a prepended reference frame.
    pub has_ref_prefix: bool,
}

impl Latent {
    pub fn new(data: Array4<f64>) -> Self {
        Self {
            data,
            has_ref_prefix: false,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames(), self.channels(), self.height(), self.width()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
