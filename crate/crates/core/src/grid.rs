use crate::error::{Error, Result};
use crate::io::Tensor;

/// Channels-last H x W x C array of f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Per-pixel feature vectors produced by the frozen extractor.
pub type DesignMatrix = Grid;

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "grid extents must be positive, got {height}x{width}x{channels}"
            )));
        }
        if height * width * channels != data.len() {
            return Err(Error::Shape(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Accepts rank-3 (H x W x C) tensors, and rank-2 tensors as H x W x 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [h, w, c] => Self::new(h, w, c, t.data().to_vec()),
            [h, w] => Self::new(h, w, 1, t.data().to_vec()),
            _ => Err(Error::Shape(format!(
                "`{}` must be H x W x C, has dims {:?}",
                t.name(),
                t.dims()
            ))),
        }
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        Ok(Tensor::new(
            name,
            vec![self.height, self.width, self.channels],
            self.data.clone(),
        )?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub(crate) fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "{what} at pixel {}, channel {}",
                i / self.channels,
                i % self.channels
            ))),
            None => Ok(()),
        }
    }
}

/// Single-channel H x W map helper for rendering.
pub(crate) fn map_tensor(name: &str, height: usize, width: usize, data: Vec<f32>) -> Result<Tensor> {
    Ok(Tensor::new(name, vec![height, width], data)?)
}
