//! Dense rank-5 activation storage, laid out `B × C × D × H × W` row-major.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape5 {
    pub batch: usize,
    pub channels: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape5 {
    pub const fn new(batch: usize, channels: usize, depth: usize, height: usize, width: usize) -> Self {
        Shape5 {
            batch,
            channels,
            depth,
            height,
            width,
        }
    }

    /// Cubic volume with edge `size`.
    pub const fn cube(batch: usize, channels: usize, size: usize) -> Self {
        Shape5::new(batch, channels, size, size, size)
    }

    /// Number of spatial elements per channel.
    pub const fn spatial(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.spatial()
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn with_batch(self, batch: usize) -> Self {
        Shape5 { batch, ..self }
    }
}

impl std::fmt::Display for Shape5 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.batch, self.channels, self.depth, self.height, self.width
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch {
    shape: Shape5,
    data: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        if shape.batch == 0 || shape.channels == 0 {
            return Err(Error::Shape(format!("empty batch or channel dimension {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} values do not fill shape {shape}",
                data.len()
            )));
        }
        Ok(FeatureBatch { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        FeatureBatch {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    /// Builds a batch with unit spatial extent in depth/height, handy for
    /// writing per-channel vectors directly.
    pub fn from_channels(batch: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len().checked_div(batch * channels).unwrap_or(0);
        FeatureBatch::new(Shape5::new(batch, channels, 1, 1, n), values)
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, b: usize, c: usize) -> &[f64] {
        let n = self.shape.spatial();
        let start = (b * self.shape.channels + c) * n;
        &self.data[start..start + n]
    }

    pub fn channel_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let n = self.shape.spatial();
        let start = (b * self.shape.channels + c) * n;
        &mut self.data[start..start + n]
    }

    /// Contiguous slice holding sample `b`.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.shape.channels * self.shape.spatial();
        &self.data[b * n..(b + 1) * n]
    }

    /// Gathers the given samples, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> FeatureBatch {
        let mut data = Vec::with_capacity(indices.len() * self.sample(0).len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        FeatureBatch {
            shape: self.shape.with_batch(indices.len()),
            data,
        }
    }

    /// Stacks single-sample slices (each `C·D·H·W` long) into a batch.
    pub fn stack<'a>(sample_shape: Shape5, samples: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let per = sample_shape.channels * sample_shape.spatial();
        let mut data = Vec::new();
        let mut count = 0;
        for s in samples {
            if s.len() != per {
                return Err(Error::Shape(format!(
                    "sample of {} values does not match {sample_shape}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
            count += 1;
        }
        FeatureBatch::new(sample_shape.with_batch(count), data)
    }

    /// First `(b, c)` holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        let n = self.shape.spatial();
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| {
                let bc = i / n;
                (bc / self.shape.channels, bc % self.shape.channels)
            })
    }
}
