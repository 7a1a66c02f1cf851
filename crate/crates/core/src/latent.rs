//! Frame-sequence latents: an `L x d` array of 64-bit reals.
//!
//! Frame 0 plays the role of the conditioning frame. All kernel and score
//! arithmetic runs in f64; the analytic oracles demand tolerances that f32
//! cannot meet.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("shape mismatch: expected {expected_frames}x{expected_dim}, got {got_frames}x{got_dim}")]
    ShapeMismatch {
        expected_frames: usize,
        expected_dim: usize,
        got_frames: usize,
        got_dim: usize,
    },
    #[error("data length {len} does not match {frames}x{dim}")]
    BadLength { len: usize, frames: usize, dim: usize },
    #[error("latent dimensions must be >= 1, got {frames}x{dim}")]
    EmptyShape { frames: usize, dim: usize },
}

/// An `L`-frame by `d`-cell latent sequence stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl LatentSequence {
    /// All-zero latent of the given shape.
    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_vec(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self, LatentError> {
        if frames == 0 || dim == 0 {
            return Err(LatentError::EmptyShape { frames, dim });
        }
        if data.len() != frames * dim {
            return Err(LatentError::BadLength {
                len: data.len(),
                frames,
                dim,
            });
        }
        Ok(Self { frames, dim, data })
    }

    /// Every frame a copy of `frame`.
    pub fn replicate_frame(frame: &[f64], frames: usize) -> Self {
        let mut data = Vec::with_capacity(frames * frame.len());
        for _ in 0..frames {
            data.extend_from_slice(frame);
        }
        Self {
            frames,
            dim: frame.len(),
            data,
        }
    }

    /// Constant fill, mostly for oracle means.
    pub fn filled(frames: usize, dim: usize, value: f64) -> Self {
        Self {
            frames,
            dim,
            data: vec![value; frames * dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, self.dim)
    }

    /// Total cell count `L * d`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, l: usize) -> &[f64] {
        &self.data[l * self.dim..(l + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.data[l * self.dim..(l + 1) * self.dim]
    }

    pub fn get(&self, l: usize, j: usize) -> f64 {
        self.data[l * self.dim + j]
    }

    pub fn set(&mut self, l: usize, j: usize, v: f64) {
        self.data[l * self.dim + j] = v;
    }

    pub fn same_shape(&self, other: &Self) -> Result<(), LatentError> {
        if self.shape() != other.shape() {
            return Err(LatentError::ShapeMismatch {
                expected_frames: self.frames,
                expected_dim: self.dim,
                got_frames: other.frames,
                got_dim: other.dim,
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `alpha * self + beta * other`.
    pub fn lin2(&self, alpha: f64, other: &Self, beta: f64) -> Result<Self, LatentError> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        Ok(Self {
            frames: self.frames,
            dim: self.dim,
            data,
        })
    }

    /// Elementwise `a * x + b * y + c * z` over three same-shape latents.
    pub fn lin3(
        a: f64,
        x: &Self,
        b: f64,
        y: &Self,
        c: f64,
        z: &Self,
    ) -> Result<Self, LatentError> {
        x.same_shape(y)?;
        x.same_shape(z)?;
        let data = x
            .data
            .iter()
            .zip(&y.data)
            .zip(&z.data)
            .map(|((xv, yv), zv)| a * xv + b * yv + c * zv)
            .collect();
        Ok(Self {
            frames: x.frames,
            dim: x.dim,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LatentError> {
        self.lin2(1.0, other, -1.0)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            frames: self.frames,
            dim: self.dim,
            data: self.data.iter().map(|v| factor * v).collect(),
        }
    }

    /// Squared Euclidean norm over all cells.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Mean squared difference per cell.
    pub fn mse(&self, other: &Self) -> Result<f64, LatentError> {
        self.same_shape(other)?;
        let sse: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sse / self.len() as f64)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}
