//! Synthetic frame sequences with analytically known conditional statistics.
//!
//! A clip is a Gaussian blob on a periodic grid translated by an integer
//! per-clip velocity: frame `l`, cell `j` holds
//! `exp(-dist(j, x0 + l v)^2 / (2 w^2))`. Velocities are integers so every
//! conditional mean is an exact finite mixture of circular shifts — no
//! interpolation error enters the oracles. Frame 0 is the conditioning frame.

use thiserror::Error;

use crate::denoiser::PriorNetwork;
use crate::latent::{LatentError, LatentSequence};
use crate::rng::rng_from_seed;
use rand::Rng;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
    #[error("class label {label} out of range [0, {classes})")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("conditioning frame is not a realizable blob (max residual {residual})")]
    NotABlob { residual: f64 },
    #[error("neural prior mode requires a model reference")]
    MissingPriorModel,
    #[error(transparent)]
    Shape(#[from] LatentError),
}

/// Geometry and class structure of the toy world.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    /// Frames per clip.
    pub frames: usize,
    /// Cells per frame (periodic grid length).
    pub dim: usize,
    /// Number of class labels.
    pub classes: usize,
    /// Gaussian blob width in cells.
    pub blob_width: f64,
    /// Velocity choices per class, integers in grid cells per frame.
    pub velocity_sets: Vec<Vec<i64>>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 16,
            classes: 3,
            blob_width: 1.5,
            velocity_sets: vec![vec![0], vec![1], vec![1, -1]],
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        if self.frames == 0 || self.dim == 0 || self.classes == 0 {
            return Err(ToyError::InvalidConfig(format!(
                "frames, dim, classes must be >= 1, got {}x{} with {} classes",
                self.frames, self.dim, self.classes
            )));
        }
        if !(self.blob_width.is_finite() && self.blob_width > 0.0) {
            return Err(ToyError::InvalidConfig(format!(
                "blob width must be positive, got {}",
                self.blob_width
            )));
        }
        if self.velocity_sets.len() != self.classes {
            return Err(ToyError::InvalidConfig(format!(
                "need one velocity set per class: {} sets for {} classes",
                self.velocity_sets.len(),
                self.classes
            )));
        }
        if self.velocity_sets.iter().any(|set| set.is_empty()) {
            return Err(ToyError::InvalidConfig(
                "velocity sets must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

/// One generated clip with its latent nuisance velocity (never shown to
/// models).
#[derive(Debug, Clone, PartialEq)]
pub struct ClipSample {
    pub z0: LatentSequence,
    pub class_label: usize,
    pub velocity: i64,
}

impl ClipSample {
    /// The conditioning frame `z^i` (frame 0).
    pub fn conditioning_frame(&self) -> &[f64] {
        self.z0.frame(0)
    }
}

/// Shortest distance between cells `a` and `b` on a periodic grid of length `dim`.
fn periodic_distance(a: f64, b: f64, dim: usize) -> f64 {
    let d = (a - b).rem_euclid(dim as f64);
    d.min(dim as f64 - d)
}

/// Blob profile centered at `center` (grid units, may be off-cell).
pub fn blob_frame(dim: usize, blob_width: f64, center: f64) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let d = periodic_distance(j as f64, center, dim);
            (-d * d / (2.0 * blob_width * blob_width)).exp()
        })
        .collect()
}

/// Circular shift of a frame by an integer number of cells.
pub fn shift_frame(frame: &[f64], shift: i64) -> Vec<f64> {
    let dim = frame.len() as i64;
    (0..dim)
        .map(|j| frame[(j - shift).rem_euclid(dim) as usize])
        .collect()
}

/// Deterministically generate one clip from a seed.
///
/// Draws the class uniformly, the blob center uniformly over the grid cells
/// and the velocity uniformly from the class's velocity set.
pub fn generate_clip(seed: u64, cfg: &ToyConfig) -> Result<ClipSample, ToyError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let class_label = rng.gen_range(0..cfg.classes);
    let x0 = rng.gen_range(0..cfg.dim) as i64;
    let set = &cfg.velocity_sets[class_label];
    let velocity = set[rng.gen_range(0..set.len())];

    let base = blob_frame(cfg.dim, cfg.blob_width, x0 as f64);
    let mut data = Vec::with_capacity(cfg.frames * cfg.dim);
    for l in 0..cfg.frames {
        data.extend_from_slice(&shift_frame(&base, l as i64 * velocity));
    }
    Ok(ClipSample {
        z0: LatentSequence::from_vec(cfg.frames, cfg.dim, data)?,
        class_label,
        velocity,
    })
}

/// Recover the blob center from a conditioning frame, validating that the
/// frame really is a blob.
fn recover_center(cfg: &ToyConfig, z_i: &[f64]) -> Result<usize, ToyError> {
    if z_i.len() != cfg.dim {
        return Err(ToyError::InvalidConfig(format!(
            "conditioning frame has {} cells, config says {}",
            z_i.len(),
            cfg.dim
        )));
    }
    let center = z_i
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(j, _)| j)
        .unwrap_or(0);
    let expected = blob_frame(cfg.dim, cfg.blob_width, center as f64);
    let residual = z_i
        .iter()
        .zip(&expected)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if residual > 1e-9 {
        return Err(ToyError::NotABlob { residual });
    }
    Ok(center)
}

/// Exact `E[z_0 | z^i, c]`: frame `l` averages the class's velocity set of
/// `z^i` shifted by `l v`. This is the optimum the neural prior converges to.
pub fn conditional_mean_oracle(
    cfg: &ToyConfig,
    z_i: &[f64],
    class_label: usize,
) -> Result<LatentSequence, ToyError> {
    cfg.validate()?;
    if class_label >= cfg.classes {
        return Err(ToyError::ClassOutOfRange {
            label: class_label,
            classes: cfg.classes,
        });
    }
    recover_center(cfg, z_i)?;
    let set = &cfg.velocity_sets[class_label];
    let mut data = Vec::with_capacity(cfg.frames * cfg.dim);
    for l in 0..cfg.frames {
        let mut acc = vec![0.0f64; cfg.dim];
        for &v in set {
            let shifted = shift_frame(z_i, l as i64 * v);
            for (a, s) in acc.iter_mut().zip(&shifted) {
                *a += s;
            }
        }
        let inv = 1.0 / set.len() as f64;
        data.extend(acc.into_iter().map(|a| a * inv));
    }
    Ok(LatentSequence::from_vec(cfg.frames, cfg.dim, data)?)
}

/// How the bridge terminal state `z_T` is built from the conditioning frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Conditioning frame copied over every frame slot.
    Replicated,
    /// One-step regression network output.
    Neural,
}

/// Prior construction: mode plus an optional trained prior network.
#[derive(Debug)]
pub struct PriorSpec {
    pub mode: PriorMode,
    pub model: Option<PriorNetwork>,
}

impl PriorSpec {
    pub fn replicated() -> Self {
        Self {
            mode: PriorMode::Replicated,
            model: None,
        }
    }

    pub fn neural(model: PriorNetwork) -> Self {
        Self {
            mode: PriorMode::Neural,
            model: Some(model),
        }
    }
}

/// Build `z_T` from the conditioning frame.
///
/// Neural mode runs the prior network and then overwrites frame 0 with `z^i`
/// so the bridge boundary always matches the conditioning frame exactly.
pub fn build_prior(
    spec: &PriorSpec,
    z_i: &[f64],
    class_label: usize,
    frames: usize,
) -> Result<LatentSequence, ToyError> {
    match spec.mode {
        PriorMode::Replicated => Ok(LatentSequence::replicate_frame(z_i, frames)),
        PriorMode::Neural => {
            let model = spec.model.as_ref().ok_or(ToyError::MissingPriorModel)?;
            let mut out = model.forward(z_i, class_label);
            out.frame_mut(0).copy_from_slice(z_i);
            Ok(out)
        }
    }
}
