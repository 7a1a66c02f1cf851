//! Desk-scale quantitative evaluation.
//!
//! Closed-form squared 2-Wasserstein distance between isotropic Gaussians
//! stands in for learned video metrics: it is exact for the Gaussian oracle
//! tasks this artifact verifies against. Frame metrics compare samples to the
//! motion-compensated conditional-mean oracle of the toy world.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::latent::{LatentError, LatentSequence};
use crate::toy::{conditional_mean_oracle, ToyConfig, ToyError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("variance must be nonnegative, got {0}")]
    NegativeVariance(f64),
    #[error("metric needs a nonempty sample set")]
    EmptySampleSet,
    #[error(transparent)]
    Shape(#[from] LatentError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Squared 2-Wasserstein distance between `N(m1, s1^2 I)` and `N(m2, s2^2 I)`:
/// `|m1 - m2|^2 + dims (s1 - s2)^2`.
pub fn gaussian_w2_sq(
    m1: &[f64],
    s1_sq: f64,
    m2: &[f64],
    s2_sq: f64,
) -> Result<f64, EvalError> {
    if s1_sq < 0.0 {
        return Err(EvalError::NegativeVariance(s1_sq));
    }
    if s2_sq < 0.0 {
        return Err(EvalError::NegativeVariance(s2_sq));
    }
    if m1.len() != m2.len() {
        return Err(LatentError::BadLength {
            len: m2.len(),
            frames: 1,
            dim: m1.len(),
        }
        .into());
    }
    let mean_term: f64 = m1
        .iter()
        .zip(m2)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let ds = s1_sq.sqrt() - s2_sq.sqrt();
    Ok(mean_term + m1.len() as f64 * ds * ds)
}

/// Moment-match an isotropic Gaussian to a sample set: per-coordinate mean
/// and pooled unbiased per-coordinate variance.
pub fn fit_isotropic_gaussian(
    samples: &[LatentSequence],
) -> Result<(Vec<f64>, f64), EvalError> {
    let first = samples.first().ok_or(EvalError::EmptySampleSet)?;
    let cells = first.len();
    let n = samples.len();
    let mut mean = vec![0.0f64; cells];
    for s in samples {
        first.same_shape(s)?;
        for (m, v) in mean.iter_mut().zip(s.as_slice()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    if n == 1 {
        return Ok((mean, 0.0));
    }
    let mut ss = 0.0f64;
    for s in samples {
        for (m, v) in mean.iter().zip(s.as_slice()) {
            ss += (v - m) * (v - m);
        }
    }
    let variance = ss / ((n * cells - cells) as f64);
    Ok((mean, variance))
}

/// Mean per-frame MSE of samples against the motion-compensated oracle built
/// from the conditioning frame, falling back to the replicated frame when the
/// oracle cannot recover a blob.
pub fn first_frame_consistency(
    samples: &[LatentSequence],
    cfg: &ToyConfig,
    z_i: &[f64],
    class_label: usize,
) -> Result<f64, EvalError> {
    let first = samples.first().ok_or(EvalError::EmptySampleSet)?;
    let reference = match conditional_mean_oracle(cfg, z_i, class_label) {
        Ok(oracle) => oracle,
        Err(ToyError::NotABlob { .. }) => {
            LatentSequence::replicate_frame(z_i, first.frames())
        }
        Err(e) => return Err(e.into()),
    };
    let mut acc = 0.0f64;
    for s in samples {
        reference.same_shape(s)?;
        acc += s.mse(&reference)?;
    }
    Ok(acc / samples.len() as f64)
}

/// Per-cell MSE between a prior and the conditional-mean oracle.
pub fn prior_gap(
    prior: &LatentSequence,
    oracle_mean: &LatentSequence,
) -> Result<f64, EvalError> {
    Ok(prior.mse(oracle_mean)?)
}

/// Aggregated metric values for one evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub w2_sq: f64,
    pub frame_mse: f64,
    pub first_frame_mse: f64,
    pub prior_gap: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.sample_count == 0 {
            return Err(EvalError::EmptySampleSet);
        }
        for (name, v) in [
            ("w2_sq", self.w2_sq),
            ("frame_mse", self.frame_mse),
            ("first_frame_mse", self.first_frame_mse),
            ("prior_gap", self.prior_gap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EvalError::NegativeVariance(if name.is_empty() { v } else { v }));
            }
        }
        Ok(())
    }

    /// Structured key = value text block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "sample_count = {}", self.sample_count);
        let _ = writeln!(out, "w2_sq = {:.17e}", self.w2_sq);
        let _ = writeln!(out, "frame_mse = {:.17e}", self.frame_mse);
        let _ = writeln!(out, "first_frame_mse = {:.17e}", self.first_frame_mse);
        let _ = writeln!(out, "prior_gap = {:.17e}", self.prior_gap);
        out
    }

    pub fn csv_header() -> &'static str {
        "config_hash,seed,sample_count,w2_sq,frame_mse,first_frame_mse,prior_gap"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.config_hash,
            self.seed,
            self.sample_count,
            self.w2_sq,
            self.frame_mse,
            self.first_frame_mse,
            self.prior_gap
        )
    }

    pub fn write_text(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Append this report to a CSV file, writing the header on creation.
    pub fn append_csv(&self, path: &Path) -> Result<(), EvalError> {
        use std::io::Write;
        let exists = path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if !exists {
            writeln!(f, "{}", Self::csv_header())?;
        }
        writeln!(f, "{}", self.csv_row())?;
        Ok(())
    }
}
