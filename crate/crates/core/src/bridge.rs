//! Closed-form bridge mathematics.
//!
//! The bridge perturbation kernel between endpoints `z_0` and `z_T` is
//! Gaussian: `z_t = a_t z_0 + b_t z_T + c_t eps` with
//!
//! ```text
//! a_t   = alpha_t (1 - SNR_T / SNR_t)
//! b_t   = (SNR_T / SNR_t) (alpha_t / alpha_T)
//! c_t^2 = sigma_t^2 (1 - SNR_T / SNR_t)
//! ```
//!
//! The endpoint-conditioning drift is the gradient in `z` of the forward
//! kernel's log density,
//! `h(z, t, y) = r (y - r z) / (sigma_T^2 - r^2 sigma_t^2)` with
//! `r = alpha_T / alpha_t`, and an eps-prediction network parameterizes the
//! bridge score as
//! `s = -eps/sigma_t - (SNR_T/SNR_t) (z_t - (alpha_t/alpha_T) z_T) / (sigma_t^2 (1 - SNR_T/SNR_t))`.

use thiserror::Error;

use crate::latent::{LatentError, LatentSequence};
use crate::schedule::{Schedule, ScheduleError};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Shape(#[from] LatentError),
    #[error("operation singular at t = {t} (valid strictly inside (0, {horizon}))")]
    Singularity { t: f64, horizon: f64 },
    #[error("degenerate denominator: a_t^2 s^2 + c_t^2 = 0 at t = {t}")]
    DegenerateVariance { t: f64 },
    #[error("data variance must be nonnegative, got {0}")]
    NegativeVariance(f64),
}

/// Perturbation-kernel multipliers `(a_t, b_t, c_t)` at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Isotropic Gaussian over latents: mean array plus scalar variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMarginal {
    pub mean: LatentSequence,
    pub variance: f64,
}

/// `SNR_T / SNR_t` with exact boundary behavior.
///
/// Both products below are commuted copies of each other at `t = T`, so the
/// ratio evaluates to exactly 1 there; at `t = 0` the vanishing `sigma_t`
/// makes it exactly 0.
fn snr_ratio(sched: &Schedule, t: f64) -> Result<f64, BridgeError> {
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let (alpha_big_t, sigma_big_t) = sched.alpha_sigma(sched.horizon())?;
    Ok((alpha_big_t * alpha_big_t * sigma_t * sigma_t)
        / (alpha_t * alpha_t * sigma_big_t * sigma_big_t))
}

/// Bridge kernel coefficients `(a_t, b_t, c_t)`; `(1, 0, 0)` at `t = 0` and
/// `(0, 1, 0)` at `t = T`.
pub fn bridge_coeffs(sched: &Schedule, t: f64) -> Result<BridgeCoefficients, BridgeError> {
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    if t == sched.horizon() {
        return Ok(BridgeCoefficients { a: 0.0, b: 1.0, c: 0.0 });
    }
    let (alpha_big_t, _) = sched.alpha_sigma(sched.horizon())?;
    let r = snr_ratio(sched, t)?;
    let a = alpha_t * (1.0 - r);
    let b = r * alpha_t / alpha_big_t;
    let c = (sigma_t * sigma_t * (1.0 - r)).max(0.0).sqrt();
    Ok(BridgeCoefficients { a, b, c })
}

/// Mean `a_t z_0 + b_t z_T` and variance `c_t^2` of the kernel.
pub fn bridge_marginal(
    coeffs: &BridgeCoefficients,
    z0: &LatentSequence,
    z_big_t: &LatentSequence,
) -> Result<GaussianMarginal, BridgeError> {
    let mean = z0.lin2(coeffs.a, z_big_t, coeffs.b)?;
    Ok(GaussianMarginal {
        mean,
        variance: coeffs.c * coeffs.c,
    })
}

/// Draw `a_t z_0 + b_t z_T + c_t noise` for a given standard-normal array.
pub fn sample_bridge_state(
    coeffs: &BridgeCoefficients,
    z0: &LatentSequence,
    z_big_t: &LatentSequence,
    noise: &LatentSequence,
) -> Result<LatentSequence, BridgeError> {
    Ok(LatentSequence::lin3(
        coeffs.a, z0, coeffs.b, z_big_t, coeffs.c, noise,
    )?)
}

/// Endpoint drift `grad_z log p_{T,diff}(y | z)` evaluated at `(z, y)`:
/// `h = r (y - r z) / (sigma_T^2 - r^2 sigma_t^2)` with `r = alpha_T/alpha_t`.
///
/// For Bridge-gmax (`alpha == 1`) this reduces to
/// `(y - z) / (sigma_T^2 - sigma_t^2)`, pulling the forward process onto its
/// endpoint. Vanishes with `r` for sharp diffusion schedules.
pub fn h_term(
    sched: &Schedule,
    t: f64,
    z: &LatentSequence,
    y: &LatentSequence,
) -> Result<LatentSequence, BridgeError> {
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    if t >= sched.horizon() {
        return Err(BridgeError::Singularity {
            t,
            horizon: sched.horizon(),
        });
    }
    z.same_shape(y)?;
    let (alpha_big_t, sigma_big_t) = sched.alpha_sigma(sched.horizon())?;
    let ratio = alpha_big_t / alpha_t;
    let denom = sigma_big_t * sigma_big_t - ratio * ratio * sigma_t * sigma_t;
    // h = (ratio / denom) y - (ratio^2 / denom) z
    Ok(y.lin2(ratio / denom, z, -ratio * ratio / denom)?)
}

/// Bridge score from an eps-prediction:
/// `s = -eps/sigma_t - (SNR_T/SNR_t) (z_t - (alpha_t/alpha_T) z_T) / (sigma_t^2 (1 - SNR_T/SNR_t))`.
///
/// Exact when `eps_pred = (z_t - alpha_t z_0) / sigma_t` for the true posterior.
pub fn score_from_eps(
    sched: &Schedule,
    t: f64,
    eps_pred: &LatentSequence,
    z_t: &LatentSequence,
    z_big_t: &LatentSequence,
) -> Result<LatentSequence, BridgeError> {
    sched.alpha_sigma(t)?;
    if t <= 0.0 || t >= sched.horizon() {
        return Err(BridgeError::Singularity {
            t,
            horizon: sched.horizon(),
        });
    }
    eps_pred.same_shape(z_t)?;
    z_t.same_shape(z_big_t)?;
    let (alpha_t, sigma_t) = sched.alpha_sigma(t)?;
    let (alpha_big_t, _) = sched.alpha_sigma(sched.horizon())?;
    let r = snr_ratio(sched, t)?;
    let denom = sigma_t * sigma_t * (1.0 - r);
    let endpoint = z_t.lin2(r / denom, z_big_t, -r * (alpha_t / alpha_big_t) / denom)?;
    Ok(eps_pred.lin2(-1.0 / sigma_t, &endpoint, -1.0)?)
}

/// Exact conditional score when the data distribution is `N(m, s^2 I)`:
/// `s = -(z_t - a_t m - b_t z_T) / (a_t^2 s^2 + c_t^2)`.
///
/// Serves as the analytic oracle for `score_from_eps` and for sampler checks.
pub fn analytic_gaussian_score(
    sched: &Schedule,
    t: f64,
    z_t: &LatentSequence,
    z_big_t: &LatentSequence,
    data_mean: &LatentSequence,
    data_variance: f64,
) -> Result<LatentSequence, BridgeError> {
    if data_variance < 0.0 {
        return Err(BridgeError::NegativeVariance(data_variance));
    }
    if t <= 0.0 || t >= sched.horizon() {
        return Err(BridgeError::Singularity {
            t,
            horizon: sched.horizon(),
        });
    }
    z_t.same_shape(z_big_t)?;
    z_t.same_shape(data_mean)?;
    let coeffs = bridge_coeffs(sched, t)?;
    let denom = coeffs.a * coeffs.a * data_variance + coeffs.c * coeffs.c;
    if denom == 0.0 {
        return Err(BridgeError::DegenerateVariance { t });
    }
    let centered = LatentSequence::lin3(1.0, z_t, -coeffs.a, data_mean, -coeffs.b, z_big_t)?;
    Ok(centered.scale(-1.0 / denom))
}
