//! Noising schedules: marginal coefficients, SDE coefficients, SNR and its
//! inverse for the VP diffusion teacher and the Bridge-gmax bridge process.
//!
//! A schedule defines the Gaussian marginal kernel
//! `p_t(z_t | z_0) = N(alpha_t z_0, sigma_t^2 I)` together with drift and
//! diffusion coefficients `(f, g^2)` satisfying
//! `d(sigma_t^2)/dt = 2 f sigma_t^2 + g^2` and `d(alpha_t)/dt = f alpha_t`.
//!
//! - VP: linear `beta(t)`, `alpha_t^2 + sigma_t^2 = 1`.
//! - Bridge-gmax: `f = 0`, `g^2(t) = beta0 + t (beta1 - beta0)`, `alpha_t = 1`,
//!   `sigma_t^2 = (beta1 - beta0) t^2 / 2 + beta0 t`.
//!
//! SNR `alpha_t^2 / sigma_t^2` is strictly decreasing on `(0, T]`; its inverse
//! is solved by bisection so that every schedule shares one code path.

use thiserror::Error;

/// Relative tolerance for the bisection SNR inverse.
pub const SNR_INVERSE_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {t} outside schedule domain [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("SNR diverges at t = 0")]
    SnrAtZero,
    #[error("SNR target {value} outside invertible range ({min_snr}, inf)")]
    SnrOutOfRange { value: f64, min_snr: f64 },
    #[error("SNR target {value} outside table range [{min_snr}, {max_snr}]")]
    TableOutOfRange { value: f64, min_snr: f64, max_snr: f64 },
    #[error("invalid schedule parameters: {0}")]
    InvalidParams(String),
    #[error("SNR table must be strictly decreasing over increasing times")]
    TableNotMonotone,
}

/// Which process family the schedule belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    /// Variance preserving: `beta(t)` linear in `t`, rates in 1/time.
    Vp { beta_min: f64, beta_max: f64 },
    /// Bridge-gmax: `beta0`, `beta1` are variance rates.
    BridgeGmax { beta0: f64, beta1: f64 },
}

/// An immutable noising schedule on `t in [0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    horizon: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, horizon: f64) -> Result<Self, ScheduleError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ScheduleError::InvalidParams(format!(
                "horizon must be positive and finite, got {horizon}"
            )));
        }
        match kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) {
                    return Err(ScheduleError::InvalidParams(format!(
                        "VP requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
                    )));
                }
            }
            ScheduleKind::BridgeGmax { beta0, beta1 } => {
                if !(beta0 > 0.0 && beta1 > beta0 && beta1.is_finite()) {
                    return Err(ScheduleError::InvalidParams(format!(
                        "Bridge-gmax requires 0 < beta0 < beta1, got ({beta0}, {beta1})"
                    )));
                }
            }
        }
        Ok(Self { kind, horizon })
    }

    /// VP schedule on `[0, 1]`.
    pub fn vp(beta_min: f64, beta_max: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::Vp { beta_min, beta_max }, 1.0)
    }

    /// Bridge-gmax schedule on `[0, 1]`.
    pub fn bridge_gmax(beta0: f64, beta1: f64) -> Result<Self, ScheduleError> {
        Self::new(ScheduleKind::BridgeGmax { beta0, beta1 }, 1.0)
    }

    /// Conventional VP teacher defaults.
    pub fn default_vp() -> Self {
        Self::vp(0.1, 20.0).expect("default VP parameters are valid")
    }

    /// Bridge-gmax with the reference constants `beta0 = 0.01`, `beta1 = 50`.
    pub fn default_bridge_gmax() -> Self {
        Self::bridge_gmax(0.01, 50.0).expect("default Bridge-gmax parameters are valid")
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, t: f64) -> Result<(), ScheduleError> {
        if !t.is_finite() || t < 0.0 || t > self.horizon {
            return Err(ScheduleError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    /// Marginal kernel coefficients `(alpha_t, sigma_t)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64), ScheduleError> {
        self.check_time(t)?;
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                // integral of beta over [0, t] with beta linear in t/T
                let ib = beta_min * t + 0.5 * (beta_max - beta_min) * t * t / self.horizon;
                let alpha = (-0.5 * ib).exp();
                let sigma = (1.0 - alpha * alpha).max(0.0).sqrt();
                Ok((alpha, sigma))
            }
            ScheduleKind::BridgeGmax { beta0, beta1 } => {
                let sigma_sq = 0.5 * (beta1 - beta0) * t * t + beta0 * t;
                Ok((1.0, sigma_sq.sqrt()))
            }
        }
    }

    /// SDE coefficients `(f, g^2)` consistent with `alpha_sigma`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64), ScheduleError> {
        self.check_time(t)?;
        match self.kind {
            ScheduleKind::Vp { beta_min, beta_max } => {
                let beta = beta_min + (beta_max - beta_min) * t / self.horizon;
                Ok((-0.5 * beta, beta))
            }
            ScheduleKind::BridgeGmax { beta0, beta1 } => Ok((0.0, beta0 + t * (beta1 - beta0))),
        }
    }

    /// Signal-to-noise ratio `alpha_t^2 / sigma_t^2`; diverges at `t = 0`.
    pub fn snr(&self, t: f64) -> Result<f64, ScheduleError> {
        self.check_time(t)?;
        if t == 0.0 {
            return Err(ScheduleError::SnrAtZero);
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        Ok(alpha * alpha / (sigma * sigma))
    }

    /// Unique `t` with `snr(t) = value`, found by bisection on the monotone SNR.
    pub fn snr_inverse(&self, value: f64) -> Result<f64, ScheduleError> {
        let min_snr = self.snr(self.horizon)?;
        if !(value.is_finite() && value > min_snr) {
            return Err(ScheduleError::SnrOutOfRange { value, min_snr });
        }
        // SNR decreases from +inf at t -> 0+ to min_snr at T, so the root is
        // bracketed by (0, T]; the midpoint never touches t = 0.
        let mut lo = 0.0_f64;
        let mut hi = self.horizon;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.snr(mid)? > value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Monotone SNR samples `(t_n, snr_n)` of a discrete-timestep teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrTable {
    times: Vec<f64>,
    snrs: Vec<f64>,
}

impl SnrTable {
    /// Build from explicit samples; times strictly increasing, SNR strictly
    /// decreasing.
    pub fn new(times: Vec<f64>, snrs: Vec<f64>) -> Result<Self, ScheduleError> {
        if times.len() != snrs.len() || times.len() < 2 {
            return Err(ScheduleError::TableNotMonotone);
        }
        let increasing = times.windows(2).all(|w| w[1] > w[0]);
        let decreasing = snrs.windows(2).all(|w| w[1] < w[0]);
        let finite = times.iter().chain(snrs.iter()).all(|v| v.is_finite());
        if !(increasing && decreasing && finite) {
            return Err(ScheduleError::TableNotMonotone);
        }
        Ok(Self { times, snrs })
    }

    /// Sample a schedule at `steps + 1` uniform timesteps on `[t_min, T]`.
    ///
    /// `t_min > 0` keeps the SNR finite at the first grid point.
    pub fn from_schedule(
        sched: &Schedule,
        steps: usize,
        t_min: f64,
    ) -> Result<Self, ScheduleError> {
        if steps == 0 || !(t_min > 0.0 && t_min < sched.horizon()) {
            return Err(ScheduleError::InvalidParams(format!(
                "table needs steps >= 1 and 0 < t_min < horizon, got steps={steps}, t_min={t_min}"
            )));
        }
        let horizon = sched.horizon();
        let mut times = Vec::with_capacity(steps + 1);
        let mut snrs = Vec::with_capacity(steps + 1);
        for n in 0..=steps {
            let t = t_min + (horizon - t_min) * n as f64 / steps as f64;
            times.push(t);
            snrs.push(sched.snr(t)?);
        }
        Self::new(times, snrs)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn snrs(&self) -> &[f64] {
        &self.snrs
    }

    /// Largest tabulated SNR (at the smallest timestep).
    pub fn max_snr(&self) -> f64 {
        self.snrs[0]
    }

    /// Smallest tabulated SNR (at the final timestep).
    pub fn min_snr(&self) -> f64 {
        *self.snrs.last().unwrap()
    }

    /// Smallest tabulated timestep.
    pub fn min_time(&self) -> f64 {
        self.times[0]
    }

    /// Largest tabulated timestep.
    pub fn max_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Invert the tabulated SNR by piecewise-linear interpolation in SNR.
    ///
    /// Finds `n` with `snr_n >= value >= snr_{n+1}` and interpolates the
    /// timestep linearly between `t_n` and `t_{n+1}`.
    pub fn snr_inverse(&self, value: f64) -> Result<f64, ScheduleError> {
        if !value.is_finite() || value > self.max_snr() || value < self.min_snr() {
            return Err(ScheduleError::TableOutOfRange {
                value,
                min_snr: self.min_snr(),
                max_snr: self.max_snr(),
            });
        }
        // binary search for the bracketing segment in the decreasing snrs
        let mut lo = 0usize;
        let mut hi = self.snrs.len() - 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.snrs[mid] >= value {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (s0, s1) = (self.snrs[lo], self.snrs[hi]);
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let frac = (s0 - value) / (s0 - s1);
        Ok(t0 + frac * (t1 - t0))
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_schedule() -> impl Strategy<Value = Schedule> {
        prop_oneof![
            (0.01f64..1.0, 2.0f64..40.0)
                .prop_map(|(lo, hi)| Schedule::vp(lo, hi).unwrap()),
            (0.001f64..0.5, 1.0f64..100.0)
                .prop_map(|(lo, hi)| Schedule::bridge_gmax(lo, hi).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn snr_strictly_decreasing(sched in arb_schedule(), t1 in 1e-4f64..1.0, dt in 1e-4f64..0.5) {
            let t2 = (t1 + dt).min(1.0);
            prop_assume!(t2 > t1);
            let s1 = sched.snr(t1).unwrap();
            let s2 = sched.snr(t2).unwrap();
            prop_assert!(s1 > s2);
        }

        #[test]
        fn snr_inverse_round_trips(sched in arb_schedule(), t in 1e-3f64..1.0) {
            let v = sched.snr(t).unwrap();
            let back = sched.snr_inverse(v).unwrap();
            prop_assert!((back - t).abs() <= 1e-9 * t.max(1.0));
        }

        #[test]
        fn sigma_zero_at_origin_and_positive_after(sched in arb_schedule(), t in 1e-6f64..1.0) {
            let (_, s0) = sched.alpha_sigma(0.0).unwrap();
            prop_assert_eq!(s0, 0.0);
            let (a, s) = sched.alpha_sigma(t).unwrap();
            prop_assert!(a > 0.0);
            prop_assert!(s > 0.0);
        }
    }
}
