//! SNR-Aligned Fine-tuning: maps bridge states and timesteps into a diffusion
//! teacher's input convention, and realigns prediction targets for
//! v-prediction teachers.
//!
//! A bridge state `z_t = a_t z_0 + b_t z_T + c_t eps` is reparameterized as
//!
//! ```text
//! z~_t = (z_t - b_t z_T) / sqrt(a_t^2 + c_t^2)
//! t~   = teacher_SNR^{-1}(a_t^2 / c_t^2)
//! ```
//!
//! so that `z~_t` has the marginal of the teacher's diffusion at `t~`
//! (`a_t^2/c_t^2 = SNR_t - SNR_T` on the bridge side). Discrete-timestep
//! teachers are inverted through their sampled SNR table.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::bridge::{bridge_coeffs, BridgeError};
use crate::latent::{LatentError, LatentSequence};
use crate::schedule::{Schedule, ScheduleError, SnrTable};

#[derive(Debug, Error)]
pub enum SafError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Shape(#[from] LatentError),
    #[error("teacher SNR range [{teacher_min}, {teacher_max}] cannot cover bridge ratio {ratio} at t = {t}")]
    CoverageGap {
        t: f64,
        ratio: f64,
        teacher_min: f64,
        teacher_max: f64,
    },
    #[error("alignment undefined at t = {t}: a_t^2/c_t^2 = {ratio} not invertible on the teacher")]
    AlignmentRange { t: f64, ratio: f64 },
    #[error("alignment requires t strictly inside (0, {horizon}), got {t}")]
    TimeAtBoundary { t: f64, horizon: f64 },
}

/// Output convention of the teacher network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    /// Teacher predicts the injected noise.
    EpsPrediction,
    /// Teacher predicts `alpha eps - sigma z_0`.
    VPrediction,
}

/// Continuous teacher schedule or a discrete-timestep SNR table.
#[derive(Debug, Clone)]
pub enum TeacherSchedule {
    Continuous(Schedule),
    Discrete(SnrTable),
}

/// Immutable alignment between a bridge schedule and a diffusion teacher.
///
/// Construction fails when the teacher's SNR range cannot cover the bridge's
/// working interval `(SNR_bridge(T), SNR_bridge(eps_t))`. At runtime a ratio
/// above the teacher's largest tabulated SNR (very small `t`) clamps to the
/// smallest teacher timestep, and a ratio below the teacher's terminal SNR
/// (the thin sliver where `SNR_t - SNR_T` dips under it near `t = T`) clamps
/// to the teacher horizon; both bump a counter instead of failing.
#[derive(Debug)]
pub struct AlignmentMap {
    bridge: Schedule,
    teacher: TeacherSchedule,
    output_mode: OutputMode,
    t_margin: f64,
    clamp_count: AtomicU64,
}

/// Grid resolution used to validate teacher coverage at construction.
const COVERAGE_GRID: usize = 256;

/// Default interior margin `1e-4 * T` matching the sampler and trainer guards.
pub fn default_t_margin(sched: &Schedule) -> f64 {
    1e-4 * sched.horizon()
}

impl AlignmentMap {
    pub fn new(
        bridge: Schedule,
        teacher: TeacherSchedule,
        output_mode: OutputMode,
    ) -> Result<Self, SafError> {
        let t_margin = default_t_margin(&bridge);
        let map = Self {
            bridge,
            teacher,
            output_mode,
            t_margin,
            clamp_count: AtomicU64::new(0),
        };
        map.check_coverage()?;
        Ok(map)
    }

    pub fn bridge_schedule(&self) -> &Schedule {
        &self.bridge
    }

    pub fn teacher_schedule(&self) -> &TeacherSchedule {
        &self.teacher
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output_mode
    }

    /// Times the inversion clamped to a teacher boundary timestep.
    pub fn clamp_count(&self) -> u64 {
        self.clamp_count.load(Ordering::Relaxed)
    }

    fn check_coverage(&self) -> Result<(), SafError> {
        let horizon = self.bridge.horizon();
        let (teacher_min, teacher_max) = match &self.teacher {
            // continuous SNR ranges over (SNR(T~), inf)
            TeacherSchedule::Continuous(s) => (s.snr(s.horizon())?, f64::INFINITY),
            TeacherSchedule::Discrete(table) => (table.min_snr(), table.max_snr()),
        };
        // the working ratio interval is approximately
        // (SNR_bridge(T), SNR_bridge(eps_t)); ratios past a boundary clamp,
        // but a teacher floor above the bridge terminal SNR leaves no room
        let bridge_terminal = self.bridge.snr(horizon)?;
        if teacher_min >= bridge_terminal {
            return Err(SafError::CoverageGap {
                t: horizon,
                ratio: bridge_terminal,
                teacher_min,
                teacher_max,
            });
        }
        // the construction grid must itself be invertible away from clamps
        let lo = self.t_margin;
        let hi = horizon - self.t_margin;
        for n in 0..=COVERAGE_GRID {
            let t = lo + (hi - lo) * n as f64 / COVERAGE_GRID as f64;
            self.snr_ratio_at(t)?;
        }
        Ok(())
    }

    /// `a_t^2 / c_t^2`, the bridge-side SNR handed to the teacher inverse.
    pub fn snr_ratio_at(&self, t: f64) -> Result<f64, SafError> {
        let coeffs = bridge_coeffs(&self.bridge, t)?;
        if coeffs.c == 0.0 {
            return Err(SafError::TimeAtBoundary {
                t,
                horizon: self.bridge.horizon(),
            });
        }
        Ok(coeffs.a * coeffs.a / (coeffs.c * coeffs.c))
    }

    /// Aligned timestep `t~ = teacher_SNR^{-1}(a_t^2/c_t^2)`.
    ///
    /// Ratios past the teacher's tabulated or terminal SNR clamp to the
    /// corresponding boundary timestep and count the event.
    pub fn aligned_time(&self, t: f64) -> Result<f64, SafError> {
        let ratio = self.snr_ratio_at(t)?;
        match &self.teacher {
            TeacherSchedule::Continuous(s) => {
                let floor = s.snr(s.horizon()).map_err(SafError::Schedule)?;
                if ratio <= floor {
                    self.clamp_count.fetch_add(1, Ordering::Relaxed);
                    return Ok(s.horizon());
                }
                s.snr_inverse(ratio)
                    .map_err(|_| SafError::AlignmentRange { t, ratio })
            }
            TeacherSchedule::Discrete(table) => {
                if ratio > table.max_snr() {
                    self.clamp_count.fetch_add(1, Ordering::Relaxed);
                    return Ok(table.min_time());
                }
                if ratio < table.min_snr() {
                    self.clamp_count.fetch_add(1, Ordering::Relaxed);
                    return Ok(table.max_time());
                }
                table
                    .snr_inverse(ratio)
                    .map_err(|_| SafError::AlignmentRange { t, ratio })
            }
        }
    }

    /// Teacher marginal coefficients seen at the aligned timestep:
    /// `(a_t, c_t) / sqrt(a_t^2 + c_t^2)`.
    pub fn aligned_alpha_sigma(&self, t: f64) -> Result<(f64, f64), SafError> {
        let coeffs = bridge_coeffs(&self.bridge, t)?;
        let norm = (coeffs.a * coeffs.a + coeffs.c * coeffs.c).sqrt();
        if norm == 0.0 || coeffs.c == 0.0 {
            return Err(SafError::TimeAtBoundary {
                t,
                horizon: self.bridge.horizon(),
            });
        }
        Ok((coeffs.a / norm, coeffs.c / norm))
    }

    /// Map a bridge state into the teacher convention:
    /// `z~_t = (z_t - b_t z_T)/sqrt(a_t^2+c_t^2)` and the aligned `t~`.
    pub fn align_state(
        &self,
        z_t: &LatentSequence,
        t: f64,
        z_big_t: &LatentSequence,
    ) -> Result<(LatentSequence, f64), SafError> {
        if t <= 0.0 || t >= self.bridge.horizon() {
            return Err(SafError::TimeAtBoundary {
                t,
                horizon: self.bridge.horizon(),
            });
        }
        z_t.same_shape(z_big_t)?;
        let coeffs = bridge_coeffs(&self.bridge, t)?;
        let norm = (coeffs.a * coeffs.a + coeffs.c * coeffs.c).sqrt();
        let aligned = z_t.lin2(1.0 / norm, z_big_t, -coeffs.b / norm)?;
        let t_aligned = self.aligned_time(t)?;
        Ok((aligned, t_aligned))
    }

    /// Training target in the teacher's output convention.
    ///
    /// Eps teachers keep the sampled noise; v teachers get
    /// `(a_t eps - c_t z_0) / sqrt(a_t^2 + c_t^2)`.
    pub fn align_target(
        &self,
        z0: &LatentSequence,
        eps: &LatentSequence,
        t: f64,
    ) -> Result<LatentSequence, SafError> {
        z0.same_shape(eps)?;
        match self.output_mode {
            OutputMode::EpsPrediction => Ok(eps.clone()),
            OutputMode::VPrediction => {
                let (alpha, sigma) = self.aligned_alpha_sigma(t)?;
                Ok(eps.lin2(alpha, z0, -sigma)?)
            }
        }
    }

    /// Convert a teacher-convention prediction back to an eps estimate.
    ///
    /// V-prediction inverts the 2x2 system through the aligned state:
    /// `eps = sigma~ z~_t + alpha~ v`.
    pub fn unalign_prediction(
        &self,
        net_output: &LatentSequence,
        aligned_state: &LatentSequence,
        t: f64,
    ) -> Result<LatentSequence, SafError> {
        match self.output_mode {
            OutputMode::EpsPrediction => Ok(net_output.clone()),
            OutputMode::VPrediction => {
                net_output.same_shape(aligned_state)?;
                let (alpha, sigma) = self.aligned_alpha_sigma(t)?;
                Ok(aligned_state.lin2(sigma, net_output, alpha)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal_latent};

    fn map_eps() -> AlignmentMap {
        AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Continuous(Schedule::default_vp()),
            OutputMode::EpsPrediction,
        )
        .unwrap()
    }

    fn map_v() -> AlignmentMap {
        AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Continuous(Schedule::default_vp()),
            OutputMode::VPrediction,
        )
        .unwrap()
    }

    #[test]
    fn ratio_equals_snr_difference() {
        // a_t^2/c_t^2 = SNR_t - SNR_T on a grid, relative error <= 1e-10
        let map = map_eps();
        let bridge = Schedule::default_bridge_gmax();
        let snr_big_t = bridge.snr(1.0).unwrap();
        for n in 1..100 {
            let t = n as f64 / 100.0;
            let ratio = map.snr_ratio_at(t).unwrap();
            let expected = bridge.snr(t).unwrap() - snr_big_t;
            assert!(
                (ratio - expected).abs() <= 1e-10 * expected,
                "t={t}: {ratio} vs {expected}"
            );
        }
    }

    #[test]
    fn reference_ratio_at_half() {
        // 1/6.25375 - 1/25.005 = 0.1199120...
        let map = map_eps();
        let ratio = map.snr_ratio_at(0.5).unwrap();
        assert!((ratio - 0.119_912_1).abs() < 1e-6, "ratio = {ratio}");
        let t_aligned = map.aligned_time(0.5).unwrap();
        let teacher = Schedule::default_vp();
        let back = teacher.snr(t_aligned).unwrap();
        assert!((back - ratio).abs() <= 1e-8 * ratio);
    }

    #[test]
    fn align_state_with_zero_noise_scales_the_data() {
        let map = map_eps();
        let bridge = Schedule::default_bridge_gmax();
        let mut rng = rng_from_seed(21);
        let z0 = standard_normal_latent(&mut rng, 2, 4);
        let z_big_t = standard_normal_latent(&mut rng, 2, 4);
        let t = 0.4;
        let coeffs = bridge_coeffs(&bridge, t).unwrap();
        let z_t = z0.lin2(coeffs.a, &z_big_t, coeffs.b).unwrap();
        let (aligned, _) = map.align_state(&z_t, t, &z_big_t).unwrap();
        let norm = (coeffs.a * coeffs.a + coeffs.c * coeffs.c).sqrt();
        let expected = z0.scale(coeffs.a / norm);
        assert!(aligned.sub(&expected).unwrap().norm_sq() < 1e-20);
    }

    #[test]
    fn aligned_time_matches_teacher_marginals_for_vp() {
        // VP teacher: alpha^2 + sigma^2 = 1 makes both coefficients follow
        // from the SNR match to 1e-9
        let map = map_eps();
        let teacher = Schedule::default_vp();
        for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let t_aligned = map.aligned_time(t).unwrap();
            let (alpha_teacher, sigma_teacher) = teacher.alpha_sigma(t_aligned).unwrap();
            let (alpha, sigma) = map.aligned_alpha_sigma(t).unwrap();
            assert!((alpha - alpha_teacher).abs() < 1e-9, "t={t}");
            assert!((sigma - sigma_teacher).abs() < 1e-9, "t={t}");
        }
    }

    #[test]
    fn align_target_limits() {
        let map = map_v();
        let mut rng = rng_from_seed(22);
        let z0 = standard_normal_latent(&mut rng, 2, 3);
        let eps = standard_normal_latent(&mut rng, 2, 3);

        // t -> 0: a -> 1, c -> 0, target -> eps
        let near_zero = map.align_target(&z0, &eps, 1e-6).unwrap();
        let rel = near_zero.sub(&eps).unwrap().norm_sq().sqrt() / eps.norm_sq().sqrt();
        assert!(rel < 1e-2, "rel = {rel}");

        // a_t = c_t: target = (eps - z0)/sqrt(2)
        let bridge = Schedule::default_bridge_gmax();
        let (mut lo, mut hi) = (1e-6, 1.0 - 1e-6);
        let mut t_eq = 0.5;
        for _ in 0..200 {
            t_eq = 0.5 * (lo + hi);
            let co = bridge_coeffs(&bridge, t_eq).unwrap();
            if co.a > co.c {
                lo = t_eq;
            } else {
                hi = t_eq;
            }
        }
        let target = map.align_target(&z0, &eps, t_eq).unwrap();
        let expected = eps.lin2(1.0 / 2f64.sqrt(), &z0, -1.0 / 2f64.sqrt()).unwrap();
        assert!(target.sub(&expected).unwrap().norm_sq() < 1e-12);
    }

    #[test]
    fn eps_mode_target_is_identity() {
        let map = map_eps();
        let mut rng = rng_from_seed(23);
        let z0 = standard_normal_latent(&mut rng, 2, 3);
        let eps = standard_normal_latent(&mut rng, 2, 3);
        let target = map.align_target(&z0, &eps, 0.37).unwrap();
        assert_eq!(target, eps);
        let back = map.unalign_prediction(&target, &z0, 0.37).unwrap();
        assert_eq!(back, eps);
    }

    #[test]
    fn v_mode_round_trips_exactly() {
        let map = map_v();
        let bridge = Schedule::default_bridge_gmax();
        let mut rng = rng_from_seed(24);
        for &t in &[0.05, 0.3, 0.62, 0.95] {
            let z0 = standard_normal_latent(&mut rng, 2, 4);
            let z_big_t = standard_normal_latent(&mut rng, 2, 4);
            let eps = standard_normal_latent(&mut rng, 2, 4);
            let coeffs = bridge_coeffs(&bridge, t).unwrap();
            let z_t =
                LatentSequence::lin3(coeffs.a, &z0, coeffs.b, &z_big_t, coeffs.c, &eps).unwrap();
            let (aligned, _) = map.align_state(&z_t, t, &z_big_t).unwrap();
            let v_target = map.align_target(&z0, &eps, t).unwrap();
            let recovered = map.unalign_prediction(&v_target, &aligned, t).unwrap();
            let max_abs = recovered
                .sub(&eps)
                .unwrap()
                .as_slice()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_abs <= 1e-12, "t={t}, max abs err {max_abs}");
        }
    }

    #[test]
    fn boundary_times_are_rejected() {
        let map = map_eps();
        let z = LatentSequence::zeros(1, 2);
        assert!(matches!(
            map.align_state(&z, 0.0, &z),
            Err(SafError::TimeAtBoundary { .. })
        ));
        assert!(matches!(
            map.align_state(&z, 1.0, &z),
            Err(SafError::TimeAtBoundary { .. })
        ));
    }

    #[test]
    fn coverage_failure_names_the_offending_time() {
        // teacher whose terminal SNR is far above the bridge's ratio range
        let teacher = SnrTable::new(vec![0.1, 0.2, 0.3], vec![500.0, 400.0, 300.0]).unwrap();
        let err = AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Discrete(teacher),
            OutputMode::EpsPrediction,
        )
        .unwrap_err();
        assert!(matches!(err, SafError::CoverageGap { .. }), "{err}");
    }

    #[test]
    fn discrete_top_clamps_and_counts() {
        // table covering only moderate SNRs: tiny t overflows the top
        let teacher_sched = Schedule::default_vp();
        let table = SnrTable::from_schedule(&teacher_sched, 100, 0.2).unwrap();
        let map = AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Discrete(table.clone()),
            OutputMode::EpsPrediction,
        )
        .unwrap();
        assert_eq!(map.clamp_count(), 0);
        let t_small = 1e-3;
        assert!(map.snr_ratio_at(t_small).unwrap() > table.max_snr());
        let t_aligned = map.aligned_time(t_small).unwrap();
        assert_eq!(t_aligned, table.min_time());
        assert_eq!(map.clamp_count(), 1);
    }

    #[test]
    fn terminal_sliver_clamps_to_teacher_horizon() {
        // just inside the bridge horizon the ratio dips under the VP
        // teacher's terminal SNR; alignment saturates instead of failing
        let map = map_eps();
        let teacher_floor = Schedule::default_vp().snr(1.0).unwrap();
        let t = 1.0 - 1e-4;
        assert!(map.snr_ratio_at(t).unwrap() < teacher_floor);
        let t_aligned = map.aligned_time(t).unwrap();
        assert_eq!(t_aligned, 1.0);
        assert_eq!(map.clamp_count(), 1);
    }

    #[test]
    fn discrete_inversion_tracks_continuous_within_one_cell() {
        let teacher = Schedule::default_vp();
        let steps = 1000;
        let t_min = 1e-4;
        let table = SnrTable::from_schedule(&teacher, steps, t_min).unwrap();
        let cont = AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Continuous(teacher),
            OutputMode::EpsPrediction,
        )
        .unwrap();
        let disc = AlignmentMap::new(
            Schedule::default_bridge_gmax(),
            TeacherSchedule::Discrete(table),
            OutputMode::EpsPrediction,
        )
        .unwrap();
        let cell = (1.0 - t_min) / steps as f64;
        for n in 1..50 {
            let t = n as f64 / 50.0;
            let tc = cont.aligned_time(t).unwrap();
            let td = disc.aligned_time(t).unwrap();
            assert!((tc - td).abs() <= cell, "t={t}: {tc} vs {td}");
        }
    }
}
