//! FrameBridge: a desk-scale data-to-data bridge generative toolkit.
//!
//! The library builds generative bridges between a conditioning frame and a
//! frame sequence: noising schedules with SNR inversion, the closed-form
//! Gaussian bridge kernel and its score parameterization, SNR-aligned
//! fine-tuning from diffusion teachers, a synthetic frame-sequence world with
//! analytic conditional statistics, small dense networks with hand-written
//! gradients, training loops, backward-SDE samplers, and quantitative
//! evaluation against closed-form oracles.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod evalkit;
pub mod latent;
pub mod oracles;
pub mod rng;
pub mod saf;
pub mod sampler;
pub mod schedule;
pub mod toy;
pub mod train;

pub use bridge::{
    analytic_gaussian_score, bridge_coeffs, bridge_marginal, h_term, sample_bridge_state,
    score_from_eps, BridgeCoefficients, GaussianMarginal,
};
pub use latent::LatentSequence;
pub use saf::{AlignmentMap, OutputMode, TeacherSchedule};
pub use schedule::{Schedule, ScheduleKind, SnrTable};
