//! Training loops for the bridge, diffusion and prior objectives, plus the
//! fine-tuning driver that starts a bridge model from diffusion teacher
//! weights.
//!
//! Each step samples a fresh batch of toy clips (per-clip seeds `seed xor
//! index`), draws `t` uniformly on `[eps_t, T - eps_t]`, builds the noisy
//! state through the process kernel, and applies one plain gradient-descent
//! update on the squared-error objective. No momentum, no EMA: the update
//! rule is exactly specified so runs are bit-reproducible.
//!
//! Raw bridge mode trains against the literal target `(z_t - alpha_t
//! z_0)/sigma_t`; SNR-aligned mode feeds the network `(z~_t, t~)` and trains
//! against the teacher-convention target from `align_target`. The two losses
//! are comparable only within a mode.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::bridge::{bridge_coeffs, BridgeError};
use crate::checkpoint::{write_checkpoint, CheckpointError};
use crate::denoiser::{
    DenoiserError, DenoiserGradients, DenoiserModel, PriorGradients, PriorNetwork,
};
use crate::latent::{LatentError, LatentSequence};
use crate::rng::{derive_seed, rng_from_seed, standard_normal_latent};
use crate::saf::{AlignmentMap, OutputMode, SafError, TeacherSchedule};
use crate::schedule::{Schedule, ScheduleError, SnrTable};
use crate::toy::{build_prior, conditional_mean_oracle, generate_clip, ClipSample, PriorSpec, ToyConfig, ToyError};

/// High-bit offset separating the eval clip stream from the training stream.
const EVAL_SEED_OFFSET: u64 = 0xE7A1 << 40;
/// High-bit offset separating the step rng from the model-init seed.
const STEP_SEED_OFFSET: u64 = 0x57E9 << 40;
/// High-bit offset for the frozen eval noise stream.
const EVAL_NOISE_OFFSET: u64 = 0x401E << 40;
/// Stratified timestep count used by every evaluation pass.
const EVAL_T_POINTS: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Saf(#[from] SafError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Model(#[from] DenoiserError),
    #[error(transparent)]
    Shape(#[from] LatentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}; aborting run")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("teacher layout does not match config: {0}")]
    TeacherMismatch(String),
}

/// Which objective the run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// VP diffusion baseline, eps target.
    Diffusion,
    /// Bridge denoising with the literal `(z_t - alpha_t z_0)/sigma_t` target.
    Bridge,
    /// Bridge denoising through SNR-aligned inputs and targets.
    BridgeSaf,
    /// One-step prior regression onto clean clips.
    Prior,
}

/// Teacher schedule description for SNR-aligned runs.
#[derive(Debug, Clone)]
pub struct TeacherSpec {
    pub schedule: Schedule,
    /// `Some(n)`: invert through an `n`-step sampled SNR table.
    pub discrete_steps: Option<usize>,
}

impl TeacherSpec {
    pub fn to_teacher_schedule(&self, t_margin: f64) -> Result<TeacherSchedule, TrainError> {
        Ok(match self.discrete_steps {
            Some(steps) => TeacherSchedule::Discrete(SnrTable::from_schedule(
                &self.schedule,
                steps,
                t_margin,
            )?),
            None => TeacherSchedule::Continuous(self.schedule),
        })
    }
}

/// Full description of one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: Schedule,
    pub toy: ToyConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Interior margin for timestep sampling, default `1e-4 * T`.
    pub t_margin: f64,
    /// Timestep weight, fixed to 1 unless experimenting.
    pub lambda_weight: f64,
    pub hidden: usize,
    pub time_embed_dim: usize,
    /// Steps between metric rows and eval passes; 0 evaluates only at the
    /// start and end.
    pub eval_every: usize,
    pub eval_clips: usize,
    /// Explicit eval stream seed; `None` derives one far from the training
    /// stream.
    pub eval_seed: Option<u64>,
    /// Steps between checkpoint files; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    /// Teacher for `BridgeSaf` runs.
    pub teacher: Option<TeacherSpec>,
    pub output_mode: OutputMode,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, schedule: Schedule, toy: ToyConfig) -> Self {
        Self {
            mode,
            schedule,
            toy,
            batch_size: 16,
            iterations: 1000,
            learning_rate: 1e-3,
            seed: 0,
            t_margin: 1e-4,
            lambda_weight: 1.0,
            hidden: crate::denoiser::DEFAULT_HIDDEN,
            time_embed_dim: crate::denoiser::DEFAULT_TIME_EMBED,
            eval_every: 0,
            eval_clips: 128,
            eval_seed: None,
            checkpoint_every: 0,
            teacher: None,
            output_mode: OutputMode::EpsPrediction,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.toy.validate()?;
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(TrainError::InvalidConfig(
                "batch size and iteration count must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(self.t_margin > 0.0 && 2.0 * self.t_margin < self.schedule.horizon()) {
            return Err(TrainError::InvalidConfig(format!(
                "t margin {} incompatible with horizon {}",
                self.t_margin,
                self.schedule.horizon()
            )));
        }
        if self.eval_clips == 0 {
            return Err(TrainError::InvalidConfig("eval_clips must be positive".into()));
        }
        match self.mode {
            TrainMode::BridgeSaf => {
                if self.teacher.is_none() {
                    return Err(TrainError::InvalidConfig(
                        "SNR-aligned mode needs a teacher schedule".into(),
                    ));
                }
            }
            TrainMode::Diffusion => {
                if !matches!(self.schedule.kind(), crate::schedule::ScheduleKind::Vp { .. }) {
                    return Err(TrainError::InvalidConfig(
                        "diffusion mode expects a VP schedule".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolved_eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or(self.seed ^ EVAL_SEED_OFFSET)
    }

    fn sample_t(&self, rng: &mut ChaCha12Rng) -> f64 {
        let lo = self.t_margin;
        let hi = self.schedule.horizon() - self.t_margin;
        rng.gen_range(lo..hi)
    }

    fn eval_t_grid(&self) -> Vec<f64> {
        let lo = self.t_margin;
        let hi = self.schedule.horizon() - self.t_margin;
        (0..EVAL_T_POINTS)
            .map(|j| lo + (hi - lo) * (j as f64 + 0.5) / EVAL_T_POINTS as f64)
            .collect()
    }

    fn training_clip(&self, index: u64) -> Result<ClipSample, TrainError> {
        Ok(generate_clip(derive_seed(self.seed, index), &self.toy)?)
    }

    fn eval_clip(&self, index: u64) -> Result<ClipSample, TrainError> {
        Ok(generate_clip(
            derive_seed(self.resolved_eval_seed(), index),
            &self.toy,
        )?)
    }
}

/// Per-element pieces shared by the bridge losses.
struct BridgeExample {
    state: LatentSequence,
    t_effective: f64,
    prior: LatentSequence,
    target: LatentSequence,
    class_label: usize,
}

fn bridge_example(
    cfg: &TrainConfig,
    clip: &ClipSample,
    t: f64,
    eps: &LatentSequence,
    prior_spec: &PriorSpec,
    alignment: Option<&AlignmentMap>,
) -> Result<BridgeExample, TrainError> {
    let z_big_t = build_prior(
        prior_spec,
        clip.conditioning_frame(),
        clip.class_label,
        cfg.toy.frames,
    )?;
    let coeffs = bridge_coeffs(&cfg.schedule, t)?;
    let z_t = LatentSequence::lin3(coeffs.a, &clip.z0, coeffs.b, &z_big_t, coeffs.c, eps)?;
    match alignment {
        Some(map) => {
            let (aligned, t_aligned) = map.align_state(&z_t, t, &z_big_t)?;
            let target = map.align_target(&clip.z0, eps, t)?;
            Ok(BridgeExample {
                state: aligned,
                t_effective: t_aligned,
                prior: z_big_t,
                target,
                class_label: clip.class_label,
            })
        }
        None => {
            let (alpha_t, sigma_t) = cfg.schedule.alpha_sigma(t)?;
            let target = z_t.lin2(1.0 / sigma_t, &clip.z0, -alpha_t / sigma_t)?;
            Ok(BridgeExample {
                state: z_t,
                t_effective: t,
                prior: z_big_t,
                target,
                class_label: clip.class_label,
            })
        }
    }
}

fn diffusion_example(
    cfg: &TrainConfig,
    clip: &ClipSample,
    t: f64,
    eps: &LatentSequence,
) -> Result<BridgeExample, TrainError> {
    let (alpha_t, sigma_t) = cfg.schedule.alpha_sigma(t)?;
    let z_t = clip.z0.lin2(alpha_t, eps, sigma_t)?;
    let prior = LatentSequence::replicate_frame(clip.conditioning_frame(), cfg.toy.frames);
    Ok(BridgeExample {
        state: z_t,
        t_effective: t,
        prior,
        target: eps.clone(),
        class_label: clip.class_label,
    })
}

/// One bridge training step: sample `t` and kernel noise per clip, build the
/// (optionally aligned) example, and apply a single gradient update. Returns
/// the batch loss.
pub fn train_step_bridge(
    model: &mut DenoiserModel,
    batch: &[ClipSample],
    cfg: &TrainConfig,
    prior_spec: &PriorSpec,
    alignment: Option<&AlignmentMap>,
    rng: &mut ChaCha12Rng,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = DenoiserGradients::zeros_like(model);
    let scale = 2.0 * cfg.lambda_weight / batch.len() as f64;
    let mut loss = 0.0;
    for clip in batch {
        let t = cfg.sample_t(rng);
        let eps = standard_normal_latent(rng, cfg.toy.frames, cfg.toy.dim);
        let ex = bridge_example(cfg, clip, t, &eps, prior_spec, alignment)?;
        let (pred, trace) = model.forward_trace(&ex.state, ex.t_effective, &ex.prior, ex.class_label)?;
        let residual = pred.sub(&ex.target)?;
        loss += cfg.lambda_weight * residual.norm_sq();
        model.backward(&trace, &residual.scale(scale), &mut grads);
    }
    loss /= batch.len() as f64;
    model.apply_scaled(&grads, -cfg.learning_rate);
    Ok(loss)
}

/// One diffusion training step (VP schedule, eps target).
pub fn train_step_diffusion(
    model: &mut DenoiserModel,
    batch: &[ClipSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = DenoiserGradients::zeros_like(model);
    let scale = 2.0 * cfg.lambda_weight / batch.len() as f64;
    let mut loss = 0.0;
    for clip in batch {
        let t = cfg.sample_t(rng);
        let eps = standard_normal_latent(rng, cfg.toy.frames, cfg.toy.dim);
        let ex = diffusion_example(cfg, clip, t, &eps)?;
        let (pred, trace) = model.forward_trace(&ex.state, ex.t_effective, &ex.prior, ex.class_label)?;
        let residual = pred.sub(&ex.target)?;
        loss += cfg.lambda_weight * residual.norm_sq();
        model.backward(&trace, &residual.scale(scale), &mut grads);
    }
    loss /= batch.len() as f64;
    model.apply_scaled(&grads, -cfg.learning_rate);
    Ok(loss)
}

/// One prior-regression step: squared error of `F(z^i, c)` against the clip.
pub fn train_step_prior(
    prior_net: &mut PriorNetwork,
    batch: &[ClipSample],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut grads = PriorGradients::zeros_like(prior_net);
    let scale = 2.0 / batch.len() as f64;
    let mut loss = 0.0;
    for clip in batch {
        let (pred, trace) = prior_net.forward_trace(clip.conditioning_frame(), clip.class_label);
        let residual = pred.sub(&clip.z0)?;
        loss += residual.norm_sq();
        prior_net.backward(&trace, &residual.scale(scale), &mut grads);
    }
    loss /= batch.len() as f64;
    prior_net.apply_scaled(&grads, -cfg.learning_rate);
    Ok(loss)
}

/// Held-out loss at stratified timesteps with a frozen noise stream.
pub fn eval_loss(
    model: &DenoiserModel,
    cfg: &TrainConfig,
    prior_spec: &PriorSpec,
    alignment: Option<&AlignmentMap>,
) -> Result<f64, TrainError> {
    let grid = cfg.eval_t_grid();
    let mut noise_rng = rng_from_seed(cfg.resolved_eval_seed() ^ EVAL_NOISE_OFFSET);
    let mut loss = 0.0;
    let mut count = 0usize;
    for i in 0..cfg.eval_clips {
        let clip = cfg.eval_clip(i as u64)?;
        for &t in &grid {
            let eps = standard_normal_latent(&mut noise_rng, cfg.toy.frames, cfg.toy.dim);
            let ex = match cfg.mode {
                TrainMode::Diffusion => diffusion_example(cfg, &clip, t, &eps)?,
                _ => bridge_example(cfg, &clip, t, &eps, prior_spec, alignment)?,
            };
            let pred = model.forward(&ex.state, ex.t_effective, &ex.prior, ex.class_label)?;
            loss += cfg.lambda_weight * pred.sub(&ex.target)?.norm_sq();
            count += 1;
        }
    }
    Ok(loss / count as f64)
}

/// Held-out per-cell MSE of the prior network against the conditional-mean
/// oracle.
pub fn eval_prior_mse(prior_net: &PriorNetwork, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut acc = 0.0;
    for i in 0..cfg.eval_clips {
        let clip = cfg.eval_clip(i as u64)?;
        let oracle = conditional_mean_oracle(&cfg.toy, clip.conditioning_frame(), clip.class_label)?;
        let pred = prior_net.forward(clip.conditioning_frame(), clip.class_label);
        acc += pred.mse(&oracle)?;
    }
    Ok(acc / cfg.eval_clips as f64)
}

/// One metric row: losses at a step plus wall-clock.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub wall_ms: u64,
}

/// What a finished run hands back.
#[derive(Debug)]
pub enum TrainedModel {
    Denoiser(DenoiserModel),
    Prior(PriorNetwork),
}

/// Finished run: final parameters plus the metric curve.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn denoiser(&self) -> Option<&DenoiserModel> {
        match &self.model {
            TrainedModel::Denoiser(m) => Some(m),
            TrainedModel::Prior(_) => None,
        }
    }

    pub fn prior(&self) -> Option<&PriorNetwork> {
        match &self.model {
            TrainedModel::Prior(p) => Some(p),
            TrainedModel::Denoiser(_) => None,
        }
    }
}

/// Filesystem sinks for a run; everything is optional so library callers can
/// train without touching disk.
#[derive(Debug, Default, Clone)]
pub struct RunSinks {
    pub run_dir: Option<std::path::PathBuf>,
    pub config_hash: String,
}

impl RunSinks {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn in_dir(dir: &Path, config_hash: &str) -> Self {
        Self {
            run_dir: Some(dir.to_path_buf()),
            config_hash: config_hash.to_string(),
        }
    }
}

struct MetricsWriter {
    file: Option<std::fs::File>,
}

impl MetricsWriter {
    fn create(sinks: &RunSinks, seed: u64) -> Result<Self, TrainError> {
        use std::io::Write;
        let file = match &sinks.run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let mut f = std::fs::File::create(dir.join("metrics.csv"))?;
                writeln!(f, "# config {} seed {}", sinks.config_hash, seed)?;
                writeln!(f, "step,train_loss,eval_loss,wall_ms")?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn row(&mut self, point: &CurvePoint) -> Result<(), TrainError> {
        use std::io::Write;
        if let Some(f) = &mut self.file {
            writeln!(
                f,
                "{},{:.17e},{:.17e},{}",
                point.step, point.train_loss, point.eval_loss, point.wall_ms
            )?;
        }
        Ok(())
    }
}

fn checkpoint_model(
    sinks: &RunSinks,
    name: &str,
    model: &TrainedModelRef<'_>,
) -> Result<(), TrainError> {
    if let Some(dir) = &sinks.run_dir {
        let tensors = match model {
            TrainedModelRef::Denoiser(m) => m.to_tensors(),
            TrainedModelRef::Prior(p) => p.to_tensors(),
        };
        write_checkpoint(&dir.join(name), &tensors)?;
    }
    Ok(())
}

enum TrainedModelRef<'a> {
    Denoiser(&'a DenoiserModel),
    Prior(&'a PriorNetwork),
}

/// Train from scratch (or from `init_model`) under `cfg`, emitting metric
/// rows and checkpoints into `sinks` when a run directory is set.
///
/// The curve always contains a step-0 row (pre-update eval) and a final row.
pub fn run_training(
    cfg: &TrainConfig,
    prior_spec: &PriorSpec,
    init_model: Option<DenoiserModel>,
    sinks: &RunSinks,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let alignment = match cfg.mode {
        TrainMode::BridgeSaf => {
            let teacher = cfg
                .teacher
                .as_ref()
                .expect("validated above")
                .to_teacher_schedule(cfg.t_margin)?;
            Some(AlignmentMap::new(cfg.schedule, teacher, cfg.output_mode)?)
        }
        _ => None,
    };

    let mut metrics = MetricsWriter::create(sinks, cfg.seed)?;
    let start = Instant::now();
    let mut rng = rng_from_seed(cfg.seed ^ STEP_SEED_OFFSET);
    let mut curve = Vec::new();

    if cfg.mode == TrainMode::Prior {
        let mut net = PriorNetwork::init(
            cfg.seed,
            cfg.toy.frames,
            cfg.toy.dim,
            cfg.toy.classes,
            cfg.hidden,
        );
        let mut window_loss = 0.0;
        let mut window_len = 0usize;
        let eval0 = eval_prior_mse(&net, cfg)?;
        let first = CurvePoint {
            step: 0,
            train_loss: eval0,
            eval_loss: eval0,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        metrics.row(&first)?;
        curve.push(first);
        for step in 1..=cfg.iterations {
            let base = (step as u64 - 1) * cfg.batch_size as u64;
            let batch: Vec<ClipSample> = (0..cfg.batch_size)
                .map(|b| cfg.training_clip(base + b as u64))
                .collect::<Result<_, _>>()?;
            let loss = train_step_prior(&mut net, &batch, cfg)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, loss });
            }
            window_loss += loss;
            window_len += 1;
            let due = cfg.eval_every != 0 && step % cfg.eval_every == 0;
            if due || step == cfg.iterations {
                let point = CurvePoint {
                    step,
                    train_loss: window_loss / window_len as f64,
                    eval_loss: eval_prior_mse(&net, cfg)?,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                metrics.row(&point)?;
                curve.push(point);
                window_loss = 0.0;
                window_len = 0;
            }
            if cfg.checkpoint_every != 0 && step % cfg.checkpoint_every == 0 {
                checkpoint_model(
                    sinks,
                    &format!("checkpoint_step{step}.fbck"),
                    &TrainedModelRef::Prior(&net),
                )?;
            }
        }
        checkpoint_model(sinks, "model.fbck", &TrainedModelRef::Prior(&net))?;
        return Ok(TrainOutcome {
            model: TrainedModel::Prior(net),
            curve,
        });
    }

    let mut model = match init_model {
        Some(m) => {
            let lay = m.layout;
            if lay.frames != cfg.toy.frames
                || lay.dim != cfg.toy.dim
                || lay.classes != cfg.toy.classes
                || lay.hidden != cfg.hidden
                || lay.time_embed_dim != cfg.time_embed_dim
            {
                return Err(TrainError::TeacherMismatch(format!(
                    "model layout {lay:?} vs config {}x{} classes {} hidden {} time {}",
                    cfg.toy.frames, cfg.toy.dim, cfg.toy.classes, cfg.hidden, cfg.time_embed_dim
                )));
            }
            m
        }
        None => DenoiserModel::init(
            cfg.seed,
            cfg.toy.frames,
            cfg.toy.dim,
            cfg.toy.classes,
            cfg.hidden,
            cfg.time_embed_dim,
        ),
    };

    let eval0 = eval_loss(&model, cfg, prior_spec, alignment.as_ref())?;
    let first = CurvePoint {
        step: 0,
        train_loss: eval0,
        eval_loss: eval0,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    metrics.row(&first)?;
    curve.push(first);

    let mut window_loss = 0.0;
    let mut window_len = 0usize;
    for step in 1..=cfg.iterations {
        let base = (step as u64 - 1) * cfg.batch_size as u64;
        let batch: Vec<ClipSample> = (0..cfg.batch_size)
            .map(|b| cfg.training_clip(base + b as u64))
            .collect::<Result<_, _>>()?;
        let loss = match cfg.mode {
            TrainMode::Diffusion => train_step_diffusion(&mut model, &batch, cfg, &mut rng)?,
            TrainMode::Bridge | TrainMode::BridgeSaf => train_step_bridge(
                &mut model,
                &batch,
                cfg,
                prior_spec,
                alignment.as_ref(),
                &mut rng,
            )?,
            TrainMode::Prior => unreachable!("handled above"),
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        window_loss += loss;
        window_len += 1;
        let due = cfg.eval_every != 0 && step % cfg.eval_every == 0;
        if due || step == cfg.iterations {
            let point = CurvePoint {
                step,
                train_loss: window_loss / window_len as f64,
                eval_loss: eval_loss(&model, cfg, prior_spec, alignment.as_ref())?,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            metrics.row(&point)?;
            curve.push(point);
            window_loss = 0.0;
            window_len = 0;
        }
        if cfg.checkpoint_every != 0 && step % cfg.checkpoint_every == 0 {
            checkpoint_model(
                sinks,
                &format!("checkpoint_step{step}.fbck"),
                &TrainedModelRef::Denoiser(&model),
            )?;
        }
    }
    checkpoint_model(sinks, "model.fbck", &TrainedModelRef::Denoiser(&model))?;
    Ok(TrainOutcome {
        model: TrainedModel::Denoiser(model),
        curve,
    })
}

/// Fine-tune a diffusion teacher into a bridge model (raw or SNR-aligned per
/// `cfg.mode`), starting from the teacher's weights.
pub fn finetune_saf(
    teacher: &DenoiserModel,
    cfg: &TrainConfig,
    prior_spec: &PriorSpec,
    sinks: &RunSinks,
) -> Result<TrainOutcome, TrainError> {
    if !matches!(cfg.mode, TrainMode::Bridge | TrainMode::BridgeSaf) {
        return Err(TrainError::InvalidConfig(
            "fine-tuning target mode must be Bridge or BridgeSaf".into(),
        ));
    }
    run_training(cfg, prior_spec, Some(teacher.clone()), sinks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac_toy() -> ToyConfig {
        // one class, zero velocity: every clip is a static blob
        ToyConfig {
            classes: 1,
            velocity_sets: vec![vec![0]],
            ..ToyConfig::default()
        }
    }

    fn quick_cfg(mode: TrainMode, schedule: Schedule) -> TrainConfig {
        let mut cfg = TrainConfig::new(mode, schedule, ToyConfig::default());
        cfg.iterations = 5;
        cfg.batch_size = 4;
        cfg.eval_clips = 8;
        cfg
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut cfg = quick_cfg(TrainMode::Bridge, Schedule::default_bridge_gmax());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = quick_cfg(TrainMode::BridgeSaf, Schedule::default_bridge_gmax());
        cfg.teacher = None;
        assert!(cfg.validate().is_err());

        let cfg = quick_cfg(TrainMode::Diffusion, Schedule::default_bridge_gmax());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_capacity_diffusion_loss_is_the_dimension() {
        // zero model predicts 0; target is unit Gaussian noise, so the
        // expected loss is d*L
        let cfg = {
            let mut c = quick_cfg(TrainMode::Diffusion, Schedule::default_vp());
            c.learning_rate = 0.0;
            c.iterations = 200;
            c
        };
        let mut model = DenoiserModel::init(1, cfg.toy.frames, cfg.toy.dim, cfg.toy.classes, 16, 8);
        model.zero_parameters();
        let mut rng = rng_from_seed(5);
        let mut acc = 0.0;
        let n = 200;
        for step in 0..n {
            let batch: Vec<ClipSample> = (0..4)
                .map(|b| cfg.training_clip(step * 4 + b).unwrap())
                .collect();
            acc += train_step_diffusion(&mut model, &batch, &cfg, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        let dim = (cfg.toy.frames * cfg.toy.dim) as f64;
        // SE of the mean of squared norms ~ sqrt(2 dim) / sqrt(n * batch)
        let se = (2.0 * dim).sqrt() / ((n * 4) as f64).sqrt();
        assert!(
            (mean - dim).abs() <= 4.0 * se.max(0.5),
            "mean loss {mean} vs dimension {dim}"
        );
    }

    #[test]
    fn zero_capacity_bridge_loss_matches_kernel_ratio() {
        // with z_T = z_0 (static clips, replicated prior) the literal target
        // is (c_t/sigma_t) eps, so the expected loss is E_t[(c/sigma)^2] d L
        let cfg = {
            let mut c = TrainConfig::new(
                TrainMode::Bridge,
                Schedule::default_bridge_gmax(),
                dirac_toy(),
            );
            c.learning_rate = 0.0;
            c.batch_size = 4;
            c
        };
        let mut model = DenoiserModel::init(1, cfg.toy.frames, cfg.toy.dim, cfg.toy.classes, 16, 8);
        model.zero_parameters();
        let prior = PriorSpec::replicated();
        let mut rng = rng_from_seed(6);
        let mut acc = 0.0;
        let n = 400;
        for step in 0..n {
            let batch: Vec<ClipSample> = (0..4)
                .map(|b| cfg.training_clip(step * 4 + b).unwrap())
                .collect();
            acc += train_step_bridge(&mut model, &batch, &cfg, &prior, None, &mut rng).unwrap();
        }
        let mean = acc / n as f64;
        // expected (c/sigma)^2 averaged over uniform t: 1 - sigma_t^2/sigma_T^2
        let sched = cfg.schedule;
        let m = 20_000;
        let mut expected = 0.0;
        for k in 0..m {
            let t = cfg.t_margin
                + (sched.horizon() - 2.0 * cfg.t_margin) * (k as f64 + 0.5) / m as f64;
            let (_, sigma_t) = sched.alpha_sigma(t).unwrap();
            let (_, sigma_big) = sched.alpha_sigma(1.0).unwrap();
            expected += 1.0 - sigma_t * sigma_t / (sigma_big * sigma_big);
        }
        expected = expected / m as f64 * (cfg.toy.frames * cfg.toy.dim) as f64;
        let rel = (mean - expected).abs() / expected;
        assert!(rel < 0.05, "mean {mean} vs expected {expected}, rel {rel}");
    }

    #[test]
    fn zero_prior_loss_is_the_clip_energy() {
        let cfg = {
            let mut c = TrainConfig::new(
                TrainMode::Prior,
                Schedule::default_bridge_gmax(),
                ToyConfig::default(),
            );
            c.learning_rate = 0.0;
            c
        };
        let mut net = PriorNetwork::init(0, cfg.toy.frames, cfg.toy.dim, cfg.toy.classes, 16);
        net.zero_parameters();
        let batch: Vec<ClipSample> = (0..8).map(|b| cfg.training_clip(b).unwrap()).collect();
        let loss = train_step_prior(&mut net, &batch, &cfg).unwrap();
        let expected: f64 =
            batch.iter().map(|c| c.z0.norm_sq()).sum::<f64>() / batch.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let mut cfg = quick_cfg(TrainMode::Bridge, Schedule::default_bridge_gmax());
        cfg.iterations = 8;
        cfg.eval_every = 4;
        let prior = PriorSpec::replicated();
        let a = run_training(&cfg, &prior, None, &RunSinks::none()).unwrap();
        let b = run_training(&cfg, &prior, None, &RunSinks::none()).unwrap();
        let (ma, mb) = (a.denoiser().unwrap(), b.denoiser().unwrap());
        assert_eq!(ma, mb);
        let losses_a: Vec<(usize, u64, u64)> = a
            .curve
            .iter()
            .map(|p| (p.step, p.train_loss.to_bits(), p.eval_loss.to_bits()))
            .collect();
        let losses_b: Vec<(usize, u64, u64)> = b
            .curve
            .iter()
            .map(|p| (p.step, p.train_loss.to_bits(), p.eval_loss.to_bits()))
            .collect();
        assert_eq!(losses_a, losses_b);
    }

    #[test]
    fn zero_learning_rate_finetune_is_a_no_op() {
        // control: fine-tuning a teacher on its own diffusion task at lr 0
        // leaves the eval loss unchanged
        let mut cfg = quick_cfg(TrainMode::Diffusion, Schedule::default_vp());
        cfg.iterations = 10;
        cfg.learning_rate = 0.0;
        cfg.eval_every = 5;
        let teacher = DenoiserModel::init(3, cfg.toy.frames, cfg.toy.dim, cfg.toy.classes, cfg.hidden, cfg.time_embed_dim);
        let prior = PriorSpec::replicated();
        let out = run_training(&cfg, &prior, Some(teacher.clone()), &RunSinks::none()).unwrap();
        let first = out.curve.first().unwrap().eval_loss;
        let last = out.curve.last().unwrap().eval_loss;
        assert!((last - first).abs() <= 1e-2 * first.abs().max(1e-12));
        assert_eq!(out.denoiser().unwrap(), &teacher);
    }

    #[test]
    fn saf_mode_runs_and_aligns() {
        let mut cfg = quick_cfg(TrainMode::BridgeSaf, Schedule::default_bridge_gmax());
        cfg.teacher = Some(TeacherSpec {
            schedule: Schedule::default_vp(),
            discrete_steps: None,
        });
        let prior = PriorSpec::replicated();
        let out = run_training(&cfg, &prior, None, &RunSinks::none()).unwrap();
        assert!(out.curve.iter().all(|p| p.train_loss.is_finite()));
    }

    #[test]
    fn metrics_file_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_cfg(TrainMode::Bridge, Schedule::default_bridge_gmax());
        cfg.iterations = 4;
        cfg.eval_every = 2;
        cfg.checkpoint_every = 2;
        let prior = PriorSpec::replicated();
        let sinks = RunSinks::in_dir(dir.path(), "cafe12");
        run_training(&cfg, &prior, None, &sinks).unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(text.starts_with("# config cafe12 seed 0"));
        assert!(text.contains("step,train_loss,eval_loss,wall_ms"));
        assert!(text.lines().count() >= 5);
        assert!(dir.path().join("model.fbck").exists());
        assert!(dir.path().join("checkpoint_step2.fbck").exists());
    }

    #[test]
    fn teacher_layout_mismatch_is_rejected() {
        let cfg = quick_cfg(TrainMode::Bridge, Schedule::default_bridge_gmax());
        let wrong = DenoiserModel::init(0, cfg.toy.frames + 1, cfg.toy.dim, cfg.toy.classes, cfg.hidden, cfg.time_embed_dim);
        let prior = PriorSpec::replicated();
        assert!(matches!(
            finetune_saf(&wrong, &cfg, &prior, &RunSinks::none()),
            Err(TrainError::TeacherMismatch(_))
        ));
    }
}
