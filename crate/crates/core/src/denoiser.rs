//! Small dense eps-prediction network and the prior regression network, the
//! only learnable components.
//!
//! Both are input -> hidden -> hidden -> output stacks with tanh hidden
//! activations and a linear output, plus a learnable class-embedding table.
//! tanh keeps the map smooth everywhere so finite-difference gradient checks
//! are clean. Gradients are written by hand and exact.
//!
//! Denoiser input layout: `[flatten(state), flatten(prior), time embedding,
//! class embedding]`. Prior-network input layout: `[flatten(replicated z^i),
//! class embedding]`. The time embedding is fixed sinusoidal features; in
//! SAF mode the caller passes the aligned timestep.

use thiserror::Error;

use crate::checkpoint::{take_tensor, CheckpointError, TensorEntry};
use crate::latent::{LatentError, LatentSequence};
use crate::rng::rng_from_seed;
use rand::Rng;

pub const CLASS_EMBED_DIM: usize = 8;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_TIME_EMBED: usize = 16;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Shape(#[from] LatentError),
    #[error("class label {label} out of range [0, {classes})")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    WrongModelKind { found: String, expected: String },
}

/// Sinusoidal features of a scalar time in `[0, T]`.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 1000f64.powf(k as f64 / half as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    if dim % 2 == 1 {
        out.push(t);
    }
    out
}

/// One dense layer, weights stored row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    /// Scaled uniform init with bound `1/sqrt(fan_in)`.
    fn init(rng: &mut rand_chacha::ChaCha12Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let biases = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            biases,
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        debug_assert_eq!(input.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.biases[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *out_v = acc;
        }
    }

    /// `W^T delta` accumulated into `out`.
    fn backward_input(&self, delta: &[f64], out: &mut [f64]) {
        for (o, &d) in delta.iter().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (g, w) in out.iter_mut().zip(row) {
                *g += d * w;
            }
        }
    }
}

/// Gradient buffer mirroring a layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// tanh-hidden multilayer perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Forward-pass intermediates needed for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    /// Post-tanh activations per hidden layer.
    pub hidden: Vec<Vec<f64>>,
}

/// Per-layer gradients for one or more accumulated backward passes.
#[derive(Debug, Clone)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradients>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradients {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }
}

impl Mlp {
    pub fn init(rng: &mut rand_chacha::ChaCha12Rng, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::init(rng, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim];
            layer.forward_into(&current, &mut next);
            if k < last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            current = next;
        }
        current
    }

    pub fn forward_trace(&self, input: &[f64]) -> (Vec<f64>, MlpTrace) {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut current = input.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.out_dim];
            layer.forward_into(&current, &mut next);
            if k < last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
                hidden.push(next.clone());
            }
            current = next;
        }
        (
            current,
            MlpTrace {
                input: input.to_vec(),
                hidden,
            },
        )
    }

    /// Accumulate parameter gradients for `upstream = dLoss/dOutput` into
    /// `grads` and return the gradient with respect to the input vector.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        upstream: &[f64],
        grads: &mut MlpGradients,
    ) -> Vec<f64> {
        let mut delta = upstream.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let act_in: &[f64] = if k == 0 {
                &trace.input
            } else {
                &trace.hidden[k - 1]
            };
            let g = &mut grads.layers[k];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, x) in row.iter_mut().zip(act_in) {
                    *gw += d * x;
                }
            }
            let mut prev = vec![0.0; layer.in_dim];
            layer.backward_input(&delta, &mut prev);
            if k > 0 {
                // tanh' = 1 - a^2 at the stored post-activation
                for (p, a) in prev.iter_mut().zip(&trace.hidden[k - 1]) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        delta
    }

    /// `theta += scale * grad` over every parameter.
    pub fn apply_scaled(&mut self, grads: &MlpGradients, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w += scale * gw;
            }
            for (b, gb) in layer.biases.iter_mut().zip(&g.biases) {
                *b += scale * gb;
            }
        }
    }

    pub fn zero_parameters(&mut self) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.biases.iter_mut().for_each(|b| *b = 0.0);
        }
    }
}

/// Shape bookkeeping for the denoiser input layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserLayout {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub time_embed_dim: usize,
}

impl DenoiserLayout {
    pub fn latent_len(&self) -> usize {
        self.frames * self.dim
    }

    pub fn input_dim(&self) -> usize {
        2 * self.latent_len() + self.time_embed_dim + CLASS_EMBED_DIM
    }
}

/// Eps-prediction network over `[state, prior, time, class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub layout: DenoiserLayout,
    pub class_embed: Vec<f64>,
    pub net: Mlp,
}

/// Gradients for every denoiser parameter.
#[derive(Debug, Clone)]
pub struct DenoiserGradients {
    pub net: MlpGradients,
    pub class_embed: Vec<f64>,
}

impl DenoiserGradients {
    pub fn zeros_like(model: &DenoiserModel) -> Self {
        Self {
            net: MlpGradients::zeros_like(&model.net),
            class_embed: vec![0.0; model.class_embed.len()],
        }
    }
}

impl DenoiserModel {
    pub fn init(
        seed: u64,
        frames: usize,
        dim: usize,
        classes: usize,
        hidden: usize,
        time_embed_dim: usize,
    ) -> Self {
        let layout = DenoiserLayout {
            frames,
            dim,
            classes,
            hidden,
            time_embed_dim,
        };
        let mut rng = rng_from_seed(seed);
        let net = Mlp::init(
            &mut rng,
            &[layout.input_dim(), hidden, hidden, layout.latent_len()],
        );
        let bound = 1.0 / (CLASS_EMBED_DIM as f64).sqrt();
        let class_embed = (0..classes * CLASS_EMBED_DIM)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            layout,
            class_embed,
            net,
        }
    }

    pub fn with_defaults(seed: u64, frames: usize, dim: usize, classes: usize) -> Self {
        Self::init(seed, frames, dim, classes, DEFAULT_HIDDEN, DEFAULT_TIME_EMBED)
    }

    fn check_inputs(
        &self,
        state: &LatentSequence,
        prior: &LatentSequence,
        class_label: usize,
    ) -> Result<(), DenoiserError> {
        let expected = LatentSequence::zeros(self.layout.frames, self.layout.dim);
        expected.same_shape(state)?;
        expected.same_shape(prior)?;
        if class_label >= self.layout.classes {
            return Err(DenoiserError::ClassOutOfRange {
                label: class_label,
                classes: self.layout.classes,
            });
        }
        Ok(())
    }

    fn assemble_input(
        &self,
        state: &LatentSequence,
        t_effective: f64,
        prior: &LatentSequence,
        class_label: usize,
    ) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.layout.input_dim());
        input.extend_from_slice(state.as_slice());
        input.extend_from_slice(prior.as_slice());
        input.extend(time_embedding(t_effective, self.layout.time_embed_dim));
        let row = &self.class_embed
            [class_label * CLASS_EMBED_DIM..(class_label + 1) * CLASS_EMBED_DIM];
        input.extend_from_slice(row);
        input
    }

    /// Deterministic prediction with the latent's shape.
    pub fn forward(
        &self,
        state: &LatentSequence,
        t_effective: f64,
        prior: &LatentSequence,
        class_label: usize,
    ) -> Result<LatentSequence, DenoiserError> {
        self.check_inputs(state, prior, class_label)?;
        let out = self
            .net
            .forward(&self.assemble_input(state, t_effective, prior, class_label));
        Ok(LatentSequence::from_vec(self.layout.frames, self.layout.dim, out)?)
    }

    /// Forward pass keeping intermediates for `backward`.
    pub fn forward_trace(
        &self,
        state: &LatentSequence,
        t_effective: f64,
        prior: &LatentSequence,
        class_label: usize,
    ) -> Result<(LatentSequence, DenoiserTrace), DenoiserError> {
        self.check_inputs(state, prior, class_label)?;
        let (out, trace) = self
            .net
            .forward_trace(&self.assemble_input(state, t_effective, prior, class_label));
        Ok((
            LatentSequence::from_vec(self.layout.frames, self.layout.dim, out)?,
            DenoiserTrace { trace, class_label },
        ))
    }

    /// Accumulate exact gradients of the upstream-weighted output into `grads`.
    pub fn backward(
        &self,
        trace: &DenoiserTrace,
        upstream: &LatentSequence,
        grads: &mut DenoiserGradients,
    ) {
        let input_grad = self
            .net
            .backward(&trace.trace, upstream.as_slice(), &mut grads.net);
        let offset = 2 * self.layout.latent_len() + self.layout.time_embed_dim;
        let row = &mut grads.class_embed
            [trace.class_label * CLASS_EMBED_DIM..(trace.class_label + 1) * CLASS_EMBED_DIM];
        for (g, ig) in row.iter_mut().zip(&input_grad[offset..offset + CLASS_EMBED_DIM]) {
            *g += ig;
        }
    }

    pub fn apply_scaled(&mut self, grads: &DenoiserGradients, scale: f64) {
        self.net.apply_scaled(&grads.net, scale);
        for (p, g) in self.class_embed.iter_mut().zip(&grads.class_embed) {
            *p += scale * g;
        }
    }

    pub fn zero_parameters(&mut self) {
        self.net.zero_parameters();
        self.class_embed.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn to_tensors(&self) -> Vec<TensorEntry> {
        let mut tensors = vec![TensorEntry::new(
            "denoiser.layout",
            vec![5],
            vec![
                self.layout.frames as f64,
                self.layout.dim as f64,
                self.layout.classes as f64,
                self.layout.hidden as f64,
                self.layout.time_embed_dim as f64,
            ],
        )];
        tensors.push(TensorEntry::new(
            "class_embed",
            vec![self.layout.classes as u32, CLASS_EMBED_DIM as u32],
            self.class_embed.clone(),
        ));
        for (k, layer) in self.net.layers.iter().enumerate() {
            tensors.push(TensorEntry::new(
                format!("layer{k}.weight"),
                vec![layer.out_dim as u32, layer.in_dim as u32],
                layer.weights.clone(),
            ));
            tensors.push(TensorEntry::new(
                format!("layer{k}.bias"),
                vec![layer.out_dim as u32],
                layer.biases.clone(),
            ));
        }
        tensors
    }

    pub fn from_tensors(tensors: &[TensorEntry]) -> Result<Self, DenoiserError> {
        let layout_vals = take_tensor(tensors, "denoiser.layout", &[5]).map_err(|e| {
            if matches!(e, CheckpointError::MissingTensor(_)) {
                DenoiserError::WrongModelKind {
                    found: "unknown".into(),
                    expected: "denoiser".into(),
                }
            } else {
                DenoiserError::Checkpoint(e)
            }
        })?;
        let layout = DenoiserLayout {
            frames: layout_vals[0] as usize,
            dim: layout_vals[1] as usize,
            classes: layout_vals[2] as usize,
            hidden: layout_vals[3] as usize,
            time_embed_dim: layout_vals[4] as usize,
        };
        let mut model = Self::init(
            0,
            layout.frames,
            layout.dim,
            layout.classes,
            layout.hidden,
            layout.time_embed_dim,
        );
        model.class_embed = take_tensor(
            tensors,
            "class_embed",
            &[layout.classes as u32, CLASS_EMBED_DIM as u32],
        )?;
        for (k, layer) in model.net.layers.iter_mut().enumerate() {
            layer.weights = take_tensor(
                tensors,
                &format!("layer{k}.weight"),
                &[layer.out_dim as u32, layer.in_dim as u32],
            )?;
            layer.biases =
                take_tensor(tensors, &format!("layer{k}.bias"), &[layer.out_dim as u32])?;
        }
        Ok(model)
    }
}

/// Intermediates from `DenoiserModel::forward_trace`.
#[derive(Debug, Clone)]
pub struct DenoiserTrace {
    trace: MlpTrace,
    class_label: usize,
}

/// One-step regression network `F(z^i, c)`; no time embedding.
///
/// The conditioning frame is replicated across the frame axis to fill the
/// input, matching how the denoiser sees priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorNetwork {
    pub frames: usize,
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub class_embed: Vec<f64>,
    pub net: Mlp,
}

/// Gradients for every prior-network parameter.
#[derive(Debug, Clone)]
pub struct PriorGradients {
    pub net: MlpGradients,
    pub class_embed: Vec<f64>,
}

impl PriorGradients {
    pub fn zeros_like(model: &PriorNetwork) -> Self {
        Self {
            net: MlpGradients::zeros_like(&model.net),
            class_embed: vec![0.0; model.class_embed.len()],
        }
    }
}

/// Intermediates from `PriorNetwork::forward_trace`.
#[derive(Debug, Clone)]
pub struct PriorTrace {
    trace: MlpTrace,
    class_label: usize,
}

impl PriorNetwork {
    pub fn init(seed: u64, frames: usize, dim: usize, classes: usize, hidden: usize) -> Self {
        let input_dim = frames * dim + CLASS_EMBED_DIM;
        let mut rng = rng_from_seed(seed);
        let net = Mlp::init(&mut rng, &[input_dim, hidden, hidden, frames * dim]);
        let bound = 1.0 / (CLASS_EMBED_DIM as f64).sqrt();
        let class_embed = (0..classes * CLASS_EMBED_DIM)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            frames,
            dim,
            classes,
            hidden,
            class_embed,
            net,
        }
    }

    fn assemble_input(&self, z_i: &[f64], class_label: usize) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.frames * self.dim + CLASS_EMBED_DIM);
        for _ in 0..self.frames {
            input.extend_from_slice(z_i);
        }
        let row =
            &self.class_embed[class_label * CLASS_EMBED_DIM..(class_label + 1) * CLASS_EMBED_DIM];
        input.extend_from_slice(row);
        input
    }

    pub fn forward(&self, z_i: &[f64], class_label: usize) -> LatentSequence {
        let out = self.net.forward(&self.assemble_input(z_i, class_label));
        LatentSequence::from_vec(self.frames, self.dim, out)
            .expect("prior network output has the latent shape")
    }

    pub fn forward_trace(&self, z_i: &[f64], class_label: usize) -> (LatentSequence, PriorTrace) {
        let (out, trace) = self
            .net
            .forward_trace(&self.assemble_input(z_i, class_label));
        (
            LatentSequence::from_vec(self.frames, self.dim, out)
                .expect("prior network output has the latent shape"),
            PriorTrace { trace, class_label },
        )
    }

    pub fn backward(
        &self,
        trace: &PriorTrace,
        upstream: &LatentSequence,
        grads: &mut PriorGradients,
    ) {
        let input_grad = self
            .net
            .backward(&trace.trace, upstream.as_slice(), &mut grads.net);
        let offset = self.frames * self.dim;
        let row = &mut grads.class_embed
            [trace.class_label * CLASS_EMBED_DIM..(trace.class_label + 1) * CLASS_EMBED_DIM];
        for (g, ig) in row.iter_mut().zip(&input_grad[offset..offset + CLASS_EMBED_DIM]) {
            *g += ig;
        }
    }

    pub fn apply_scaled(&mut self, grads: &PriorGradients, scale: f64) {
        self.net.apply_scaled(&grads.net, scale);
        for (p, g) in self.class_embed.iter_mut().zip(&grads.class_embed) {
            *p += scale * g;
        }
    }

    pub fn zero_parameters(&mut self) {
        self.net.zero_parameters();
        self.class_embed.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn to_tensors(&self) -> Vec<TensorEntry> {
        let mut tensors = vec![TensorEntry::new(
            "prior.layout",
            vec![4],
            vec![
                self.frames as f64,
                self.dim as f64,
                self.classes as f64,
                self.hidden as f64,
            ],
        )];
        tensors.push(TensorEntry::new(
            "class_embed",
            vec![self.classes as u32, CLASS_EMBED_DIM as u32],
            self.class_embed.clone(),
        ));
        for (k, layer) in self.net.layers.iter().enumerate() {
            tensors.push(TensorEntry::new(
                format!("layer{k}.weight"),
                vec![layer.out_dim as u32, layer.in_dim as u32],
                layer.weights.clone(),
            ));
            tensors.push(TensorEntry::new(
                format!("layer{k}.bias"),
                vec![layer.out_dim as u32],
                layer.biases.clone(),
            ));
        }
        tensors
    }

    pub fn from_tensors(tensors: &[TensorEntry]) -> Result<Self, DenoiserError> {
        let layout = take_tensor(tensors, "prior.layout", &[4]).map_err(|e| {
            if matches!(e, CheckpointError::MissingTensor(_)) {
                DenoiserError::WrongModelKind {
                    found: "unknown".into(),
                    expected: "prior".into(),
                }
            } else {
                DenoiserError::Checkpoint(e)
            }
        })?;
        let mut model = Self::init(
            0,
            layout[0] as usize,
            layout[1] as usize,
            layout[2] as usize,
            layout[3] as usize,
        );
        model.class_embed = take_tensor(
            tensors,
            "class_embed",
            &[model.classes as u32, CLASS_EMBED_DIM as u32],
        )?;
        for (k, layer) in model.net.layers.iter_mut().enumerate() {
            layer.weights = take_tensor(
                tensors,
                &format!("layer{k}.weight"),
                &[layer.out_dim as u32, layer.in_dim as u32],
            )?;
            layer.biases =
                take_tensor(tensors, &format!("layer{k}.bias"), &[layer.out_dim as u32])?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal_latent};

    fn small_model(seed: u64) -> DenoiserModel {
        DenoiserModel::init(seed, 2, 3, 2, 16, 8)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut model = small_model(1);
        model.zero_parameters();
        let state = LatentSequence::filled(2, 3, 1.0);
        let prior = LatentSequence::filled(2, 3, -1.0);
        let out = model.forward(&state, 0.5, &prior, 1).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_latent_shape() {
        for (frames, dim) in [(1, 4), (3, 5), (8, 16)] {
            let model = DenoiserModel::init(9, frames, dim, 3, 32, 8);
            let state = LatentSequence::zeros(frames, dim);
            let out = model.forward(&state, 0.3, &state, 2).unwrap();
            assert_eq!(out.shape(), (frames, dim));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = small_model(7);
        let mut rng = rng_from_seed(70);
        let state = standard_normal_latent(&mut rng, 2, 3);
        let prior = standard_normal_latent(&mut rng, 2, 3);
        let a = model.forward(&state, 0.42, &prior, 0).unwrap();
        let b = model.forward(&state, 0.42, &prior, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = small_model(5);
        let b = small_model(5);
        assert_eq!(a, b);
        let c = small_model(6);
        assert_ne!(a, c);
        for layer in &a.net.layers {
            let bound = 1.0 / (layer.in_dim as f64).sqrt();
            assert!(layer.weights.iter().all(|w| w.abs() <= bound));
            assert!(layer.biases.iter().all(|b| b.abs() <= bound));
        }
    }

    #[test]
    fn shape_and_class_errors() {
        let model = small_model(2);
        let state = LatentSequence::zeros(2, 3);
        let bad = LatentSequence::zeros(3, 3);
        assert!(model.forward(&bad, 0.1, &state, 0).is_err());
        assert!(model.forward(&state, 0.1, &bad, 0).is_err());
        assert!(matches!(
            model.forward(&state, 0.1, &state, 2),
            Err(DenoiserError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn bounded_inputs_stay_finite() {
        let model = DenoiserModel::with_defaults(3, 4, 8, 3);
        let state = LatentSequence::filled(4, 8, 10.0);
        let prior = LatentSequence::filled(4, 8, -10.0);
        let out = model.forward(&state, 0.99, &prior, 1).unwrap();
        assert!(out.is_finite());
    }

    /// Squared-error loss and its exact parameter gradient for FD checks.
    fn loss_and_grads(
        model: &DenoiserModel,
        state: &LatentSequence,
        t: f64,
        prior: &LatentSequence,
        class: usize,
        target: &LatentSequence,
    ) -> (f64, DenoiserGradients) {
        let (pred, trace) = model.forward_trace(state, t, prior, class).unwrap();
        let residual = pred.sub(target).unwrap();
        let loss = residual.norm_sq();
        let upstream = residual.scale(2.0);
        let mut grads = DenoiserGradients::zeros_like(model);
        model.backward(&trace, &upstream, &mut grads);
        (loss, grads)
    }

    fn loss_only(
        model: &DenoiserModel,
        state: &LatentSequence,
        t: f64,
        prior: &LatentSequence,
        class: usize,
        target: &LatentSequence,
    ) -> f64 {
        let pred = model.forward(state, t, prior, class).unwrap();
        pred.sub(target).unwrap().norm_sq()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = small_model(11);
        let mut rng = rng_from_seed(110);
        let state = standard_normal_latent(&mut rng, 2, 3);
        let prior = standard_normal_latent(&mut rng, 2, 3);
        let target = standard_normal_latent(&mut rng, 2, 3);
        let t = 0.37;
        let class = 1;
        let (_, grads) = loss_and_grads(&model, &state, t, &prior, class, &target);

        let step = 1e-6;
        let mut check = |analytic: f64, perturb: &dyn Fn(&mut DenoiserModel, f64)| {
            let mut plus = model.clone();
            perturb(&mut plus, step);
            let mut minus = model.clone();
            perturb(&mut minus, -step);
            let fd = (loss_only(&plus, &state, t, &prior, class, &target)
                - loss_only(&minus, &state, t, &prior, class, &target))
                / (2.0 * step);
            let denom = analytic.abs().max(fd.abs()).max(1e-8);
            let rel = (fd - analytic).abs() / denom;
            assert!(rel <= 1e-5, "fd {fd} vs analytic {analytic}, rel {rel}");
        };

        // >= 20 sampled parameters per layer plus biases and the class row
        let mut pick = rng_from_seed(111);
        for (k, layer) in model.net.layers.iter().enumerate() {
            for _ in 0..20 {
                let idx = pick.gen_range(0..layer.weights.len());
                check(grads.net.layers[k].weights[idx], &move |m, eps| {
                    m.net.layers[k].weights[idx] += eps;
                });
            }
            for _ in 0..5 {
                let idx = pick.gen_range(0..layer.biases.len());
                check(grads.net.layers[k].biases[idx], &move |m, eps| {
                    m.net.layers[k].biases[idx] += eps;
                });
            }
        }
        for offset in 0..CLASS_EMBED_DIM {
            let idx = class * CLASS_EMBED_DIM + offset;
            check(grads.class_embed[idx], &move |m, eps| {
                m.class_embed[idx] += eps;
            });
        }
        // untouched class rows get zero gradient
        for offset in 0..CLASS_EMBED_DIM {
            assert_eq!(grads.class_embed[offset], 0.0);
        }
    }

    #[test]
    fn zero_upstream_means_zero_gradients() {
        let model = small_model(12);
        let state = LatentSequence::filled(2, 3, 0.5);
        let (_, trace) = model.forward_trace(&state, 0.2, &state, 0).unwrap();
        let mut grads = DenoiserGradients::zeros_like(&model);
        model.backward(&trace, &LatentSequence::zeros(2, 3), &mut grads);
        for layer in &grads.net.layers {
            assert!(layer.weights.iter().all(|&g| g == 0.0));
            assert!(layer.biases.iter().all(|&g| g == 0.0));
        }
        assert!(grads.class_embed.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_descent_overfits_a_fixed_batch() {
        let mut model = small_model(13);
        let mut rng = rng_from_seed(130);
        let state = standard_normal_latent(&mut rng, 2, 3);
        let prior = standard_normal_latent(&mut rng, 2, 3);
        let target = standard_normal_latent(&mut rng, 2, 3).scale(0.1);
        let first = loss_only(&model, &state, 0.5, &prior, 0, &target);
        let mut last = first;
        for _ in 0..100 {
            let (loss, grads) = loss_and_grads(&model, &state, 0.5, &prior, 0, &target);
            model.apply_scaled(&grads, -0.01);
            last = loss;
        }
        assert!(
            last < 0.2 * first,
            "loss failed to decrease: {first} -> {last}"
        );
    }

    #[test]
    fn prior_network_gradients_match_finite_differences() {
        let model = PriorNetwork::init(21, 2, 3, 2, 16);
        let mut rng = rng_from_seed(210);
        let z_i: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let target = standard_normal_latent(&mut rng, 2, 3);
        let class = 1;

        let (pred, trace) = model.forward_trace(&z_i, class);
        let upstream = pred.sub(&target).unwrap().scale(2.0);
        let mut grads = PriorGradients::zeros_like(&model);
        model.backward(&trace, &upstream, &mut grads);

        let loss = |m: &PriorNetwork| -> f64 {
            m.forward(&z_i, class).sub(&target).unwrap().norm_sq()
        };
        let step = 1e-6;
        let mut pick = rng_from_seed(211);
        for (k, layer) in model.net.layers.iter().enumerate() {
            for _ in 0..20 {
                let idx = pick.gen_range(0..layer.weights.len());
                let mut plus = model.clone();
                plus.net.layers[k].weights[idx] += step;
                let mut minus = model.clone();
                minus.net.layers[k].weights[idx] -= step;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * step);
                let analytic = grads.net.layers[k].weights[idx];
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    (fd - analytic).abs() / denom <= 1e-5,
                    "layer {k} weight {idx}: fd {fd} vs {analytic}"
                );
            }
        }
    }

    #[test]
    fn denoiser_checkpoint_round_trip_is_bit_exact() {
        let model = DenoiserModel::init(31, 3, 4, 2, 24, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fbck");
        crate::checkpoint::write_checkpoint(&path, &model.to_tensors()).unwrap();
        let tensors = crate::checkpoint::read_checkpoint(&path).unwrap();
        let back = DenoiserModel::from_tensors(&tensors).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn prior_checkpoint_round_trip_and_kind_mismatch() {
        let model = PriorNetwork::init(32, 3, 4, 2, 24);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prior.fbck");
        crate::checkpoint::write_checkpoint(&path, &model.to_tensors()).unwrap();
        let tensors = crate::checkpoint::read_checkpoint(&path).unwrap();
        let back = PriorNetwork::from_tensors(&tensors).unwrap();
        assert_eq!(model, back);
        assert!(matches!(
            DenoiserModel::from_tensors(&tensors),
            Err(DenoiserError::WrongModelKind { .. })
        ));
    }

    #[test]
    fn time_embedding_has_requested_dim_and_varies() {
        let a = time_embedding(0.1, 16);
        let b = time_embedding(0.9, 16);
        assert_eq!(a.len(), 16);
        assert_ne!(a, b);
    }
}
