//! Embedding alignment by gradient descent on pixels: drive f_I(x₀+Δx)
//! toward a chosen text embedding by iterating x ← x − lr·∂L/∂x with
//! L = ½‖f_I(x₀+Δx) − f_T(t_tg)‖², recording loss, cosine similarity, and
//! perturbation size at every step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{register_model, vision_forward, Embedding, ModelError};
use crate::graph::{Graph, Var};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("non-finite gradient at step {step}")]
    Numeric { step: usize },
    #[error("invalid attack config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// When the iterate is projected back into the valid pixel domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampMode {
    /// Clip after every update; every intermediate is a valid image.
    PerStep,
    /// Optimize unconstrained and clip once at the end.
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Gradient step size.
    pub learning_rate: f32,
    pub max_steps: usize,
    /// Convergence threshold τ on cosine similarity to the target.
    pub tau: f32,
    pub clamp_mode: ClampMode,
    /// Optional ℓ∞ cap on the perturbation, applied before domain clamping.
    pub linf_budget: Option<f32>,
    /// Used by batch drivers when sampling attack pairs; the alignment
    /// itself is deterministic and draws no randomness.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            learning_rate: 0.02,
            max_steps: 5000,
            tau: 0.995,
            clamp_mode: ClampMode::PerStep,
            linf_budget: None,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.learning_rate <= 0.0 {
            return Err(AttackError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(AttackError::BadConfig(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        if self.max_steps == 0 {
            return Err(AttackError::BadConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the optimization trace. Step 0 is the unperturbed image; the
/// final record always describes the returned image.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceRecord {
    pub step: usize,
    pub loss: f32,
    /// Cosine similarity between the current embedding and the target.
    pub cosine: f32,
    /// Mean of |Δx| over all S·S·3 scalars.
    pub mean_abs_diff: f32,
}

/// In-progress attack: the original image, the running perturbation, and the
/// target embedding (computed once).
#[derive(Debug, Clone)]
pub struct AttackState {
    pub original: Tensor,
    pub delta: Tensor,
    pub target_tokens: Vec<u32>,
    pub target_emb: Embedding,
}

impl AttackState {
    pub fn new(image: Tensor, target_tokens: Vec<u32>, model: &ModelParams) -> Result<Self, AttackError> {
        let target_emb = crate::encoder::encode_text(&target_tokens, model)?;
        let delta = Tensor::zeros(image.shape());
        Ok(AttackState {
            original: image,
            delta,
            target_tokens,
            target_emb,
        })
    }

    /// x₀ + Δx.
    pub fn current_image(&self) -> Tensor {
        let data = self
            .original
            .data()
            .iter()
            .zip(self.delta.data())
            .map(|(x, d)| x + d)
            .collect();
        Tensor::from_vec(self.original.shape(), data)
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    /// Perturbed image, clipped to [0,1].
    pub final_image: Tensor,
    /// True iff the final cosine reached τ.
    pub converged: bool,
    /// Gradient steps executed.
    pub steps: usize,
    pub final_loss: f32,
    pub final_cosine: f32,
    pub trace: Vec<TraceRecord>,
}

/// Elementwise clip to the valid pixel domain [0,1].
pub fn clamp_to_domain(image: &Tensor) -> Tensor {
    let data = image.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(image.shape(), data)
}

/// ½‖f_I(x) − t‖²; with unit-norm embeddings this equals 1 − cosine.
pub fn align_loss(image: &Tensor, target_emb: &Embedding, model: &ModelParams) -> Result<f32, AttackError> {
    let fwd = forward_loss(image, target_emb, model, false)?;
    Ok(fwd.loss)
}

struct ForwardPass {
    graph: Graph,
    image_var: Var,
    loss_var: Var,
    loss: f32,
    cosine: f32,
}

fn forward_loss(
    image: &Tensor,
    target_emb: &Embedding,
    model: &ModelParams,
    with_grad: bool,
) -> Result<ForwardPass, AttackError> {
    let mut graph = Graph::new();
    let vars = register_model(&mut graph, model, false);
    let mut leaf = image.clone();
    leaf.requires_grad = with_grad;
    leaf.grad = None;
    let image_var = graph.leaf(leaf);
    let emb = vision_forward(&mut graph, &vars.vision, &model.config, image_var)?;
    let cosine =
        crate::linalg::dot_f64(graph.value(emb).data(), target_emb.as_slice()) as f32;
    let target = graph.constant(Tensor::from_vec(
        &[1, target_emb.len()],
        target_emb.as_slice().to_vec(),
    ));
    let diff = graph.sub(emb, target).map_err(ModelError::from)?;
    let sq = graph.dot(diff, diff).map_err(ModelError::from)?;
    let loss_var = graph.scale(sq, 0.5);
    let loss = graph.value(loss_var).item();
    Ok(ForwardPass {
        graph,
        image_var,
        loss_var,
        loss,
        cosine,
    })
}

/// One descent step applied to `current`, honoring the ℓ∞ budget and clamp
/// mode against the original image.
fn apply_update(
    original: &Tensor,
    current: &Tensor,
    grad: &[f32],
    cfg: &AttackConfig,
) -> Tensor {
    let mut data: Vec<f32> = current
        .data()
        .iter()
        .zip(grad)
        .map(|(x, g)| x - cfg.learning_rate * g)
        .collect();
    if let Some(eps) = cfg.linf_budget {
        for (v, &x0) in data.iter_mut().zip(original.data()) {
            *v = x0 + (*v - x0).clamp(-eps, eps);
        }
    }
    if cfg.clamp_mode == ClampMode::PerStep {
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(current.shape(), data)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum();
    (total / a.numel() as f64) as f32
}

/// Single alignment step on an [`AttackState`]: compute the gradient at the
/// current iterate, update Δx, and return the trace record evaluated at the
/// new iterate. With a zero learning rate the state is unchanged.
pub fn align_step(
    state: &mut AttackState,
    cfg: &AttackConfig,
    model: &ModelParams,
    step: usize,
) -> Result<TraceRecord, AttackError> {
    let current = state.current_image();
    let mut fwd = forward_loss(&current, &state.target_emb, model, true)?;
    fwd.graph.backward(fwd.loss_var).map_err(ModelError::from)?;
    let grad = fwd
        .graph
        .grad(fwd.image_var)
        .expect("image leaf requires grad");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AttackError::Numeric { step });
    }
    let updated = apply_update(&state.original, &current, grad, cfg);
    let delta: Vec<f32> = updated
        .data()
        .iter()
        .zip(state.original.data())
        .map(|(x, x0)| x - x0)
        .collect();
    state.delta = Tensor::from_vec(state.original.shape(), delta);

    let eval = forward_loss(&updated, &state.target_emb, model, false)?;
    Ok(TraceRecord {
        step,
        loss: eval.loss,
        cosine: eval.cosine,
        mean_abs_diff: mean_abs_diff(&updated, &state.original),
    })
}

/// Full alignment run: Δx starts at zero and descends until the cosine
/// similarity reaches τ or the step budget runs out. Non-convergence is a
/// result, not an error. Deterministic given its inputs.
pub fn run_alignment(
    image: &Tensor,
    target_tokens: &[u32],
    model: &ModelParams,
    cfg: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    let target_emb = crate::encoder::encode_text(target_tokens, model)?;
    let original = image.clone();
    let mut current = image.clone();

    let mut fwd = forward_loss(&current, &target_emb, model, true)?;
    let mut trace = Vec::with_capacity(64);
    trace.push(TraceRecord {
        step: 0,
        loss: fwd.loss,
        cosine: fwd.cosine,
        mean_abs_diff: 0.0,
    });

    let mut steps = 0;
    while fwd.cosine < cfg.tau && steps < cfg.max_steps {
        steps += 1;
        fwd.graph.backward(fwd.loss_var).map_err(ModelError::from)?;
        let grad = fwd
            .graph
            .grad(fwd.image_var)
            .expect("image leaf requires grad");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(AttackError::Numeric { step: steps });
        }
        current = apply_update(&original, &current, grad, cfg);
        fwd = forward_loss(&current, &target_emb, model, true)?;
        trace.push(TraceRecord {
            step: steps,
            loss: fwd.loss,
            cosine: fwd.cosine,
            mean_abs_diff: mean_abs_diff(&current, &original),
        });
    }

    let final_image = clamp_to_domain(&current);
    Ok(AttackResult {
        final_image,
        converged: fwd.cosine >= cfg.tau,
        steps,
        final_loss: fwd.loss,
        final_cosine: fwd.cosine,
        trace,
    })
}

/// Run a batch of attacks in parallel over the shared immutable model.
/// Results come back in input order; per-pair determinism makes the output
/// independent of the parallelism degree.
pub fn run_alignment_batch(
    pairs: &[(Tensor, Vec<u32>)],
    model: &ModelParams,
    cfg: &AttackConfig,
) -> Vec<Result<AttackResult, AttackError>> {
    pairs
        .par_iter()
        .map(|(image, tokens)| run_alignment(image, tokens, model, cfg))
        .collect()
}
