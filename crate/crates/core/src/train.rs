//! Contrastive training of the two-tower model on the synthetic corpus:
//! symmetric InfoNCE over in-batch image-text pairs, optimized with plain
//! fixed-step gradient descent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, CorpusItem, Split, Vocabulary};
use crate::encoder::{
    argmax, encode_image, encode_text, register_model, text_forward, vision_forward, Embedding,
    ModelError,
};
use crate::graph::Graph;
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("corpus has no training items")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Hyperparameters of one training run. The seed fully determines the
/// trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// InfoNCE temperature.
    pub temperature: f32,
    pub seed: u64,
    /// Std of Gaussian pixel noise added to training images; 0 disables.
    pub pixel_jitter: f32,
    /// Maximum shift in pixels for train-time translation; 0 disables.
    pub position_jitter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1.0,
            temperature: 0.07,
            seed: 0,
            pixel_jitter: 0.02,
            position_jitter: 1,
        }
    }
}

/// Mean batch loss per epoch.
pub type LossHistory = Vec<f32>;

/// Train in place and return the per-epoch loss history.
///
/// Batches are stratified: each batch draws from distinct classes whenever
/// the class count allows, so the in-batch contrastive targets are never
/// contradictory. Training is single-threaded; with a fixed seed the
/// trajectory is reproducible bit for bit.
pub fn contrastive_train(
    model: &mut ModelParams,
    corpus: &[CorpusItem],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<LossHistory, TrainError> {
    let train_items: Vec<&CorpusItem> =
        corpus.iter().filter(|i| i.split == Split::Train).collect();
    if train_items.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let num_classes = train_items.iter().map(|i| i.class_id).max().unwrap() + 1;

    // Group item indices by class for stratified batch assembly.
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (idx, item) in train_items.iter().enumerate() {
        by_class[item.class_id].push(idx);
    }
    let rounds = by_class.iter().map(|c| c.len()).max().unwrap_or(0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // One pass: every class contributes one item per round, classes in
        // shuffled order, then the stream is chunked into batches.
        let mut order: Vec<usize> = Vec::with_capacity(train_items.len());
        let mut shuffled_classes: Vec<Vec<usize>> = by_class.clone();
        for class in &mut shuffled_classes {
            class.shuffle(&mut rng);
        }
        for round in 0..rounds {
            let mut class_order: Vec<usize> = (0..num_classes).collect();
            class_order.shuffle(&mut rng);
            for c in class_order {
                if let Some(&idx) = shuffled_classes[c].get(round) {
                    order.push(idx);
                }
            }
        }

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&CorpusItem> = chunk.iter().map(|&i| train_items[i]).collect();
            let loss = train_batch(model, &batch, vocab, cfg, &mut rng)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            epoch_loss += loss as f64;
            batches += 1;
        }
        history.push((epoch_loss / batches.max(1) as f64) as f32);
    }
    Ok(history)
}

/// Forward the whole batch on one graph, backward once, apply one SGD step.
fn train_batch(
    model: &mut ModelParams,
    batch: &[&CorpusItem],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f32, TrainError> {
    let mcfg = model.config.clone();
    let mut g = Graph::new();
    let vars = register_model(&mut g, model, true);

    let mut img_embs = Vec::with_capacity(batch.len());
    let mut txt_embs = Vec::with_capacity(batch.len());
    for item in batch {
        let image = augment(&item.image, cfg, rng);
        let img_var = g.constant(image);
        img_embs.push(vision_forward(&mut g, &vars.vision, &mcfg, img_var)?);
        let ids = tokenize(&item.caption, vocab, mcfg.max_text_len);
        txt_embs.push(text_forward(&mut g, &vars.text, &mcfg, &ids)?);
    }

    let img_mat = g.concat_rows(&img_embs).map_err(ModelError::from)?;
    let txt_mat = g.concat_rows(&txt_embs).map_err(ModelError::from)?;
    let sims = g
        .matmul_transpose_b(img_mat, txt_mat)
        .map_err(ModelError::from)?;
    let logits = g.scale(sims, 1.0 / cfg.temperature);
    let targets: Vec<usize> = (0..batch.len()).collect();
    let i2t = g.cross_entropy_rows(logits, &targets).map_err(ModelError::from)?;
    let logits_t = g.transpose(logits).map_err(ModelError::from)?;
    let t2i = g
        .cross_entropy_rows(logits_t, &targets)
        .map_err(ModelError::from)?;
    let total = g.add(i2t, t2i).map_err(ModelError::from)?;
    let loss = g.scale(total, 0.5);

    g.backward(loss).map_err(ModelError::from)?;

    // Fixed-step gradient descent, keyed by parameter name.
    let grads: std::collections::HashMap<&str, Vec<f32>> = vars
        .named
        .iter()
        .filter_map(|(name, var)| g.grad(*var).map(|grad| (name.as_str(), grad.to_vec())))
        .collect();
    for (name, tensor) in model.named_params_mut() {
        if let Some(grad) = grads.get(name.as_str()) {
            for (w, &d) in tensor.data_mut().iter_mut().zip(grad) {
                *w -= cfg.learning_rate * d;
            }
        }
    }
    Ok(g.value(loss).item())
}

/// Train-time image augmentation: small translation with edge replication,
/// then Gaussian pixel noise, clamped back to [0,1].
fn augment(image: &Tensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = image.clone();
    let size = image.shape()[0];

    if cfg.position_jitter > 0 {
        let j = cfg.position_jitter as i64;
        let dx = rng.random_range(-j..=j);
        let dy = rng.random_range(-j..=j);
        if dx != 0 || dy != 0 {
            let src = image.data();
            let dst = out.data_mut();
            for y in 0..size {
                for x in 0..size {
                    let sy = (y as i64 - dy).clamp(0, size as i64 - 1) as usize;
                    let sx = (x as i64 - dx).clamp(0, size as i64 - 1) as usize;
                    for c in 0..3 {
                        dst[(y * size + x) * 3 + c] = src[(sy * size + sx) * 3 + c];
                    }
                }
            }
        }
    }

    if cfg.pixel_jitter > 0.0 {
        for v in out.data_mut() {
            let z: f32 = rng.sample(StandardNormal);
            *v = (*v + z * cfg.pixel_jitter).clamp(0.0, 1.0);
        }
    }
    out
}

/// Zero-shot accuracy of precomputed image embeddings against a caption
/// embedding per class.
pub fn zero_shot_accuracy(
    img_embs: &[(Embedding, usize)],
    caption_embs: &[Embedding],
    temperature: f32,
) -> Result<f64, ModelError> {
    let mut hits = 0usize;
    for (emb, class_id) in img_embs {
        let probs = crate::encoder::zero_shot_classify(emb, caption_embs, temperature)?;
        if argmax(&probs) == *class_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / img_embs.len().max(1) as f64)
}

/// Fraction of items whose argmax caption matches their class caption.
pub fn evaluate_zero_shot(
    model: &ModelParams,
    items: &[CorpusItem],
    captions: &[String],
    vocab: &Vocabulary,
) -> Result<f64, ModelError> {
    let caption_embs = embed_captions(model, captions, vocab)?;
    let mut img_embs = Vec::with_capacity(items.len());
    for item in items {
        img_embs.push((encode_image(&item.image, model)?, item.class_id));
    }
    zero_shot_accuracy(&img_embs, &caption_embs, model.config.temperature)
}

/// Embed every caption in class order.
pub fn embed_captions(
    model: &ModelParams,
    captions: &[String],
    vocab: &Vocabulary,
) -> Result<Vec<Embedding>, ModelError> {
    captions
        .iter()
        .map(|c| encode_text(&tokenize(c, vocab, model.config.max_text_len), model))
        .collect()
}
