//! The two-tower joint model: a vision transformer and a text transformer
//! mapping into one shared, unit-normalized embedding space, plus the
//! zero-shot classifier over that space.
//!
//! Forward passes are built on a [`Graph`] even when no gradient is wanted;
//! there is exactly one code path for inference, training, and the attack.

use thiserror::Error;

use crate::corpus::PAD_ID;
use crate::graph::{Graph, Var};
use crate::model::{BlockParams, ModelConfig, ModelParams};
use crate::tensor::{Tensor, TensorError};

/// Bias added to masked attention logits. exp(-1e4) underflows to exactly
/// zero in f32, so padded keys get weight 0 and padding cannot leak.
const MASK_BIAS: f32 = -1.0e4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image shape {got:?} does not match expected {expected:?}")]
    ImageShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("image size {size} is not divisible by patch size {patch}")]
    PatchConfig { size: usize, patch: usize },
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    UnknownToken { id: u32, vocab: usize },
    #[error("text of {len} tokens exceeds the maximum length {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("cannot normalize a zero-magnitude embedding")]
    DegenerateEmbedding,
    #[error("zero-shot classification needs at least one candidate")]
    NoCandidates,
    #[error("temperature must be positive, got {0}")]
    Temperature(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Unit-norm vector in the shared embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Normalize an arbitrary vector; errors on (near-)zero magnitude.
    pub fn from_unnormalized(v: &[f32]) -> Result<Self, ModelError> {
        let norm = crate::linalg::l2_norm_f64(v);
        if norm < 1e-30 {
            return Err(ModelError::DegenerateEmbedding);
        }
        Ok(Embedding(v.iter().map(|&x| (x as f64 / norm) as f32).collect()))
    }

    /// Wrap a vector the graph already normalized.
    pub(crate) fn from_unit_vec(v: Vec<f32>) -> Self {
        debug_assert!((crate::linalg::l2_norm_f64(&v) - 1.0).abs() < 1e-4);
        Embedding(v)
    }

    pub fn cosine(&self, other: &Embedding) -> f32 {
        crate::linalg::dot_f64(&self.0, &other.0) as f32
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f32 {
        crate::linalg::l2_norm_f64(&self.0) as f32
    }
}

/// v/‖v‖₂ as an [`Embedding`]; the zero vector is rejected.
pub fn normalize_embedding(v: &[f32]) -> Result<Embedding, ModelError> {
    Embedding::from_unnormalized(v)
}

// ── Patch extraction ───────────────────────────────────────────────────

/// Flat index map realizing patch extraction: output position i of the
/// patchified [(S/p)² × 3p²] matrix reads image scalar `map[i]`. Patches are
/// raster-ordered and each patch flattens its p×p×3 block row-major.
pub(crate) fn patch_index_map(size: usize, patch: usize) -> Vec<usize> {
    let side = size / patch;
    let mut map = Vec::with_capacity(size * size * 3);
    for py in 0..side {
        for px in 0..side {
            for dy in 0..patch {
                for dx in 0..patch {
                    for c in 0..3 {
                        let y = py * patch + dy;
                        let x = px * patch + dx;
                        map.push((y * size + x) * 3 + c);
                    }
                }
            }
        }
    }
    map
}

/// Split an S×S×3 image into non-overlapping flattened patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor, ModelError> {
    let shape = image.shape();
    let [s, s2, c] = shape[..] else {
        return Err(ModelError::ImageShape {
            expected: vec![0, 0, 3],
            got: shape.to_vec(),
        });
    };
    if s != s2 || c != 3 {
        return Err(ModelError::ImageShape {
            expected: vec![s, s, 3],
            got: shape.to_vec(),
        });
    }
    if patch == 0 || s % patch != 0 {
        return Err(ModelError::PatchConfig { size: s, patch });
    }
    let map = patch_index_map(s, patch);
    let side = s / patch;
    let data: Vec<f32> = map.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::from_vec(&[side * side, 3 * patch * patch], data))
}

// ── Graph-side parameter handles ───────────────────────────────────────

pub(crate) struct BlockVars {
    w_q: Vec<Var>,
    w_k: Vec<Var>,
    w_v: Vec<Var>,
    w_c: Vec<Var>,
    ln1_gamma: Var,
    ln1_beta: Var,
    ff_w1: Var,
    ff_b1: Var,
    ff_w2: Var,
    ff_b2: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
}

pub(crate) struct VisionVars {
    patch_weight: Var,
    patch_bias: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    proj_weight: Var,
    proj_bias: Var,
}

pub(crate) struct TextVars {
    token_table: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    proj_weight: Var,
    proj_bias: Var,
}

/// All model weights registered on one graph, with the dotted names used by
/// [`ModelParams::named_params`] so optimizer updates key off names.
pub(crate) struct ModelVars {
    pub vision: VisionVars,
    pub text: TextVars,
    pub named: Vec<(String, Var)>,
}

fn register_tensor(
    g: &mut Graph,
    named: &mut Vec<(String, Var)>,
    name: String,
    t: &Tensor,
    trainable: bool,
) -> Var {
    let mut copy = t.clone();
    copy.requires_grad = trainable;
    copy.grad = None;
    let var = g.leaf(copy);
    named.push((name, var));
    var
}

fn register_block(
    g: &mut Graph,
    named: &mut Vec<(String, Var)>,
    prefix: &str,
    b: &BlockParams,
    trainable: bool,
) -> BlockVars {
    let reg = |named: &mut Vec<(String, Var)>, g: &mut Graph, name: String, t: &Tensor| {
        register_tensor(g, named, name, t, trainable)
    };
    BlockVars {
        w_q: (0..b.attn.heads)
            .map(|h| reg(named, g, format!("{prefix}.attn.wq{h}"), &b.attn.w_q[h]))
            .collect(),
        w_k: (0..b.attn.heads)
            .map(|h| reg(named, g, format!("{prefix}.attn.wk{h}"), &b.attn.w_k[h]))
            .collect(),
        w_v: (0..b.attn.heads)
            .map(|h| reg(named, g, format!("{prefix}.attn.wv{h}"), &b.attn.w_v[h]))
            .collect(),
        w_c: (0..b.attn.heads)
            .map(|h| reg(named, g, format!("{prefix}.attn.wc{h}"), &b.attn.w_c[h]))
            .collect(),
        ln1_gamma: reg(named, g, format!("{prefix}.ln1.gamma"), &b.ln1_gamma),
        ln1_beta: reg(named, g, format!("{prefix}.ln1.beta"), &b.ln1_beta),
        ff_w1: reg(named, g, format!("{prefix}.ff.w1"), &b.ff_w1),
        ff_b1: reg(named, g, format!("{prefix}.ff.b1"), &b.ff_b1),
        ff_w2: reg(named, g, format!("{prefix}.ff.w2"), &b.ff_w2),
        ff_b2: reg(named, g, format!("{prefix}.ff.b2"), &b.ff_b2),
        ln2_gamma: reg(named, g, format!("{prefix}.ln2.gamma"), &b.ln2_gamma),
        ln2_beta: reg(named, g, format!("{prefix}.ln2.beta"), &b.ln2_beta),
    }
}

/// Copy every model weight onto the graph as a leaf. With `trainable` the
/// leaves collect gradients during backward.
pub(crate) fn register_model(g: &mut Graph, params: &ModelParams, trainable: bool) -> ModelVars {
    let mut named = Vec::new();
    let v = &params.vision;
    let vision = VisionVars {
        patch_weight: register_tensor(g, &mut named, "vision.patch_weight".into(), &v.patch_weight, trainable),
        patch_bias: register_tensor(g, &mut named, "vision.patch_bias".into(), &v.patch_bias, trainable),
        pos: register_tensor(g, &mut named, "vision.pos".into(), &v.pos, trainable),
        blocks: v
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| register_block(g, &mut named, &format!("vision.block{i}"), b, trainable))
            .collect(),
        proj_weight: register_tensor(g, &mut named, "vision.proj_weight".into(), &v.proj_weight, trainable),
        proj_bias: register_tensor(g, &mut named, "vision.proj_bias".into(), &v.proj_bias, trainable),
    };
    let t = &params.text;
    let text = TextVars {
        token_table: register_tensor(g, &mut named, "text.token_table".into(), &t.token_table, trainable),
        pos: register_tensor(g, &mut named, "text.pos".into(), &t.pos, trainable),
        blocks: t
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| register_block(g, &mut named, &format!("text.block{i}"), b, trainable))
            .collect(),
        proj_weight: register_tensor(g, &mut named, "text.proj_weight".into(), &t.proj_weight, trainable),
        proj_bias: register_tensor(g, &mut named, "text.proj_bias".into(), &t.proj_bias, trainable),
    };
    ModelVars { vision, text, named }
}

// ── Forward builders ───────────────────────────────────────────────────

/// Multi-head self-attention: α_{i,j} = softmax_j(⟨Q(x_i),K(x_j)⟩/√k),
/// heads mixed through their output matrices and summed. Returns the block
/// output together with each head's attention weight matrix.
fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    mask_bias: Option<Var>,
) -> Result<(Var, Vec<Var>), ModelError> {
    let head_dim = g.value(block.w_q[0]).shape()[1];
    let scale = 1.0 / (head_dim as f32).sqrt();
    let mut combined: Option<Var> = None;
    let mut weights = Vec::with_capacity(block.w_q.len());
    for h in 0..block.w_q.len() {
        let q = g.matmul(x, block.w_q[h])?;
        let k = g.matmul(x, block.w_k[h])?;
        let v = g.matmul(x, block.w_v[h])?;
        let scores = g.matmul_transpose_b(q, k)?;
        let mut scores = g.scale(scores, scale);
        if let Some(mask) = mask_bias {
            scores = g.add_row_vector(scores, mask)?;
        }
        let alpha = g.softmax_rows(scores)?;
        weights.push(alpha);
        let ctx = g.matmul(alpha, v)?;
        let head_out = g.matmul(ctx, block.w_c[h])?;
        combined = Some(match combined {
            Some(acc) => g.add(acc, head_out)?,
            None => head_out,
        });
    }
    Ok((combined.expect("at least one head"), weights))
}

/// Attention → residual + LN → ReLU MLP → residual + LN.
fn transformer_block(
    g: &mut Graph,
    x: Var,
    block: &BlockVars,
    mask_bias: Option<Var>,
    eps: f32,
) -> Result<(Var, Vec<Var>), ModelError> {
    let (attn_out, weights) = multi_head_attention(g, x, block, mask_bias)?;
    let residual = g.add(x, attn_out)?;
    let u = g.layer_norm(residual, block.ln1_gamma, block.ln1_beta, eps)?;
    let hidden = g.matmul(u, block.ff_w1)?;
    let hidden = g.add_row_vector(hidden, block.ff_b1)?;
    let hidden = g.relu(hidden);
    let ff = g.matmul(hidden, block.ff_w2)?;
    let ff = g.add_row_vector(ff, block.ff_b2)?;
    let residual2 = g.add(u, ff)?;
    let z = g.layer_norm(residual2, block.ln2_gamma, block.ln2_beta, eps)?;
    Ok((z, weights))
}

/// Vision tower on an image leaf already registered with the graph:
/// patchify → positional embeddings → blocks → mean-pool → project →
/// normalize. Returns the unit-norm [1×e] embedding node.
pub(crate) fn vision_forward(
    g: &mut Graph,
    vars: &VisionVars,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Var, ModelError> {
    let map = patch_index_map(cfg.image_size, cfg.patch_size);
    let patches = g.gather(image, &map, &[cfg.num_patches(), cfg.patch_dim()])?;
    let tokens = g.matmul(patches, vars.patch_weight)?;
    let tokens = g.add_row_vector(tokens, vars.patch_bias)?;
    let mut state = g.add(tokens, vars.pos)?;
    for block in &vars.blocks {
        let (z, _) = transformer_block(g, state, block, None, cfg.layer_norm_eps)?;
        state = z;
    }
    let pooled = g.mean_rows(state)?;
    let proj = g.matmul(pooled, vars.proj_weight)?;
    let proj = g.add_row_vector(proj, vars.proj_bias)?;
    let unit = g.normalize(proj).map_err(|e| match e {
        TensorError::ZeroNorm => ModelError::DegenerateEmbedding,
        other => ModelError::Tensor(other),
    })?;
    Ok(unit)
}

/// Text tower on a padded id sequence. Padded positions are masked out of
/// both attention and pooling, so the embedding is independent of how much
/// padding follows the tokens.
pub(crate) fn text_forward(
    g: &mut Graph,
    vars: &TextVars,
    cfg: &ModelConfig,
    padded_ids: &[u32],
) -> Result<Var, ModelError> {
    debug_assert_eq!(padded_ids.len(), cfg.max_text_len);
    let ids: Vec<usize> = padded_ids.iter().map(|&id| id as usize).collect();
    let tokens = g.lookup_rows(vars.token_table, &ids)?;
    let mut state = g.add(tokens, vars.pos)?;

    let mask: Vec<f32> = padded_ids
        .iter()
        .map(|&id| if id == PAD_ID { MASK_BIAS } else { 0.0 })
        .collect();
    let valid = mask.iter().filter(|&&m| m == 0.0).count();
    let mask_bias = if valid == padded_ids.len() {
        None
    } else {
        Some(g.constant(Tensor::from_vec(&[padded_ids.len()], mask.clone())))
    };

    for block in &vars.blocks {
        let (z, _) = transformer_block(g, state, block, mask_bias, cfg.layer_norm_eps)?;
        state = z;
    }

    let pool_weights: Vec<f32> = mask
        .iter()
        .map(|&m| if m == 0.0 && valid > 0 { 1.0 / valid as f32 } else { 0.0 })
        .collect();
    let pooled = g.weighted_row_sum(state, &pool_weights)?;
    let proj = g.matmul(pooled, vars.proj_weight)?;
    let proj = g.add_row_vector(proj, vars.proj_bias)?;
    let unit = g.normalize(proj).map_err(|e| match e {
        TensorError::ZeroNorm => ModelError::DegenerateEmbedding,
        other => ModelError::Tensor(other),
    })?;
    Ok(unit)
}

/// Pad or reject a token sequence against the configured maximum length,
/// and check every id against the vocabulary.
pub(crate) fn pad_ids(tokens: &[u32], cfg: &ModelConfig, vocab: usize) -> Result<Vec<u32>, ModelError> {
    if tokens.len() > cfg.max_text_len {
        return Err(ModelError::TextTooLong {
            len: tokens.len(),
            max: cfg.max_text_len,
        });
    }
    for &id in tokens {
        if id as usize >= vocab {
            return Err(ModelError::UnknownToken { id, vocab });
        }
    }
    let mut padded = tokens.to_vec();
    padded.resize(cfg.max_text_len, PAD_ID);
    Ok(padded)
}

// ── Public operations ──────────────────────────────────────────────────

/// f_I: encode an S×S×3 image into the shared space.
pub fn encode_image(image: &Tensor, params: &ModelParams) -> Result<Embedding, ModelError> {
    if image.shape() != params.config.image_shape() {
        return Err(ModelError::ImageShape {
            expected: params.config.image_shape().to_vec(),
            got: image.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let vars = register_model(&mut g, params, false);
    let image_var = g.constant(image.clone());
    let emb = vision_forward(&mut g, &vars.vision, &params.config, image_var)?;
    Ok(Embedding::from_unit_vec(g.value(emb).data().to_vec()))
}

/// f_T: encode a token sequence (at most `max_text_len` ids) into the
/// shared space.
pub fn encode_text(tokens: &[u32], params: &ModelParams) -> Result<Embedding, ModelError> {
    let padded = pad_ids(tokens, &params.config, params.vocab_size())?;
    let mut g = Graph::new();
    let vars = register_model(&mut g, params, false);
    let emb = text_forward(&mut g, &vars.text, &params.config, &padded)?;
    Ok(Embedding::from_unit_vec(g.value(emb).data().to_vec()))
}

/// One transformer block applied to raw token features; exposed for
/// inspection of the block contract outside a full tower.
pub fn attention_block(x: &Tensor, block: &BlockParams, eps: f32) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let mut named = Vec::new();
    let vars = register_block(&mut g, &mut named, "block", block, false);
    let x_var = g.constant(x.clone());
    let (z, _) = transformer_block(&mut g, x_var, &vars, None, eps)?;
    Ok(g.value(z).clone())
}

/// Softmax over temperature-scaled image-text dot products: the probability
/// that the image belongs with each candidate text.
pub fn zero_shot_classify(
    img_emb: &Embedding,
    text_embs: &[Embedding],
    temperature: f32,
) -> Result<Vec<f32>, ModelError> {
    if text_embs.is_empty() {
        return Err(ModelError::NoCandidates);
    }
    if temperature <= 0.0 {
        return Err(ModelError::Temperature(temperature));
    }
    let logits: Vec<f64> = text_embs
        .iter()
        .map(|t| crate::linalg::dot_f64(img_emb.as_slice(), t.as_slice()) / temperature as f64)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// Index of the largest probability; ties break to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classify an image against candidate caption embeddings and return the
/// winning index.
pub fn classify_image(
    image: &Tensor,
    caption_embs: &[Embedding],
    params: &ModelParams,
) -> Result<usize, ModelError> {
    let emb = encode_image(image, params)?;
    let probs = zero_shot_classify(&emb, caption_embs, params.config.temperature)?;
    Ok(argmax(&probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{finite_diff_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            vision_dim: 16,
            text_dim: 16,
            embed_dim: 8,
            heads: 2,
            head_dim: 8,
            vision_blocks: 2,
            text_blocks: 2,
            ff_dim: 24,
            max_text_len: 6,
            ..ModelConfig::default()
        }
    }

    fn toy_model(seed: u64) -> ModelParams {
        ModelParams::init(toy_config(), 12, seed).unwrap()
    }

    fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_size * cfg.image_size * 3;
        let data = (0..n).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        Tensor::from_vec(&[cfg.image_size, cfg.image_size, 3], data)
    }

    #[test]
    fn patchify_single_patch_is_flat_image() {
        let data: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let img = Tensor::from_vec(&[4, 4, 3], data.clone());
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[1, 48]);
        assert_eq!(p.data(), &data[..]);
    }

    #[test]
    fn patchify_counting_image_hand_indexed() {
        // 4×4 image, 2×2 patches, values 0..47 in raster order.
        let data: Vec<f32> = (0..48).map(|v| v as f32).collect();
        let img = Tensor::from_vec(&[4, 4, 3], data);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // Patch 0 is the top-left 2×2×3 block: pixels (0,0),(0,1),(1,0),(1,1).
        let expected = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0];
        assert_eq!(&p.data()[..12], &expected);
    }

    #[test]
    fn patchify_round_trips_through_index_map() {
        let cfg = toy_config();
        let img = random_image(&cfg, 3);
        let p = patchify(&img, cfg.patch_size).unwrap();
        let map = patch_index_map(cfg.image_size, cfg.patch_size);
        let mut rebuilt = vec![0.0f32; img.numel()];
        for (patch_pos, &img_pos) in map.iter().enumerate() {
            rebuilt[img_pos] = p.data()[patch_pos];
        }
        assert_eq!(&rebuilt[..], img.data());
    }

    #[test]
    fn patchify_indivisible_size_errors() {
        let img = Tensor::zeros(&[4, 4, 3]);
        assert!(matches!(
            patchify(&img, 3),
            Err(ModelError::PatchConfig { .. })
        ));
    }

    #[test]
    fn image_embedding_has_unit_norm_and_is_deterministic() {
        let model = toy_model(1);
        let img = random_image(&model.config, 7);
        let a = encode_image(&img, &model).unwrap();
        let b = encode_image(&img, &model).unwrap();
        assert!((a.norm() - 1.0).abs() < 1e-5);
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn wrong_image_size_is_a_configuration_error() {
        let model = toy_model(1);
        let img = Tensor::zeros(&[16, 16, 3]);
        assert!(matches!(
            encode_image(&img, &model),
            Err(ModelError::ImageShape { .. })
        ));
    }

    #[test]
    fn text_embedding_has_unit_norm() {
        let model = toy_model(2);
        let emb = encode_text(&[2, 5, 7], &model).unwrap();
        assert!((emb.norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn text_padding_is_invariant() {
        let model = toy_model(2);
        let short = encode_text(&[2, 5, 7], &model).unwrap();
        let padded = encode_text(&[2, 5, 7, PAD_ID, PAD_ID], &model).unwrap();
        for (a, b) in short.as_slice().iter().zip(padded.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn unknown_token_id_is_a_vocabulary_error() {
        let model = toy_model(2);
        assert!(matches!(
            encode_text(&[2, 99], &model),
            Err(ModelError::UnknownToken { id: 99, .. })
        ));
    }

    #[test]
    fn overlong_text_errors() {
        let model = toy_model(2);
        let ids = vec![2u32; model.config.max_text_len + 1];
        assert!(matches!(
            encode_text(&ids, &model),
            Err(ModelError::TextTooLong { .. })
        ));
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let model = toy_model(3);
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[5, cfg.vision_dim], 1.0, &mut rng);

        let mut g = Graph::new();
        let mut named = Vec::new();
        let vars = register_block(&mut g, &mut named, "b", &model.vision.blocks[0], false);
        let x_var = g.constant(x);
        let (_, weights) = multi_head_attention(&mut g, x_var, &vars, None).unwrap();
        for alpha in weights {
            for row in g.value(alpha).data().chunks_exact(5) {
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_block_is_permutation_equivariant() {
        let model = toy_model(4);
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 6;
        let x = Tensor::randn(&[n, cfg.vision_dim], 1.0, &mut rng);
        let out = attention_block(&x, &model.vision.blocks[0], cfg.layer_norm_eps).unwrap();

        // Reverse the token order and compare row-by-row.
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(&x.data()[i * cfg.vision_dim..(i + 1) * cfg.vision_dim]);
        }
        let px = Tensor::from_vec(&[n, cfg.vision_dim], permuted);
        let pout = attention_block(&px, &model.vision.blocks[0], cfg.layer_norm_eps).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            let orig = &out.data()[i * cfg.vision_dim..(i + 1) * cfg.vision_dim];
            let perm_row = &pout.data()[j * cfg.vision_dim..(j + 1) * cfg.vision_dim];
            for (a, b) in orig.iter().zip(perm_row) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let model = toy_model(5);
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[1, cfg.vision_dim], 1.0, &mut rng);
        let mut g = Graph::new();
        let mut named = Vec::new();
        let vars = register_block(&mut g, &mut named, "b", &model.vision.blocks[0], false);
        let x_var = g.constant(x.clone());
        let (_, weights) = multi_head_attention(&mut g, x_var, &vars, None).unwrap();
        for alpha in weights {
            assert_eq!(g.value(alpha).data(), &[1.0]);
        }
        // Output is well-defined for the degenerate case.
        let out = attention_block(&x, &model.vision.blocks[0], cfg.layer_norm_eps).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn zero_shot_single_candidate_is_certain() {
        let e = Embedding::from_unnormalized(&[1.0, 0.0]).unwrap();
        let probs = zero_shot_classify(&e, &[e.clone()], 0.07).unwrap();
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn zero_shot_equal_candidates_are_uniform() {
        let e = Embedding::from_unnormalized(&[0.6, 0.8]).unwrap();
        let cands = vec![e.clone(), e.clone(), e.clone(), e.clone()];
        let probs = zero_shot_classify(&e, &cands, 0.07).unwrap();
        for p in probs {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_shot_empty_candidates_error() {
        let e = Embedding::from_unnormalized(&[1.0]).unwrap();
        assert!(matches!(
            zero_shot_classify(&e, &[], 0.07),
            Err(ModelError::NoCandidates)
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn normalize_embedding_hand_case_and_invariances() {
        let e = normalize_embedding(&[3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-6);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-6);

        // Idempotence and positive-scale invariance.
        let again = normalize_embedding(e.as_slice()).unwrap();
        assert_eq!(again.as_slice(), e.as_slice());
        let scaled = normalize_embedding(&[30.0, 40.0]).unwrap();
        for (a, b) in scaled.as_slice().iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(matches!(
            normalize_embedding(&[0.0, 0.0]),
            Err(ModelError::DegenerateEmbedding)
        ));
    }

    #[test]
    fn encode_image_gradient_matches_finite_differences() {
        let model = toy_model(6);
        let cfg = model.config.clone();
        let img = random_image(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let target = {
            let raw = Tensor::randn(&[cfg.embed_dim], 1.0, &mut rng);
            Embedding::from_unnormalized(raw.data()).unwrap()
        };

        // ½‖f_I(x) − t‖² via the graph.
        let loss_at = |image: &Tensor| -> f64 {
            let mut g = Graph::new();
            let vars = register_model(&mut g, &model, false);
            let x = g.constant(image.clone());
            let emb = vision_forward(&mut g, &vars.vision, &cfg, x).unwrap();
            let t = g.constant(Tensor::from_vec(&[1, cfg.embed_dim], target.as_slice().to_vec()));
            let d = g.sub(emb, t).unwrap();
            let sq = g.dot(d, d).unwrap();
            let loss = g.scale(sq, 0.5);
            g.value(loss).item() as f64
        };

        let mut g = Graph::new();
        let vars = register_model(&mut g, &model, false);
        let x = g.leaf(img.clone().with_grad());
        let emb = vision_forward(&mut g, &vars.vision, &cfg, x).unwrap();
        let t = g.constant(Tensor::from_vec(&[1, cfg.embed_dim], target.as_slice().to_vec()));
        let d = g.sub(emb, t).unwrap();
        let sq = g.dot(d, d).unwrap();
        let loss = g.scale(sq, 0.5);
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();

        // Ten random pixels, matching the contract for deep 32-bit chains.
        let mut pick = ChaCha8Rng::seed_from_u64(17);
        let numeric = finite_diff_gradient(loss_at, &img, 1e-2);
        for _ in 0..10 {
            let i = rand::Rng::random_range(&mut pick, 0..img.numel());
            let err = max_relative_error(&analytic[i..=i], &numeric.data()[i..=i], 1e-2);
            assert!(err < 1e-2, "pixel {i}: analytic {} vs fd {}", analytic[i], numeric.data()[i]);
        }
    }

    #[test]
    fn gradient_is_nonvanishing_at_mismatch() {
        let model = toy_model(7);
        let cfg = model.config.clone();
        let img = random_image(&cfg, 19);
        let emb = encode_image(&img, &model).unwrap();
        // Build a target well away from the current embedding.
        let mut flipped: Vec<f32> = emb.as_slice().iter().map(|v| -v).collect();
        flipped[0] += 0.1;
        let target = Embedding::from_unnormalized(&flipped).unwrap();
        assert!(emb.cosine(&target) < 0.99);

        let mut g = Graph::new();
        let vars = register_model(&mut g, &model, false);
        let x = g.leaf(img.with_grad());
        let e = vision_forward(&mut g, &vars.vision, &cfg, x).unwrap();
        let t = g.constant(Tensor::from_vec(&[1, cfg.embed_dim], target.as_slice().to_vec()));
        let d = g.sub(e, t).unwrap();
        let sq = g.dot(d, d).unwrap();
        let loss = g.scale(sq, 0.5);
        g.backward(loss).unwrap();
        let norm: f32 = g.grad(x).unwrap().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm > 0.0, "gradient vanished at cosine {}", emb.cosine(&target));
    }
}
