//! Parameter containers for the two-tower encoder and their initialization.
//!
//! `ModelParams` is immutable once training finishes; encode and classify
//! operations only ever read it, so it can be shared across worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelError;
use crate::tensor::Tensor;

/// Dimensions and constants of the toy model. Every field is configurable;
/// the defaults train in minutes on a desktop CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square image edge length S (images are S×S×3).
    pub image_size: usize,
    /// Patch edge length p; S must be divisible by p.
    pub patch_size: usize,
    /// Vision token width d.
    pub vision_dim: usize,
    /// Text token width d_t.
    pub text_dim: usize,
    /// Shared embedding dimension e.
    pub embed_dim: usize,
    /// Attention head count H.
    pub heads: usize,
    /// Per-head width k.
    pub head_dim: usize,
    /// Vision tower depth L_v.
    pub vision_blocks: usize,
    /// Text tower depth L_t.
    pub text_blocks: usize,
    /// Feed-forward hidden width m.
    pub ff_dim: usize,
    /// Maximum text length in tokens (shorter sequences are padded).
    pub max_text_len: usize,
    /// Softmax temperature for zero-shot classification.
    pub temperature: f32,
    /// Layer-norm stabilizer.
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            vision_dim: 64,
            text_dim: 64,
            embed_dim: 32,
            heads: 4,
            head_dim: 16,
            vision_blocks: 3,
            text_blocks: 2,
            ff_dim: 128,
            max_text_len: 8,
            temperature: 0.07,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::PatchConfig {
                size: self.image_size,
                patch: self.patch_size,
            });
        }
        for (name, v) in [
            ("image_size", self.image_size),
            ("vision_dim", self.vision_dim),
            ("text_dim", self.text_dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("vision_blocks", self.vision_blocks),
            ("text_blocks", self.text_blocks),
            ("ff_dim", self.ff_dim),
            ("max_text_len", self.max_text_len),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.temperature <= 0.0 {
            return Err(ModelError::Temperature(self.temperature));
        }
        Ok(())
    }

    /// Token count of the vision tower: (S/p)².
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch width: 3p².
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_size, self.image_size, 3]
    }
}

/// Per-head projection matrices of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    /// Query projections, one d×k matrix per head.
    pub w_q: Vec<Tensor>,
    /// Key projections.
    pub w_k: Vec<Tensor>,
    /// Value projections.
    pub w_v: Vec<Tensor>,
    /// Per-head output matrices, k×d each; head outputs are summed.
    pub w_c: Vec<Tensor>,
    pub heads: usize,
    pub head_dim: usize,
}

/// One transformer block: attention, two layer norms, and the ReLU MLP.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct VisionTower {
    /// Patch embedding, 3p²×d.
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// Learned additive positional embeddings, one row per patch.
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    /// Projection into the shared space, d×e.
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextTower {
    /// Token embedding table, V×d_t.
    pub token_table: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<BlockParams>,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

/// All weights of the two-tower encoder.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vision: VisionTower,
    pub text: TextTower,
}

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (rows + cols) as f32).sqrt();
    Tensor::randn(&[rows, cols], std, rng)
}

fn init_block<R: Rng>(dim: usize, cfg: &ModelConfig, rng: &mut R) -> BlockParams {
    let mut w_q = Vec::new();
    let mut w_k = Vec::new();
    let mut w_v = Vec::new();
    let mut w_c = Vec::new();
    for _ in 0..cfg.heads {
        w_q.push(xavier(dim, cfg.head_dim, rng));
        w_k.push(xavier(dim, cfg.head_dim, rng));
        w_v.push(xavier(dim, cfg.head_dim, rng));
        w_c.push(xavier(cfg.head_dim, dim, rng));
    }
    BlockParams {
        attn: AttentionParams {
            w_q,
            w_k,
            w_v,
            w_c,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
        },
        ln1_gamma: Tensor::filled(&[dim], 1.0),
        ln1_beta: Tensor::zeros(&[dim]),
        ff_w1: xavier(dim, cfg.ff_dim, rng),
        ff_b1: Tensor::zeros(&[cfg.ff_dim]),
        ff_w2: xavier(cfg.ff_dim, dim, rng),
        ff_b2: Tensor::zeros(&[dim]),
        ln2_gamma: Tensor::filled(&[dim], 1.0),
        ln2_beta: Tensor::zeros(&[dim]),
    }
}

impl ModelParams {
    /// Fresh random weights for the given configuration and vocabulary size.
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(ModelError::BadConfig("vocabulary must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patch_weight = xavier(config.patch_dim(), config.vision_dim, &mut rng);
        // Start the patch bias at −W·(0.5·ones): a mid-gray patch then maps
        // to the zero token, so the shared background does not swamp the
        // pooled embedding before training has moved anything.
        let mut patch_bias = vec![0.0f32; config.vision_dim];
        for row in patch_weight.data().chunks_exact(config.vision_dim) {
            for (b, &w) in patch_bias.iter_mut().zip(row) {
                *b -= 0.5 * w;
            }
        }
        let vision = VisionTower {
            patch_weight,
            patch_bias: Tensor::from_vec(&[config.vision_dim], patch_bias),
            pos: Tensor::randn(&[config.num_patches(), config.vision_dim], 0.02, &mut rng),
            blocks: (0..config.vision_blocks)
                .map(|_| init_block(config.vision_dim, &config, &mut rng))
                .collect(),
            proj_weight: xavier(config.vision_dim, config.embed_dim, &mut rng),
            proj_bias: Tensor::zeros(&[config.embed_dim]),
        };
        let text = TextTower {
            token_table: Tensor::randn(&[vocab_size, config.text_dim], 0.1, &mut rng),
            pos: Tensor::randn(&[config.max_text_len, config.text_dim], 0.02, &mut rng),
            blocks: (0..config.text_blocks)
                .map(|_| init_block(config.text_dim, &config, &mut rng))
                .collect(),
            proj_weight: xavier(config.text_dim, config.embed_dim, &mut rng),
            proj_bias: Tensor::zeros(&[config.embed_dim]),
        };
        Ok(ModelParams { config, vision, text })
    }

    pub fn vocab_size(&self) -> usize {
        self.text.token_table.shape()[0]
    }

    /// All parameters with stable dotted names, in a fixed traversal order.
    /// Checkpoints and the trainer both key off these names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("vision.patch_weight".into(), &self.vision.patch_weight));
        out.push(("vision.patch_bias".into(), &self.vision.patch_bias));
        out.push(("vision.pos".into(), &self.vision.pos));
        for (i, b) in self.vision.blocks.iter().enumerate() {
            push_block(&mut out, &format!("vision.block{i}"), b);
        }
        out.push(("vision.proj_weight".into(), &self.vision.proj_weight));
        out.push(("vision.proj_bias".into(), &self.vision.proj_bias));
        out.push(("text.token_table".into(), &self.text.token_table));
        out.push(("text.pos".into(), &self.text.pos));
        for (i, b) in self.text.blocks.iter().enumerate() {
            push_block(&mut out, &format!("text.block{i}"), b);
        }
        out.push(("text.proj_weight".into(), &self.text.proj_weight));
        out.push(("text.proj_bias".into(), &self.text.proj_bias));
        out
    }

    /// Mutable variant of [`ModelParams::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("vision.patch_weight".into(), &mut self.vision.patch_weight));
        out.push(("vision.patch_bias".into(), &mut self.vision.patch_bias));
        out.push(("vision.pos".into(), &mut self.vision.pos));
        for (i, b) in self.vision.blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("vision.block{i}"), b);
        }
        out.push(("vision.proj_weight".into(), &mut self.vision.proj_weight));
        out.push(("vision.proj_bias".into(), &mut self.vision.proj_bias));
        out.push(("text.token_table".into(), &mut self.text.token_table));
        out.push(("text.pos".into(), &mut self.text.pos));
        for (i, b) in self.text.blocks.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("text.block{i}"), b);
        }
        out.push(("text.proj_weight".into(), &mut self.text.proj_weight));
        out.push(("text.proj_bias".into(), &mut self.text.proj_bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }
}

fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a BlockParams) {
    for h in 0..b.attn.heads {
        out.push((format!("{prefix}.attn.wq{h}"), &b.attn.w_q[h]));
        out.push((format!("{prefix}.attn.wk{h}"), &b.attn.w_k[h]));
        out.push((format!("{prefix}.attn.wv{h}"), &b.attn.w_v[h]));
        out.push((format!("{prefix}.attn.wc{h}"), &b.attn.w_c[h]));
    }
    out.push((format!("{prefix}.ln1.gamma"), &b.ln1_gamma));
    out.push((format!("{prefix}.ln1.beta"), &b.ln1_beta));
    out.push((format!("{prefix}.ff.w1"), &b.ff_w1));
    out.push((format!("{prefix}.ff.b1"), &b.ff_b1));
    out.push((format!("{prefix}.ff.w2"), &b.ff_w2));
    out.push((format!("{prefix}.ff.b2"), &b.ff_b2));
    out.push((format!("{prefix}.ln2.gamma"), &b.ln2_gamma));
    out.push((format!("{prefix}.ln2.beta"), &b.ln2_beta));
}

fn push_block_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, b: &'a mut BlockParams) {
    for (h, (((wq, wk), wv), wc)) in b
        .attn
        .w_q
        .iter_mut()
        .zip(b.attn.w_k.iter_mut())
        .zip(b.attn.w_v.iter_mut())
        .zip(b.attn.w_c.iter_mut())
        .enumerate()
    {
        out.push((format!("{prefix}.attn.wq{h}"), wq));
        out.push((format!("{prefix}.attn.wk{h}"), wk));
        out.push((format!("{prefix}.attn.wv{h}"), wv));
        out.push((format!("{prefix}.attn.wc{h}"), wc));
    }
    out.push((format!("{prefix}.ln1.gamma"), &mut b.ln1_gamma));
    out.push((format!("{prefix}.ln1.beta"), &mut b.ln1_beta));
    out.push((format!("{prefix}.ff.w1"), &mut b.ff_w1));
    out.push((format!("{prefix}.ff.b1"), &mut b.ff_b1));
    out.push((format!("{prefix}.ff.w2"), &mut b.ff_w2));
    out.push((format!("{prefix}.ff.b2"), &mut b.ff_b2));
    out.push((format!("{prefix}.ln2.gamma"), &mut b.ln2_gamma));
    out.push((format!("{prefix}.ln2.beta"), &mut b.ln2_beta));
}
