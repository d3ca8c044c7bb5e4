//! Procedural image-caption corpus: simple colored shapes on a neutral
//! background, captioned "a {color} {shape}", with a whitespace tokenizer
//! over the resulting tiny vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::tensor::Tensor;

/// Reserved token id used for padding; masked out of attention and pooling.
pub const PAD_ID: u32 = 0;
/// Reserved token id for words outside the vocabulary.
pub const UNK_ID: u32 = 1;

const BACKGROUND: f32 = 0.5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("shape list must be non-empty")]
    NoShapes,
    #[error("color list must be non-empty")]
    NoColors,
    #[error("unknown shape name: {0}")]
    UnknownShape(String),
    #[error("unknown color name: {0}")]
    UnknownColor(String),
    #[error("per_class must be positive")]
    EmptyClass,
    #[error("holdout_per_class ({holdout}) must be smaller than per_class ({per_class})")]
    HoldoutTooLarge { holdout: usize, per_class: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

impl FromStr for Shape {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, CorpusError> {
        match s {
            "circle" => Ok(Shape::Circle),
            "square" => Ok(Shape::Square),
            "triangle" => Ok(Shape::Triangle),
            "cross" => Ok(Shape::Cross),
            other => Err(CorpusError::UnknownShape(other.to_string())),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed named palette the corpus draws from.
pub const PALETTE: &[(&str, [f32; 3])] = &[
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.60, 0.20, 0.70]),
    ("orange", [0.95, 0.55, 0.10]),
];

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, rgb)| *rgb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    HeldOut,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::HeldOut => f.write_str("heldout"),
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" => Ok(Split::HeldOut),
            other => Err(format!("unknown split: {other}")),
        }
    }
}

/// One image-caption pair.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub image: Tensor,
    pub caption: String,
    pub class_id: usize,
    pub split: Split,
}

/// What to generate: the class grid, counts, and determinism seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub per_class: usize,
    pub holdout_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            shapes: vec!["circle".into(), "square".into(), "triangle".into(), "cross".into()],
            colors: vec!["red".into(), "green".into(), "blue".into(), "yellow".into()],
            per_class: 50,
            holdout_per_class: 10,
            image_size: 32,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    /// Caption for each class id, in class order.
    pub fn class_captions(&self) -> Result<Vec<String>, CorpusError> {
        let shapes = self.parsed_shapes()?;
        let mut captions = Vec::new();
        for shape in &shapes {
            for color in &self.colors {
                if color_rgb(color).is_none() {
                    return Err(CorpusError::UnknownColor(color.clone()));
                }
                captions.push(format!("a {color} {shape}"));
            }
        }
        Ok(captions)
    }

    fn parsed_shapes(&self) -> Result<Vec<Shape>, CorpusError> {
        if self.shapes.is_empty() {
            return Err(CorpusError::NoShapes);
        }
        if self.colors.is_empty() {
            return Err(CorpusError::NoColors);
        }
        self.shapes.iter().map(|s| s.parse()).collect()
    }
}

/// Render one shape instance. Edges are smoothed over roughly one pixel so
/// nearby placements produce distinct pixels.
pub fn render_shape(shape: Shape, rgb: [f32; 3], size: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f32;
    let cx = rng.random_range(0.38 * s..0.62 * s);
    let cy = rng.random_range(0.38 * s..0.62 * s);
    let r = rng.random_range(0.19 * s..0.30 * s);

    let mut data = vec![BACKGROUND; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            // Signed inside-distance in pixels; positive inside the shape.
            let sd = match shape {
                Shape::Circle => r - (dx * dx + dy * dy).sqrt(),
                Shape::Square => r * 0.9 - dx.abs().max(dy.abs()),
                Shape::Triangle => triangle_sd(dx, dy, r),
                Shape::Cross => {
                    let arm = 0.38 * r;
                    let horiz = (r - dx.abs()).min(arm - dy.abs());
                    let vert = (arm - dx.abs()).min(r - dy.abs());
                    horiz.max(vert)
                }
            };
            let coverage = (sd + 0.5).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let base = (y * size + x) * 3;
                for c in 0..3 {
                    data[base + c] = BACKGROUND + (rgb[c] - BACKGROUND) * coverage;
                }
            }
        }
    }
    Tensor::from_vec(&[size, size, 3], data)
}

/// Inside-distance for an upward-pointing triangle with circumradius ~r.
fn triangle_sd(dx: f32, dy: f32, r: f32) -> f32 {
    // Vertices: top (0, -r), bottom corners (±0.9r, 0.72r).
    let verts = [(0.0, -r), (0.9 * r, 0.72 * r), (-0.9 * r, 0.72 * r)];
    let mut sd = f32::INFINITY;
    for i in 0..3 {
        let (x1, y1) = verts[i];
        let (x2, y2) = verts[(i + 1) % 3];
        // Distance to the edge line, signed positive on the interior side.
        let ex = x2 - x1;
        let ey = y2 - y1;
        let len = (ex * ex + ey * ey).sqrt();
        let cross = ex * (dy - y1) - ey * (dx - x1);
        sd = sd.min(cross / len);
    }
    sd
}

/// Generate the full corpus: |shapes|·|colors| classes with `per_class`
/// items each, the last `holdout_per_class` of which land in the held-out
/// split. Byte-identical output for a given spec: every item draws from its
/// own counter-derived stream.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusItem>, CorpusError> {
    let shapes = spec.parsed_shapes()?;
    if spec.per_class == 0 {
        return Err(CorpusError::EmptyClass);
    }
    if spec.holdout_per_class >= spec.per_class {
        return Err(CorpusError::HoldoutTooLarge {
            holdout: spec.holdout_per_class,
            per_class: spec.per_class,
        });
    }
    let mut colors = Vec::new();
    for name in &spec.colors {
        match color_rgb(name) {
            Some(rgb) => colors.push((name.clone(), rgb)),
            None => return Err(CorpusError::UnknownColor(name.clone())),
        }
    }

    let mut items = Vec::with_capacity(shapes.len() * colors.len() * spec.per_class);
    let mut index = 0u64;
    for (si, shape) in shapes.iter().enumerate() {
        for (ci, (color_name, rgb)) in colors.iter().enumerate() {
            let class_id = si * colors.len() + ci;
            let caption = format!("a {color_name} {shape}");
            for n in 0..spec.per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(index);
                index += 1;
                let image = render_shape(*shape, *rgb, spec.image_size, &mut rng);
                let split = if n < spec.per_class - spec.holdout_per_class {
                    Split::Train
                } else {
                    Split::HeldOut
                };
                items.push(CorpusItem {
                    image,
                    caption: caption.clone(),
                    class_id,
                    split,
                });
            }
        }
    }
    Ok(items)
}

// ── Vocabulary and tokenizer ───────────────────────────────────────────

/// Token-to-id map with reserved pad and unknown entries. Ids are assigned
/// in first-appearance order over the caption set, so a given corpus spec
/// always produces the same vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_by_token: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut vocab = Vocabulary::reserved();
        for caption in captions {
            for word in caption.to_lowercase().split_whitespace() {
                if !vocab.id_by_token.contains_key(word) {
                    vocab.push(word.to_string());
                }
            }
        }
        vocab
    }

    fn reserved() -> Vocabulary {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            id_by_token: HashMap::new(),
        };
        vocab.push("<pad>".to_string());
        vocab.push("<unk>".to_string());
        vocab
    }

    /// Rebuild from a stored token list (checkpoint load).
    pub fn from_token_list(tokens: Vec<String>) -> Vocabulary {
        let id_by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, id_by_token }
    }

    fn push(&mut self, token: String) {
        self.id_by_token.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_by_token.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id-ordered token list, the serialized form.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lowercase whitespace tokenization, unknown words mapped to [`UNK_ID`],
/// padded or truncated to exactly `max_len` ids.
pub fn tokenize(caption: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = caption
        .to_lowercase()
        .split_whitespace()
        .take(max_len)
        .map(|w| vocab.id(w).unwrap_or(UNK_ID))
        .collect();
    ids.resize(max_len, PAD_ID);
    ids
}
