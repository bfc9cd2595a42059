//! The joint-embedding network: modality tokenizers, 3D rotary positions,
//! an encoder that exposes several normalized depths, the level-fusion MLP
//! and a predictor with one output head per supervised level.

pub mod blocks;
mod encoder;
mod predictor;
pub mod rope;
mod tokenizer;

pub use blocks::{linear, transformer_block, BlockShape};
pub use encoder::{encode, fuse_levels, MultiLevelFeatures};
pub use predictor::predict;
pub use tokenizer::{patchify, tokenize, VisualInput};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParamStore, Real, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Video,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }
}

/// Integer patch coordinate `(t, h, w)`.
pub type Coord = [usize; 3];

/// Patch-grid geometry of one sample. Tokens are enumerated row-major with
/// `t` outermost, then `h`, then `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchGrid {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    /// Grid of an `height × width` image cut into `patch`-pixel squares.
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        Self::for_video(1, height, width, patch, 1)
    }

    pub fn for_video(frames: usize, height: usize, width: usize, patch: usize, tubelet: usize) -> Result<Self> {
        if patch == 0 || tubelet == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || !frames.is_multiple_of(tubelet) {
            return Err(Error::Geometry(format!(
                "{frames}x{height}x{width} is not divisible into {tubelet}x{patch}x{patch} tubelets"
            )));
        }
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Geometry("empty input".into()));
        }
        Ok(Self::new(frames / tubelet, height / patch, width / patch))
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: Coord) -> usize {
        (c[0] * self.h + c[1]) * self.w + c[2]
    }

    pub fn coord(&self, index: usize) -> Coord {
        let w = index % self.w;
        let h = (index / self.w) % self.h;
        let t = index / (self.w * self.h);
        [t, h, w]
    }

    pub fn coords(&self) -> Vec<Coord> {
        (0..self.len()).map(|i| self.coord(i)).collect()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub tubelet_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub predictor_depth: usize,
    pub predictor_dim: usize,
    pub predictor_heads: usize,
    /// 1-based encoder block indices whose outputs are exposed, strictly
    /// increasing and ending at `encoder_depth`.
    pub level_indices: Vec<usize>,
    /// Separate 2D/3D patch embeddings plus learnable modality embeddings.
    /// When off, images are repeated over a tubelet and share the 3D path.
    pub multimodal_tokenizer: bool,
    pub rope_base: f64,
    /// Hidden width of the fusion MLP; `None` means `K·D`.
    pub fusion_hidden: Option<usize>,
    /// Width of the predictor output heads; `None` means `embed_dim`.
    pub predictor_out_dim: Option<usize>,
    pub ln_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            tubelet_size: 2,
            channels: 3,
            embed_dim: 64,
            encoder_depth: 8,
            heads: 4,
            mlp_ratio: 4,
            predictor_depth: 4,
            predictor_dim: 48,
            predictor_heads: 4,
            level_indices: vec![2, 4, 6, 8],
            multimodal_tokenizer: true,
            rope_base: 100.0,
            fusion_hidden: None,
            predictor_out_dim: None,
            ln_eps: 1e-6,
            init_std: 0.02,
        }
    }
}

/// `count` evenly spaced block indices ending at `depth`.
pub fn evenly_spaced_levels(depth: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|k| (k * depth).div_ceil(count)).collect()
}

/// Per-axis rotary sub-dimensions `(t, h, w)` of a head: floor-even thirds,
/// remainder to the width axis.
pub fn rope_split(head_dim: usize) -> Result<[usize; 3]> {
    let third = (head_dim / 3) & !1;
    let rest = head_dim.saturating_sub(2 * third);
    if !head_dim.is_multiple_of(2) || third == 0 || !rest.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "head dimension {head_dim} cannot be split into three even rotary sub-dimensions"
        )));
    }
    Ok([third, third, rest])
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.level_indices.len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn predictor_head_dim(&self) -> usize {
        self.predictor_dim / self.predictor_heads
    }

    pub fn fusion_hidden(&self) -> usize {
        self.fusion_hidden.unwrap_or(self.levels() * self.embed_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.predictor_out_dim.unwrap_or(self.embed_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.level_indices.is_empty() {
            return bad("at least one level index is required".into());
        }
        if self.level_indices.windows(2).any(|w| w[0] >= w[1]) || self.level_indices[0] == 0 {
            return bad(format!("level indices {:?} must be strictly increasing and >= 1", self.level_indices));
        }
        if *self.level_indices.last().unwrap() != self.encoder_depth {
            return bad(format!(
                "last level index must equal encoder depth {}",
                self.encoder_depth
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.predictor_heads == 0 || !self.predictor_dim.is_multiple_of(self.predictor_heads) {
            return bad(format!(
                "predictor_dim {} not divisible by predictor_heads {}",
                self.predictor_dim, self.predictor_heads
            ));
        }
        if self.patch_size == 0 || self.tubelet_size == 0 || self.channels == 0 {
            return bad("patch, tubelet and channel counts must be positive".into());
        }
        if self.encoder_depth == 0 || self.predictor_depth == 0 || self.mlp_ratio == 0 {
            return bad("depths and mlp ratio must be positive".into());
        }
        rope_split(self.head_dim())?;
        rope_split(self.predictor_head_dim())?;
        Ok(())
    }

    /// Names of the tensors that make up the encoder side: tokenizer and
    /// encoder blocks. The teacher mirrors exactly this subset.
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("tok.") || name.starts_with("enc.")
    }

    /// Shapes of every learnable tensor, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let c = self.channels;
        let dp = self.predictor_dim;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

        if self.multimodal_tokenizer {
            push("tok.patch2d.w".into(), vec![p * p * c, d]);
            push("tok.patch2d.b".into(), vec![d]);
        }
        push("tok.patch3d.w".into(), vec![self.tubelet_size * p * p * c, d]);
        push("tok.patch3d.b".into(), vec![d]);
        if self.multimodal_tokenizer {
            push("tok.modality.image".into(), vec![d]);
            push("tok.modality.video".into(), vec![d]);
        }
        for i in 0..self.encoder_depth {
            for (n, s) in BlockShape::new(d, self.mlp_ratio).param_shapes() {
                push(format!("enc.{i}.{n}"), s);
            }
        }
        for k in 0..self.levels() {
            push(format!("enc.norm{k}.g"), vec![d]);
            push(format!("enc.norm{k}.b"), vec![d]);
        }

        let kd = self.levels() * d;
        let hidden = self.fusion_hidden();
        push("fuse.fc1.w".into(), vec![kd, hidden]);
        push("fuse.fc1.b".into(), vec![hidden]);
        push("fuse.fc2.w".into(), vec![hidden, dp]);
        push("fuse.fc2.b".into(), vec![dp]);

        push("pred.mask_token".into(), vec![1, dp]);
        if self.multimodal_tokenizer {
            push("pred.modality.image".into(), vec![dp]);
            push("pred.modality.video".into(), vec![dp]);
        }
        for i in 0..self.predictor_depth {
            for (n, s) in BlockShape::new(dp, self.mlp_ratio).param_shapes() {
                push(format!("pred.{i}.{n}"), s);
            }
        }
        push("pred.norm.g".into(), vec![dp]);
        push("pred.norm.b".into(), vec![dp]);
        for k in 0..self.levels() {
            push(format!("pred.head{k}.w"), vec![dp, self.out_dim()]);
            push(format!("pred.head{k}.b"), vec![self.out_dim()]);
        }
        out
    }

    /// Freshly initialized parameters: truncated-normal weights and embeddings,
    /// zero biases, unit norm gains.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng) -> Result<ParamStore<T>> {
        self.validate()?;
        init_store(&self.param_shapes(), self.init_std, rng)
    }
}

/// Initializes named tensors by suffix: `.g` to ones, `.b` to zeros and
/// everything else from a normal truncated at two standard deviations.
pub fn init_store<T: Real>(shapes: &[(String, Vec<usize>)], std: f64, rng: &mut impl Rng) -> Result<ParamStore<T>> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let limit = 2.0 * std;
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = match name.rsplit('.').next().unwrap_or("") {
            "g" => Tensor::full(shape, T::one()),
            "b" => Tensor::zeros(shape),
            _ => Tensor::from_fn(shape, |_| {
                let x: f64 = normal.sample(rng);
                T::c(x.clamp(-limit, limit))
            }),
        };
        store.insert(name.clone(), t);
    }
    Ok(store)
}
