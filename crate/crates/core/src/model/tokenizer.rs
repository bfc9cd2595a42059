//! Patch embeddings. Because stride equals kernel size, a convolutional
//! patchifier is a space-to-depth rearrangement followed by one matmul.

use super::{Modality, ModelConfig, PatchGrid};
use crate::tensor::{Binding, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Pixels laid out `[frames, height, width, channels]`; images have one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput {
    pub modality: Modality,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl VisualInput {
    pub fn image(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::new(Modality::Image, 1, height, width, channels, pixels)
    }

    pub fn video(frames: usize, height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        Self::new(Modality::Video, frames, height, width, channels, pixels)
    }

    fn new(
        modality: Modality,
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if pixels.len() != frames * height * width * channels {
            return Err(Error::Input(format!(
                "{} pixels do not fill {frames}x{height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Self {
            modality,
            frames,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// The frames `[start, start + count)` as a new clip.
    pub fn frames_slice(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.frames || count == 0 {
            return Err(Error::Input(format!("frames {start}..{} out of {}", start + count, self.frames)));
        }
        let fl = self.frame_len();
        Self::new(
            self.modality,
            count,
            self.height,
            self.width,
            self.channels,
            self.pixels[start * fl..(start + count) * fl].to_vec(),
        )
    }

    /// Repeats every frame `times` times along the temporal axis.
    pub fn repeat_frames(&self, times: usize) -> Self {
        let fl = self.frame_len();
        let mut pixels = Vec::with_capacity(self.pixels.len() * times);
        for f in 0..self.frames {
            for _ in 0..times {
                pixels.extend_from_slice(&self.pixels[f * fl..(f + 1) * fl]);
            }
        }
        Self {
            frames: self.frames * times,
            pixels,
            ..self.clone()
        }
    }
}

/// Space-to-depth: one row per tubelet, columns ordered `(dt, dy, dx, c)`.
pub fn patchify<T: Real>(input: &VisualInput, patch: usize, tubelet: usize) -> Result<(Tensor<T>, PatchGrid)> {
    let grid = PatchGrid::for_video(input.frames, input.height, input.width, patch, tubelet)?;
    let c = input.channels;
    let cols = tubelet * patch * patch * c;
    let mut rows = Vec::with_capacity(grid.len() * cols);
    for [t, h, w] in grid.coords() {
        for dt in 0..tubelet {
            let f = t * tubelet + dt;
            for dy in 0..patch {
                let y = h * patch + dy;
                let base = ((f * input.height + y) * input.width + w * patch) * c;
                rows.extend(input.pixels[base..base + patch * c].iter().map(|&v| T::c(v as f64)));
            }
        }
    }
    Ok((Tensor::new(vec![grid.len(), cols], rows)?, grid))
}

/// Embeds an image or video into `[tokens, D]`.
///
/// With the multimodal tokenizer, images go through the 2D patch embedding
/// and every token receives the learnable embedding of its modality.
/// Otherwise images are repeated over one tubelet and share the 3D path.
pub fn tokenize<T: Real>(
    tape: &mut Tape<T>,
    p: &Binding<T>,
    cfg: &ModelConfig,
    input: &VisualInput,
) -> Result<(Var, PatchGrid)> {
    if input.channels != cfg.channels {
        return Err(Error::Input(format!(
            "expected {} channels, got {}",
            cfg.channels, input.channels
        )));
    }
    let (patches, grid, prefix) = match (input.modality, cfg.multimodal_tokenizer) {
        (Modality::Image, true) => {
            let (x, g) = patchify(input, cfg.patch_size, 1)?;
            (x, g, "tok.patch2d")
        }
        (Modality::Image, false) => {
            let clip = input.repeat_frames(cfg.tubelet_size);
            let (x, g) = patchify(&clip, cfg.patch_size, cfg.tubelet_size)?;
            (x, g, "tok.patch3d")
        }
        (Modality::Video, _) => {
            let (x, g) = patchify(input, cfg.patch_size, cfg.tubelet_size)?;
            (x, g, "tok.patch3d")
        }
    };
    let x = tape.constant(patches);
    let mut tokens = super::linear(tape, p, prefix, x)?;
    if cfg.multimodal_tokenizer {
        let m = p.var(&format!("tok.modality.{}", input.modality.name()))?;
        tokens = tape.add(tokens, m)?;
    }
    Ok((tokens, grid))
}
