use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::format::write_atomic;
use crate::data::ConfigMap;
use crate::model::rope::NATIVE;
use crate::model::{encode, tokenize, ModelConfig, PatchGrid, VisualInput};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::trainer::model_to_map;
use crate::{Error, Result};

/// Which encoder levels a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLevels {
    Last,
    /// Every supervised level, concatenated along channels.
    All,
}

impl FeatureLevels {
    pub fn name(self) -> &'static str {
        match self {
            FeatureLevels::Last => "last",
            FeatureLevels::All => "all",
        }
    }
}

/// Frozen encoder features of one input, `[tokens, D]` (or `[tokens, K·D]`).
pub fn input_features(
    model: &ModelConfig,
    encoder: &ParamStore<f32>,
    input: &VisualInput,
    levels: FeatureLevels,
) -> Result<(Tensor<f32>, PatchGrid)> {
    let mut tape = Tape::new();
    let b = encoder.bind(&mut tape, false);
    let (tok, grid) = tokenize(&mut tape, &b, model, input)?;
    let f = encode(&mut tape, &b, model, tok, &grid, None, NATIVE)?;
    let out = match levels {
        FeatureLevels::Last => f.last(),
        FeatureLevels::All if f.levels.len() == 1 => f.last(),
        FeatureLevels::All => tape.concat(&f.levels, 1)?,
    };
    Ok((tape.value(out).clone(), grid))
}

pub fn extract_features(
    model: &ModelConfig,
    encoder: &ParamStore<f32>,
    inputs: &[VisualInput],
    levels: FeatureLevels,
) -> Result<Vec<Tensor<f32>>> {
    inputs
        .iter()
        .map(|x| input_features(model, encoder, x, levels).map(|(f, _)| f))
        .collect()
}

const MAGIC: &[u8; 4] = b"VJFT";

/// On-disk cache of extracted features keyed by a hash of the encoder
/// weights, the architecture, the inputs and the level choice.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(model: &ModelConfig, encoder: &ParamStore<f32>, inputs: &[VisualInput], levels: FeatureLevels) -> String {
        let mut h = Sha256::new();
        let mut m = ConfigMap::new();
        model_to_map(&mut m, "model", model);
        h.update(m.serialize().as_bytes());
        h.update(levels.name().as_bytes());
        for (name, t) in encoder.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        for x in inputs {
            h.update(x.modality.name().as_bytes());
            for d in [x.frames, x.height, x.width, x.channels] {
                h.update((d as u64).to_le_bytes());
            }
            for v in &x.pixels {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.vjft"))
    }

    /// Cached features when a valid entry exists, otherwise extracts and
    /// stores them.
    pub fn load_or_extract(
        &self,
        model: &ModelConfig,
        encoder: &ParamStore<f32>,
        inputs: &[VisualInput],
        levels: FeatureLevels,
    ) -> Result<Vec<Tensor<f32>>> {
        let path = self.path(&Self::key(model, encoder, inputs, levels));
        if let Ok(bytes) = std::fs::read(&path) {
            match decode(&bytes) {
                Ok(f) if f.len() == inputs.len() => return Ok(f),
                _ => log::warn!("ignoring unreadable feature cache {}", path.display()),
            }
        }
        let feats = extract_features(model, encoder, inputs, levels)?;
        std::fs::create_dir_all(&self.dir)?;
        write_atomic(&path, &encode_features(&feats))?;
        Ok(feats)
    }
}

pub fn encode_features(feats: &[Tensor<f32>]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    for f in feats {
        out.extend_from_slice(&(f.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(f.last_dim() as u32).to_le_bytes());
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor<f32>>> {
    let bad = || Error::Format("malformed feature file".into());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad());
    }
    let u32_at = |i: usize| -> Result<usize> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(bad)
    };
    let count = u32_at(4)?;
    let mut pos = 8;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (rows, dim) = (u32_at(pos)?, u32_at(pos + 4)?);
        pos += 8;
        let n = rows * dim * 4;
        let data = bytes.get(pos..pos + n).ok_or_else(bad)?;
        pos += n;
        let v = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor::new(vec![rows, dim], v)?);
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}

/// Cache directory under an output root.
pub fn default_cache_dir(root: &Path) -> PathBuf {
    root.join("feature_cache")
}
