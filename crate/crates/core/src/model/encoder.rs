use super::blocks::{linear, norm, transformer_block};
use super::rope::{self, ResolutionScale};
use super::{ModelConfig, PatchGrid};
use crate::tensor::{Binding, Real, Tape, Var};
use crate::{Error, Result};

/// Layer-normalized encoder outputs at `level_indices`, one `[tokens, D]`
/// node per level, for the grid tokens listed in `tokens`.
#[derive(Debug, Clone)]
pub struct MultiLevelFeatures {
    pub levels: Vec<Var>,
    pub level_indices: Vec<usize>,
    pub grid: PatchGrid,
    pub tokens: Vec<usize>,
}

impl MultiLevelFeatures {
    pub fn last(&self) -> Var {
        *self.levels.last().expect("at least one level")
    }
}

/// Runs the encoder over the `visible` subset of `tokens` (all when `None`).
/// Rotary positions follow the grid coordinates of the kept tokens.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    p: &Binding<T>,
    cfg: &ModelConfig,
    tokens: Var,
    grid: &PatchGrid,
    visible: Option<&[usize]>,
    scale: ResolutionScale,
) -> Result<MultiLevelFeatures> {
    let n = tape.shape(tokens)[0];
    if n != grid.len() {
        return Err(Error::Input(format!("{n} tokens for a grid of {}", grid.len())));
    }
    let (x, kept) = match visible {
        None => (tokens, (0..n).collect::<Vec<_>>()),
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::Input("encoder received no visible tokens".into()));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) || idx[idx.len() - 1] >= n {
                return Err(Error::Input("visible indices must be sorted, unique and in range".into()));
            }
            (tape.gather_rows(tokens, idx)?, idx.to_vec())
        }
    };
    let positions: Vec<_> = kept.iter().map(|&i| grid.coord(i)).collect();
    let table = rope::table::<T>(&positions, cfg.head_dim(), cfg.rope_base, scale)?;
    let mut x = x;
    let mut levels = Vec::with_capacity(cfg.levels());
    for block in 0..cfg.encoder_depth {
        x = transformer_block(tape, p, &format!("enc.{block}"), x, cfg.heads, Some(&table), cfg.ln_eps)?;
        if let Some(k) = cfg.level_indices.iter().position(|&l| l == block + 1) {
            levels.push(norm(tape, p, &format!("enc.norm{k}"), x, cfg.ln_eps)?);
        }
    }
    Ok(MultiLevelFeatures {
        levels,
        level_indices: cfg.level_indices.clone(),
        grid: *grid,
        tokens: kept,
    })
}

/// Channel-concatenates the levels and maps `[N, K·D]` to `[N, D_p]` via a
/// two-layer GELU MLP.
pub fn fuse_levels<T: Real>(tape: &mut Tape<T>, p: &Binding<T>, mlf: &MultiLevelFeatures) -> Result<Var> {
    let x = if mlf.levels.len() == 1 {
        mlf.levels[0]
    } else {
        tape.concat(&mlf.levels, 1)?
    };
    let h = linear(tape, p, "fuse.fc1", x)?;
    let h = tape.gelu(h);
    linear(tape, p, "fuse.fc2", h)
}
