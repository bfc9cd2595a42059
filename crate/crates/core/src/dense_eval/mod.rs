//! Training-free evaluations of dense features: label propagation through
//! video, PCA colour maps and the segmentation/depth metrics.

pub mod metrics;
pub mod pca;
pub mod propagate;

use std::path::{Path, PathBuf};

pub use metrics::{boundary_f, j_and_f, miou, rmse, JF};
pub use pca::{pca_map, principal_components, Pca, PcaMap, PERMUTATIONS};
pub use propagate::{propagate_labels, Neighborhood, Propagation, PropagationParams};

use crate::data::format::{pgm, ppm, write_atomic};
use crate::data::synth::Clip;
use crate::model::{ModelConfig, PatchGrid};
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::run::teacher_features;
use crate::{Error, Result};

/// Boundary match radius of the F score.
pub const BOUNDARY_TOLERANCE: usize = 1;

/// Per-slice `[h·w, D]` blocks of a `[t·h·w, D]` feature matrix.
pub fn split_slices(features: &Tensor<f32>, grid: &PatchGrid) -> Result<Vec<Tensor<f64>>> {
    let n = grid.h * grid.w;
    if features.rows() != grid.len() {
        return Err(Error::Input("features do not match the grid".into()));
    }
    let d = features.last_dim();
    let f = features.cast::<f64>();
    (0..grid.t)
        .map(|t| {
            let rows = f.data()[t * n * d..(t + 1) * n * d].to_vec();
            Ok(Tensor::new(vec![n, d], rows)?)
        })
        .collect()
}

/// Segmentation of one clip by label propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct VosResult {
    pub scores: JF,
    /// Frame indices scored, one per temporal token slice.
    pub frames: Vec<usize>,
    /// Predicted instance ids at pixel resolution, per scored frame.
    pub masks: Vec<Vec<u8>>,
}

/// Encodes `clip` as a video, seeds the first slice with the patch-majority
/// instance labels of frame 0 and propagates. Slice `t` is scored against
/// frame `t·tubelet`.
pub fn vos_clip(
    model: &ModelConfig,
    teacher: &ParamStore<f32>,
    clip: &Clip,
    params: &PropagationParams,
) -> Result<VosResult> {
    let input = clip.to_input(false)?;
    let grid = PatchGrid::for_video(clip.frames, clip.height, clip.width, model.patch_size, model.tubelet_size)?;
    let feats = teacher_features(model, teacher, &input)?;
    let slices = split_slices(&feats, &grid)?;
    let p = model.patch_size;
    let n = clip.frame_pixels();
    let first =
        metrics::patch_majority(&clip.instance[..n], clip.width, clip.height, p);
    let labels = clip.instance.iter().copied().max().unwrap_or(0) as usize + 1;
    let prop = propagate_labels(&slices, grid.h, grid.w, &first, labels, params)?;
    let frames: Vec<usize> = (0..grid.t).map(|t| t * model.tubelet_size).collect();
    let masks: Vec<Vec<u8>> = (0..grid.t)
        .map(|t| metrics::upsample_nearest(&prop.hard(t), grid.h, grid.w, p))
        .collect();
    let mut gt = Vec::with_capacity(frames.len() * n);
    for &f in &frames {
        gt.extend_from_slice(&clip.instance[f * n..(f + 1) * n]);
    }
    let pred: Vec<u8> = masks.concat();
    let scores = j_and_f(&pred, &gt, clip.width, clip.height, frames.len(), BOUNDARY_TOLERANCE, true)?;
    Ok(VosResult { scores, frames, masks })
}

/// Writes the six channel orderings of every slice as
/// `pca_t{slice}_p{perm}.ppm`.
pub fn write_pca_images(dir: &Path, map: &PcaMap, scale: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (w, h) = (map.grid.w * scale.max(1), map.grid.h * scale.max(1));
    let mut out = Vec::new();
    for (pi, perm) in PERMUTATIONS.iter().enumerate() {
        for (t, img) in map.render(*perm, scale).iter().enumerate() {
            let p = dir.join(format!("pca_t{t}_p{pi}.ppm"));
            write_atomic(&p, &ppm(w, h, img))?;
            out.push(p);
        }
    }
    Ok(out)
}

/// Writes a label mask as a grey-level image, spreading ids over `0..=255`.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[u8], labels: usize) -> Result<()> {
    let step = 255 / labels.saturating_sub(1).max(1);
    let gray: Vec<u8> = mask.iter().map(|&l| (l as usize * step).min(255) as u8).collect();
    write_atomic(path, &pgm(width, height, &gray))
}
