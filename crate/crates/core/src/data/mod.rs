//! Synthetic data, file formats, checkpoints, configuration and random
//! streams.

pub mod checkpoint;
pub mod config;
pub mod format;
pub mod rng;
pub mod synth;

use std::path::Path;

pub use checkpoint::Checkpoint;
pub use config::ConfigMap;
pub use rng::Streams;
pub use synth::{generate_clip, Clip, SceneSpec};

use crate::Result;

/// `count` clips of `split`, clip `i` drawn from stream `(split, i)`.
pub fn generate_split(spec: &SceneSpec, streams: &Streams, split: &str, count: usize) -> Result<Vec<Clip>> {
    (0..count)
        .map(|i| generate_clip(spec, &mut streams.get(split, i as u64)))
        .collect()
}

/// Writes `train/` and `val/` clips as `NNNNNN.vjf` frames plus
/// `NNNNNN.vjl` labels under `out`.
pub fn write_dataset(out: &Path, spec: &SceneSpec, streams: &Streams, train: usize, val: usize) -> Result<()> {
    for (split, stream, count) in [("train", rng::DATA_TRAIN, train), ("val", rng::DATA_VAL, val)] {
        let dir = out.join(split);
        for (i, clip) in generate_split(spec, streams, stream, count)?.iter().enumerate() {
            let frames = format::encode_frames(clip.width, clip.height, clip.frames, &clip.rgb)?;
            format::write_atomic(&dir.join(format!("{i:06}.vjf")), &frames)?;
            format::write_atomic(&dir.join(format!("{i:06}.vjl")), &format::encode_labels(clip))?;
        }
    }
    Ok(())
}

/// Reads every clip of one split written by [`write_dataset`], in file order.
pub fn read_split(dir: &Path) -> Result<Vec<Clip>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "vjf"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| format::load_clip(p, &p.with_extension("vjl")))
        .collect()
}
