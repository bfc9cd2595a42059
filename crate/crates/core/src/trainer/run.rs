use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::step::{make_batch, pretrain_step, StepStats};
use super::{PretrainConfig, TrainState};
use crate::data::synth::Clip;
use crate::data::{generate_clip, Checkpoint, Streams};
use crate::model::rope::NATIVE;
use crate::model::{encode, tokenize, ModelConfig, VisualInput};
use crate::objective::feature_spread;
use crate::tensor::{ParamStore, Real, Tape, Tensor};
use crate::{Error, Result};

/// Stream for the collapse-sentinel clips, separate from every data split.
pub const SENTINEL: &str = "sentinel";

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: &'static str,
    pub loss: f64,
    pub predict: f64,
    pub context: f64,
    pub lr: f64,
    pub lambda_ramp: f64,
    pub ema: f64,
    pub images: usize,
    pub videos: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_spread: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spread_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for checkpoints, metrics and metadata; nothing is written
    /// when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop before this step instead of at the schedule's end.
    pub stop_at: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState<f32>,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Teacher spread at initialization and its lowest ratio seen.
    pub initial_spread: f64,
    pub min_spread_ratio: f64,
}

/// Last-level teacher features of `input` over the full token set.
pub fn teacher_features<T: Real>(model: &ModelConfig, teacher: &ParamStore<T>, input: &VisualInput) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = teacher.bind(&mut tape, false);
    let (tok, grid) = tokenize(&mut tape, &b, model, input)?;
    let f = encode(&mut tape, &b, model, tok, &grid, None, NATIVE)?;
    Ok(tape.value(f.last()).clone())
}

/// Sentinel inputs: half images, half videos at the primary resolution.
pub fn sentinel_inputs(cfg: &PretrainConfig) -> Result<Vec<VisualInput>> {
    let streams = Streams::new(cfg.seed);
    let r = cfg.resolution.primary;
    (0..cfg.sentinel_clips.max(1))
        .map(|i| {
            let image = i % 2 == 0;
            let spec = if image {
                cfg.scene_at(r.image, 1)
            } else {
                cfg.scene_at(r.video, r.video_frames)
            };
            let clip: Clip = generate_clip(&spec, &mut streams.get(SENTINEL, i as u64))?;
            clip.to_input(image)
        })
        .collect()
}

/// Mean per-channel standard deviation of teacher features across tokens.
pub fn teacher_spread<T: Real>(model: &ModelConfig, teacher: &ParamStore<T>, inputs: &[VisualInput]) -> Result<f64> {
    let mut total = 0.0;
    for input in inputs {
        total += feature_spread(&teacher_features(model, teacher, input)?);
    }
    Ok(total / inputs.len() as f64)
}

fn phase(cfg: &PretrainConfig, step: u64) -> &'static str {
    if cfg.schedule.in_cooldown(step) {
        "cooldown"
    } else {
        "primary"
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    distance_metric: &'static str,
    images_per_step: usize,
    videos_per_step: usize,
    reference_modality_ratio: &'static str,
    total_steps: u64,
    cooldown_steps: u64,
}

fn write_meta(dir: &Path, cfg: &PretrainConfig) -> Result<()> {
    let hash = cfg.hash();
    let meta = RunMeta {
        config_hash: &hash,
        seed: cfg.seed,
        threads: 1,
        distance_metric: cfg.mask.metric.name(),
        images_per_step: cfg.batch_images,
        videos_per_step: cfg.batch_videos,
        reference_modality_ratio: "2304 images : 128 videos",
        total_steps: cfg.schedule.total_steps,
        cooldown_steps: cfg.schedule.cooldown_steps,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    crate::data::format::write_atomic(&dir.join("run.json"), text.as_bytes())?;
    crate::data::format::write_atomic(&dir.join("config.txt"), cfg.to_map().serialize().as_bytes())
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.bin"))
}

/// Loads a pretraining checkpoint, refusing one written by another config.
pub fn load_state(cfg: &PretrainConfig, path: &Path) -> Result<TrainState<f32>> {
    let ck = Checkpoint::load(path)?;
    let hash = cfg.hash();
    if ck.config_hash != hash {
        return Err(Error::Config(format!(
            "checkpoint {} belongs to config {}, not {hash}",
            path.display(),
            ck.config_hash
        )));
    }
    let state = TrainState::from_checkpoint(&ck, &cfg.model)?;
    state.check_teacher_shapes()?;
    Ok(state)
}

/// Loads any checkpoint with the config it was written under.
pub fn load_checkpoint(path: &Path) -> Result<(PretrainConfig, TrainState<f32>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = PretrainConfig::from_map(&crate::data::ConfigMap::parse(&ck.config_text)?)?;
    let state = TrainState::from_checkpoint(&ck, &cfg.model)?;
    state.check_teacher_shapes()?;
    Ok((cfg, state))
}

/// Runs (or resumes) pretraining through the primary and cooldown phases.
pub fn run_pretraining(cfg: &PretrainConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let map = cfg.to_map();
    let mut state = match &opts.resume {
        Some(p) => load_state(cfg, p)?,
        None => TrainState::for_config(cfg)?,
    };
    let end = opts.stop_at.unwrap_or(cfg.schedule.total_steps).min(cfg.schedule.total_steps);

    let sentinel = if cfg.eval_every > 0 { sentinel_inputs(cfg)? } else { Vec::new() };
    let initial_spread = if sentinel.is_empty() {
        0.0
    } else {
        let fresh = TrainState::<f32>::for_config(cfg)?;
        teacher_spread(&cfg.model, &fresh.teacher, &sentinel)?
    };

    let mut metrics = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        write_meta(dir, cfg)?;
        let file = if opts.resume.is_some() {
            OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?
        } else {
            File::create(dir.join("metrics.jsonl"))?
        };
        metrics = Some(BufWriter::new(file));
    }

    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_good: Option<PathBuf> = opts.resume.clone();
    let mut min_ratio = f64::INFINITY;
    while state.step < end {
        let step = state.step;
        if let (Some(dir), true) = (&opts.out_dir, cfg.schedule.in_cooldown(step) && step == cfg.schedule.cooldown_start()) {
            let p = dir.join("precooldown.bin");
            state.save(&map, &p)?;
            checkpoints.push(p);
        }
        let batch = make_batch(cfg, &streams, step)?;
        let stats: StepStats = match pretrain_step(cfg, &mut state, &batch) {
            Ok(s) => s,
            Err(Error::NonFiniteLoss { step, .. }) => return Err(Error::NonFiniteLoss { step, last_good }),
            Err(e) => return Err(e),
        };
        let (spread, ratio) = if cfg.eval_every > 0 && (state.step % cfg.eval_every == 0 || state.step == end) {
            let s = teacher_spread(&cfg.model, &state.teacher, &sentinel)?;
            let r = s / initial_spread;
            min_ratio = min_ratio.min(r);
            (Some(s), Some(r))
        } else {
            (None, None)
        };
        let rec = StepRecord {
            step: stats.step,
            phase: phase(cfg, stats.step),
            loss: stats.loss,
            predict: stats.predict,
            context: stats.context,
            lr: stats.lr,
            lambda_ramp: stats.lambda_ramp,
            ema: cfg.ema,
            images: stats.images,
            videos: stats.videos,
            teacher_spread: spread,
            spread_ratio: ratio,
        };
        if let Some(w) = metrics.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        if stats.step.is_multiple_of(50) {
            log::info!("step {} loss {:.5} lr {:.3e} ramp {:.3}", stats.step, stats.loss, stats.lr, stats.lambda_ramp);
        }
        records.push(rec);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let p = checkpoint_path(dir, state.step);
                state.save(&map, &p)?;
                if let Some(w) = metrics.as_mut() {
                    w.flush()?;
                }
                checkpoints.push(p.clone());
                last_good = Some(p);
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        let p = dir.join("final.bin");
        state.save(&map, &p)?;
        checkpoints.push(p);
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(RunOutput {
        state,
        records,
        checkpoints,
        initial_spread,
        min_spread_ratio: min_ratio,
    })
}
