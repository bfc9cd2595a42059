//! The four-rung recipe ladder: mask-only → +context loss → +deep
//! supervision → +modality tokenizer, each pretrained and then probed.

use std::time::Instant;

use serde::Serialize;

use crate::data::rng::{self, Streams};
use crate::data::synth::{Clip, NUM_CLASSES, NUM_DIRECTIONS};
use crate::data::{generate_split, SceneSpec};
use crate::dense_eval::{vos_clip, PropagationParams};
use crate::masking::MaskParams;
use crate::model::{evenly_spaced_levels, ModelConfig, PatchGrid};
use crate::objective::{LossWeights, Resolution, ResolutionPlan, Schedule};
use crate::probes::attentive::ClsExample;
use crate::probes::ClassificationReport;
use crate::probes::features::input_features;
use crate::probes::{
    linear_probe_train, train_attentive_probe, DenseTask, FeatureLevels, LinearProbeReport, ProbeConfig, ProbeTask,
};
use crate::tensor::{ParamStore, Tensor};
use crate::trainer::{run_pretraining, scaled_scene, PretrainConfig, RunOptions, TrainState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Rung {
    MaskOnly,
    ContextLoss,
    DeepSupervision,
    ModalityTokenizer,
}

impl Rung {
    pub const ALL: [Rung; 4] = [Rung::MaskOnly, Rung::ContextLoss, Rung::DeepSupervision, Rung::ModalityTokenizer];

    pub fn label(self) -> &'static str {
        match self {
            Rung::MaskOnly => "mask-only",
            Rung::ContextLoss => "+ context loss",
            Rung::DeepSupervision => "+ deep supervision",
            Rung::ModalityTokenizer => "+ modality tokenizer",
        }
    }

    /// `base` with this rung's recipe switches applied. The base supplies
    /// λ values and the encoder depth.
    pub fn apply(self, base: &PretrainConfig) -> PretrainConfig {
        let mut cfg = base.clone();
        let depth = cfg.model.encoder_depth;
        let (context, deep, multimodal) = match self {
            Rung::MaskOnly => (false, false, false),
            Rung::ContextLoss => (true, false, false),
            Rung::DeepSupervision => (true, true, false),
            Rung::ModalityTokenizer => (true, true, true),
        };
        if !context {
            cfg.loss = LossWeights {
                scheme: base.loss.scheme,
                warmup: base.loss.warmup,
                ..LossWeights::mask_only()
            };
        }
        cfg.model.level_indices = if deep { evenly_spaced_levels(depth, 4.min(depth)) } else { vec![depth] };
        cfg.model.multimodal_tokenizer = multimodal;
        cfg
    }
}

/// Sizes of the probing data.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSizes {
    pub train_images: usize,
    pub val_images: usize,
    pub train_videos: usize,
    pub val_videos: usize,
    pub vos_videos: usize,
}

impl Default for EvalSizes {
    fn default() -> Self {
        Self {
            train_images: 96,
            val_images: 48,
            train_videos: 96,
            val_videos: 48,
            vos_videos: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub base: PretrainConfig,
    pub sizes: EvalSizes,
    pub seg_probe: ProbeConfig,
    pub depth_probe: ProbeConfig,
    pub cls_probe: ProbeConfig,
    pub probe_heads: usize,
    pub vos: Option<PropagationParams>,
}

impl AblationConfig {
    /// The desk-scale ladder: a 4-block, 32-wide encoder on 24-pixel
    /// inputs with 4-pixel patches.
    pub fn desk(steps: u64) -> Self {
        let image = 24;
        let model = ModelConfig {
            patch_size: 4,
            embed_dim: 32,
            encoder_depth: 4,
            heads: 4,
            predictor_depth: 2,
            predictor_dim: 32,
            predictor_heads: 4,
            level_indices: evenly_spaced_levels(4, 4),
            ..ModelConfig::default()
        };
        let cooldown = (steps / 10).max(1).min(steps.saturating_sub(1));
        let warmup = (steps * 3 / 40).min(steps - cooldown);
        let base = PretrainConfig {
            model,
            mask: MaskParams {
                num_blocks: 2,
                ..MaskParams::default()
            },
            schedule: Schedule {
                warmup_steps: warmup,
                start_lr: 1e-4,
                constant_lr: 5.25e-4,
                total_steps: steps,
                cooldown_steps: cooldown,
                final_lr: 1e-6,
            },
            batch_images: 2,
            batch_videos: 1,
            resolution: ResolutionPlan {
                primary: Resolution {
                    image,
                    video_frames: 4,
                    video: image,
                },
                cooldown: Resolution {
                    image: 32,
                    video_frames: 8,
                    video: image,
                },
            },
            scene: scaled_scene(&SceneSpec::default(), 32, image, 1),
            checkpoint_every: 0,
            eval_every: (steps / 10).max(1),
            ..PretrainConfig::default()
        };
        let cls = ProbeConfig {
            lrs: vec![2e-3, 1e-3],
            weight_decays: vec![0.01],
            epochs: 15,
            ..ProbeConfig::for_task(ProbeTask::Classification)
        };
        Self {
            base,
            sizes: EvalSizes::default(),
            seg_probe: ProbeConfig::for_task(ProbeTask::Segmentation),
            depth_probe: ProbeConfig::for_task(ProbeTask::Depth),
            cls_probe: cls,
            probe_heads: 4,
            vos: Some(PropagationParams {
                context: 4,
                radius: 3.0,
                ..PropagationParams::reference()
            }),
        }
    }
}

/// Held-out clips for every probe, drawn from the train and val streams.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub train_images: Vec<Clip>,
    pub val_images: Vec<Clip>,
    pub train_videos: Vec<Clip>,
    pub val_videos: Vec<Clip>,
}

impl EvalData {
    pub fn generate(cfg: &AblationConfig, streams: &Streams) -> Result<Self> {
        let r = cfg.base.resolution.primary;
        let img = cfg.base.scene_at(r.image, 1);
        let vid = cfg.base.scene_at(r.video, r.video_frames);
        let s = &cfg.sizes;
        Ok(Self {
            train_images: generate_split(&img, streams, rng::DATA_TRAIN, s.train_images)?,
            val_images: generate_split(&img, streams, rng::DATA_VAL, s.val_images)?,
            train_videos: generate_split(&vid, streams, "data/train/video", s.train_videos)?,
            val_videos: generate_split(&vid, streams, "data/val/video", s.val_videos)?,
        })
    }
}

/// Frozen-teacher scores of one trained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeScores {
    pub seg_miou: f64,
    pub seg_baseline: f64,
    pub depth_rmse: f64,
    pub depth_baseline: f64,
    pub cls_image: f64,
    pub cls_video: f64,
    pub vos_jf: Option<f64>,
}

impl ProbeScores {
    /// Mean of image and video classification accuracy.
    pub fn cls(&self) -> f64 {
        (self.cls_image + self.cls_video) / 2.0
    }
}

fn feats(model: &ModelConfig, enc: &ParamStore<f32>, clips: &[Clip], image: bool) -> Result<Vec<(Tensor<f32>, PatchGrid)>> {
    clips
        .iter()
        .map(|c| input_features(model, enc, &c.to_input(image)?, FeatureLevels::Last))
        .collect()
}

fn examples(f: Vec<(Tensor<f32>, PatchGrid)>, labels: impl Iterator<Item = usize>) -> Vec<ClsExample> {
    f.into_iter()
        .zip(labels)
        .map(|((features, grid), label)| ClsExample { features, grid, label })
        .collect()
}

/// Linear-probe score of `task` on images: mIoU for segmentation, RMSE for
/// depth.
pub fn probe_dense(
    model: &ModelConfig,
    teacher: &ParamStore<f32>,
    train: &[Clip],
    val: &[Clip],
    task: DenseTask,
    cfg: &ProbeConfig,
    streams: &Streams,
) -> Result<LinearProbeReport> {
    let tf: Vec<_> = feats(model, teacher, train, true)?.into_iter().map(|(f, _)| f).collect();
    let vf: Vec<_> = feats(model, teacher, val, true)?.into_iter().map(|(f, _)| f).collect();
    linear_probe_train(&tf, train, &vf, val, model.patch_size, task, cfg, streams)
}

/// Attentive-probe accuracy: dominant shape for images, shared motion
/// direction for videos.
pub fn probe_classification(
    model: &ModelConfig,
    teacher: &ParamStore<f32>,
    train: &[Clip],
    val: &[Clip],
    image: bool,
    heads: usize,
    cfg: &ProbeConfig,
    streams: &Streams,
) -> Result<ClassificationReport> {
    // shape ids 1..=3 become labels 0..=2
    let label = |c: &Clip| if image { c.dominant_class() - 1 } else { c.direction };
    let classes = if image { NUM_CLASSES - 1 } else { NUM_DIRECTIONS };
    train_attentive_probe(
        &examples(feats(model, teacher, train, image)?, train.iter().map(label)),
        &examples(feats(model, teacher, val, image)?, val.iter().map(label)),
        classes,
        heads,
        cfg,
        streams,
    )
}

/// Mean J&F of label propagation over the first `count` clips.
pub fn probe_vos(
    model: &ModelConfig,
    teacher: &ParamStore<f32>,
    clips: &[Clip],
    count: usize,
    params: &PropagationParams,
) -> Result<f64> {
    let n = count.min(clips.len());
    if n == 0 {
        return Err(Error::Input("no clips to segment".into()));
    }
    let mut s = 0.0;
    for c in &clips[..n] {
        s += vos_clip(model, teacher, c, params)?.scores.mean();
    }
    Ok(s / n as f64)
}

/// Runs every probe on the last-level features of `teacher`.
pub fn probe_all(
    cfg: &AblationConfig,
    model: &ModelConfig,
    teacher: &ParamStore<f32>,
    data: &EvalData,
    streams: &Streams,
) -> Result<ProbeScores> {
    let (ti, vi) = (&data.train_images, &data.val_images);
    let seg = DenseTask::Segmentation { classes: NUM_CLASSES };
    let seg_r = probe_dense(model, teacher, ti, vi, seg, &cfg.seg_probe, streams)?;
    let depth_r = probe_dense(model, teacher, ti, vi, DenseTask::Depth, &cfg.depth_probe, streams)?;
    let h = cfg.probe_heads;
    let cls_img = probe_classification(model, teacher, ti, vi, true, h, &cfg.cls_probe, streams)?;
    let (tv, vv) = (&data.train_videos, &data.val_videos);
    let cls_vid = probe_classification(model, teacher, tv, vv, false, h, &cfg.cls_probe, streams)?;
    let vos_jf = match &cfg.vos {
        None => None,
        Some(params) => Some(probe_vos(model, teacher, vv, cfg.sizes.vos_videos, params)?),
    };
    Ok(ProbeScores {
        seg_miou: seg_r.metric,
        seg_baseline: seg_r.baseline,
        depth_rmse: depth_r.metric,
        depth_baseline: depth_r.baseline,
        cls_image: cls_img.accuracy,
        cls_video: cls_vid.accuracy,
        vos_jf,
    })
}

/// One trained and probed rung.
#[derive(Debug, Clone, Serialize)]
pub struct RungResult {
    pub rung: Rung,
    pub seed: u64,
    pub scores: ProbeScores,
    pub final_loss: f64,
    pub min_spread_ratio: f64,
    pub seconds: f64,
}

/// Pretrains `rung` with `seed` and probes the final teacher.
pub fn run_rung(cfg: &AblationConfig, rung: Rung, seed: u64, opts: &RunOptions) -> Result<RungResult> {
    Ok(train_and_probe(cfg, rung, seed, opts)?.0)
}

/// [`run_rung`] that also hands back the trained recipe and state.
pub fn train_and_probe(
    cfg: &AblationConfig,
    rung: Rung,
    seed: u64,
    opts: &RunOptions,
) -> Result<(RungResult, PretrainConfig, TrainState<f32>)> {
    let t0 = Instant::now();
    let mut pc = rung.apply(&cfg.base);
    pc.seed = seed;
    let out = run_pretraining(&pc, opts)?;
    // probe data come from the seed's own streams, shared by every rung
    let streams = Streams::new(seed);
    let data = EvalData::generate(cfg, &streams)?;
    let scores = probe_all(cfg, &pc.model, &out.state.teacher, &data, &streams)?;
    let tail = out.records.len().saturating_sub(20);
    let final_loss = out.records[tail..].iter().map(|r| r.loss).sum::<f64>() / (out.records.len() - tail).max(1) as f64;
    let result = RungResult {
        rung,
        seed,
        scores,
        final_loss,
        min_spread_ratio: out.min_spread_ratio,
        seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((result, pc, out.state))
}

/// Seed-averaged scores of one rung.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RungSummary {
    pub rung: Rung,
    pub seeds: usize,
    pub seg_miou: f64,
    pub depth_rmse: f64,
    pub cls_image: f64,
    pub cls_video: f64,
    pub cls: f64,
    pub vos_jf: Option<f64>,
    pub min_spread_ratio: f64,
}

pub fn summarize(results: &[RungResult]) -> Vec<RungSummary> {
    let mut out = Vec::new();
    for rung in Rung::ALL {
        let rs: Vec<&RungResult> = results.iter().filter(|r| r.rung == rung).collect();
        if rs.is_empty() {
            continue;
        }
        let n = rs.len() as f64;
        let mean = |f: &dyn Fn(&RungResult) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        let vos = if rs.iter().all(|r| r.scores.vos_jf.is_some()) {
            Some(mean(&|r| r.scores.vos_jf.unwrap()))
        } else {
            None
        };
        out.push(RungSummary {
            rung,
            seeds: rs.len(),
            seg_miou: mean(&|r| r.scores.seg_miou),
            depth_rmse: mean(&|r| r.scores.depth_rmse),
            cls_image: mean(&|r| r.scores.cls_image),
            cls_video: mean(&|r| r.scores.cls_video),
            cls: mean(&|r| r.scores.cls()),
            vos_jf: vos,
            min_spread_ratio: rs.iter().map(|r| r.min_spread_ratio).fold(f64::INFINITY, f64::min),
        });
    }
    out
}

/// Comparison table: one row per rung, dense metrics then classification.
pub fn format_table(rows: &[RungSummary]) -> String {
    let mut s = format!(
        "{:<22} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "recipe", "seeds", "seg mIoU", "depth", "VOS J&F", "cls img", "cls vid", "cls avg"
    );
    for r in rows {
        let vos = r.vos_jf.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        s.push_str(&format!(
            "{:<22} {:>6} {:>8.2} {:>8.4} {:>8} {:>8.2} {:>8.2} {:>8.2}\n",
            r.rung.label(),
            r.seeds,
            100.0 * r.seg_miou,
            r.depth_rmse,
            vos,
            100.0 * r.cls_image,
            100.0 * r.cls_video,
            100.0 * r.cls
        ));
    }
    s
}

/// The ladder's directional claims: the context loss lifts segmentation
/// and costs classification; deep supervision wins classification back
/// while keeping most of the segmentation gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Directional {
    /// Segmentation mIoU gain of +context over mask-only, absolute.
    pub context_seg_gain: f64,
    /// Classification change of +context over mask-only.
    pub context_cls_change: f64,
    /// Classification change of +deep supervision over mask-only.
    pub deep_cls_change: f64,
    /// Fraction of the context segmentation gain kept by deep supervision.
    pub deep_seg_retained: f64,
    pub context_holds: bool,
    pub deep_holds: bool,
}

pub const MIN_SEG_GAIN: f64 = 0.03;
pub const CLS_RECOVERY: f64 = 0.01;
pub const MIN_RETAINED: f64 = 0.8;

pub fn directional(rows: &[RungSummary]) -> Option<Directional> {
    let get = |r: Rung| rows.iter().find(|s| s.rung == r);
    let (m, c, d) = (get(Rung::MaskOnly)?, get(Rung::ContextLoss)?, get(Rung::DeepSupervision)?);
    let gain = c.seg_miou - m.seg_miou;
    let kept = if gain > 0.0 { (d.seg_miou - m.seg_miou) / gain } else { 0.0 };
    Some(Directional {
        context_seg_gain: gain,
        context_cls_change: c.cls - m.cls,
        deep_cls_change: d.cls - m.cls,
        deep_seg_retained: kept,
        context_holds: gain >= MIN_SEG_GAIN && c.cls < m.cls,
        deep_holds: d.cls >= m.cls - CLS_RECOVERY && gain > 0.0 && kept >= MIN_RETAINED,
    })
}
