use crate::data::{ConfigMap, SceneSpec};
use crate::masking::{DistanceMetric, MaskParams};
use crate::model::{evenly_spaced_levels, ModelConfig};
use crate::objective::{LossWeights, Resolution, ResolutionPlan, Schedule, WeightScheme};
use crate::tensor::AdamWParams;
use crate::Result;

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub mask: MaskParams,
    pub loss: LossWeights,
    pub schedule: Schedule,
    pub optim: AdamWParams,
    pub ema: f64,
    pub batch_images: usize,
    pub batch_videos: usize,
    pub resolution: ResolutionPlan,
    /// Scene parameters at the primary image resolution; object sizes and
    /// speeds scale with the canvas.
    pub scene: SceneSpec,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Interval of the collapse sentinel; 0 disables it.
    pub eval_every: u64,
    /// Held-out clips used by the sentinel.
    pub sentinel_clips: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mask: MaskParams {
                num_blocks: 2,
                ..MaskParams::default()
            },
            loss: LossWeights::default(),
            schedule: Schedule {
                warmup_steps: 150,
                start_lr: 1e-4,
                constant_lr: 5.25e-4,
                total_steps: 2200,
                cooldown_steps: 200,
                final_lr: 1e-6,
            },
            optim: AdamWParams::default(),
            ema: 0.996,
            batch_images: 4,
            batch_videos: 2,
            resolution: ResolutionPlan {
                primary: Resolution {
                    image: 32,
                    video_frames: 4,
                    video: 32,
                },
                cooldown: Resolution {
                    image: 48,
                    video_frames: 8,
                    video: 32,
                },
            },
            scene: SceneSpec::default(),
            seed: 0,
            checkpoint_every: 500,
            eval_every: 100,
            sentinel_clips: 4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mask.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        self.scene.validate()?;
        if self.batch_images + self.batch_videos == 0 {
            return Err(crate::Error::Config("batch must hold at least one sample".into()));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(crate::Error::Config(format!("ema {} outside [0, 1]", self.ema)));
        }
        Ok(())
    }

    /// Samples drawn per optimizer step.
    pub fn per_step(&self) -> usize {
        self.batch_images + self.batch_videos
    }

    pub fn from_map(map: &ConfigMap) -> Result<Self> {
        let d = Self::default();
        let model = model_from_map(map, "model", &d.model)?;
        let cfg = Self {
            model,
            mask: MaskParams {
                spatial_scale: map.get_pair("mask.spatial_scale", d.mask.spatial_scale)?,
                temporal_scale: map.get_pair("mask.temporal_scale", d.mask.temporal_scale)?,
                aspect_ratio: map.get_pair("mask.aspect_ratio", d.mask.aspect_ratio)?,
                num_blocks: map.get("mask.blocks", d.mask.num_blocks)?,
                metric: DistanceMetric::parse(&map.get_str("mask.metric", d.mask.metric.name()))?,
                max_attempts: map.get("mask.max_attempts", d.mask.max_attempts)?,
            },
            loss: LossWeights {
                lambda_video: map.get("loss.lambda_video", d.loss.lambda_video)?,
                lambda_image: map.get("loss.lambda_image", d.loss.lambda_image)?,
                warmup: map.get_pair("loss.lambda_warmup", d.loss.warmup)?,
                scheme: WeightScheme::parse(&map.get_str("loss.scheme", d.loss.scheme.name()))?,
            },
            schedule: Schedule {
                warmup_steps: map.get("schedule.warmup_steps", d.schedule.warmup_steps)?,
                start_lr: map.get("schedule.start_lr", d.schedule.start_lr)?,
                constant_lr: map.get("schedule.lr", d.schedule.constant_lr)?,
                total_steps: map.get("schedule.steps", d.schedule.total_steps)?,
                cooldown_steps: map.get("schedule.cooldown_steps", d.schedule.cooldown_steps)?,
                final_lr: map.get("schedule.final_lr", d.schedule.final_lr)?,
            },
            optim: AdamWParams {
                lr: d.optim.lr,
                weight_decay: map.get("optim.weight_decay", d.optim.weight_decay)?,
                beta1: map.get("optim.beta1", d.optim.beta1)?,
                beta2: map.get("optim.beta2", d.optim.beta2)?,
                eps: map.get("optim.eps", d.optim.eps)?,
            },
            ema: map.get("ema", d.ema)?,
            batch_images: map.get("batch.images", d.batch_images)?,
            batch_videos: map.get("batch.videos", d.batch_videos)?,
            resolution: ResolutionPlan {
                primary: Resolution {
                    image: map.get("data.image_res", d.resolution.primary.image)?,
                    video_frames: map.get("data.video_frames", d.resolution.primary.video_frames)?,
                    video: map.get("data.video_res", d.resolution.primary.video)?,
                },
                cooldown: Resolution {
                    image: map.get("data.cooldown_image_res", d.resolution.cooldown.image)?,
                    video_frames: map.get("data.cooldown_video_frames", d.resolution.cooldown.video_frames)?,
                    video: map.get("data.cooldown_video_res", d.resolution.cooldown.video)?,
                },
            },
            scene: scene_from_map(map, &d.scene)?,
            seed: map.get("run.seed", d.seed)?,
            checkpoint_every: map.get("run.checkpoint_every", d.checkpoint_every)?,
            eval_every: map.get("run.eval_every", d.eval_every)?,
            sentinel_clips: map.get("run.sentinel_clips", d.sentinel_clips)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Complete key map, defaults included; its hash identifies the run.
    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        model_to_map(&mut m, "model", &self.model);
        let pair = |(a, b): (f64, f64)| format!("{a}, {b}");
        m.set("mask.spatial_scale", pair(self.mask.spatial_scale));
        m.set("mask.temporal_scale", pair(self.mask.temporal_scale));
        m.set("mask.aspect_ratio", pair(self.mask.aspect_ratio));
        m.set("mask.blocks", self.mask.num_blocks);
        m.set("mask.metric", self.mask.metric.name());
        m.set("mask.max_attempts", self.mask.max_attempts);
        m.set("loss.lambda_video", self.loss.lambda_video);
        m.set("loss.lambda_image", self.loss.lambda_image);
        m.set("loss.lambda_warmup", pair(self.loss.warmup));
        m.set("loss.scheme", self.loss.scheme.name());
        m.set("schedule.warmup_steps", self.schedule.warmup_steps);
        m.set("schedule.start_lr", self.schedule.start_lr);
        m.set("schedule.lr", self.schedule.constant_lr);
        m.set("schedule.steps", self.schedule.total_steps);
        m.set("schedule.cooldown_steps", self.schedule.cooldown_steps);
        m.set("schedule.final_lr", self.schedule.final_lr);
        m.set("optim.weight_decay", self.optim.weight_decay);
        m.set("optim.beta1", self.optim.beta1);
        m.set("optim.beta2", self.optim.beta2);
        m.set("optim.eps", self.optim.eps);
        m.set("ema", self.ema);
        m.set("batch.images", self.batch_images);
        m.set("batch.videos", self.batch_videos);
        let r = &self.resolution;
        m.set("data.image_res", r.primary.image);
        m.set("data.video_frames", r.primary.video_frames);
        m.set("data.video_res", r.primary.video);
        m.set("data.cooldown_image_res", r.cooldown.image);
        m.set("data.cooldown_video_frames", r.cooldown.video_frames);
        m.set("data.cooldown_video_res", r.cooldown.video);
        scene_to_map(&mut m, &self.scene);
        m.set("run.seed", self.seed);
        m.set("run.checkpoint_every", self.checkpoint_every);
        m.set("run.eval_every", self.eval_every);
        m.set("run.sentinel_clips", self.sentinel_clips);
        m
    }

    /// The same recipe over `steps` total steps, keeping the warm-up and
    /// cooldown fractions.
    pub fn with_steps(mut self, steps: u64) -> Self {
        let s = &self.schedule;
        let frac = |n: u64| ((n as f64 / s.total_steps.max(1) as f64) * steps as f64).round() as u64;
        let cooldown = if s.cooldown_steps > 0 { frac(s.cooldown_steps).max(1).min(steps) } else { 0 };
        let warmup = frac(s.warmup_steps).min(steps - cooldown);
        self.schedule.total_steps = steps;
        self.schedule.cooldown_steps = cooldown;
        self.schedule.warmup_steps = warmup;
        self
    }

    pub fn hash(&self) -> String {
        self.to_map().hash()
    }

    /// Scene parameters for a canvas of `size` pixels and `frames` frames.
    pub fn scene_at(&self, size: usize, frames: usize) -> SceneSpec {
        scaled_scene(&self.scene, self.resolution.primary.image, size, frames)
    }
}

/// `base` rescaled from a `base_size` canvas to a `size` canvas.
pub fn scaled_scene(base: &SceneSpec, base_size: usize, size: usize, frames: usize) -> SceneSpec {
    let f = size as f64 / base_size as f64;
    SceneSpec {
        width: size,
        height: size,
        frames,
        size: (base.size.0 * f, base.size.1 * f),
        speed: (base.speed.0 * f, base.speed.1 * f),
        ..base.clone()
    }
}

pub fn model_from_map(map: &ConfigMap, prefix: &str, d: &ModelConfig) -> Result<ModelConfig> {
    let k = |s: &str| format!("{prefix}.{s}");
    let depth = map.get(&k("depth"), d.encoder_depth)?;
    let default_levels = if depth == d.encoder_depth {
        d.level_indices.clone()
    } else {
        evenly_spaced_levels(depth, d.levels().min(depth))
    };
    let fusion_hidden: usize = map.get(&k("fusion_hidden"), 0)?;
    let out_dim: usize = map.get(&k("predictor_out_dim"), 0)?;
    let cfg = ModelConfig {
        patch_size: map.get(&k("patch_size"), d.patch_size)?,
        tubelet_size: map.get(&k("tubelet"), d.tubelet_size)?,
        channels: map.get(&k("channels"), d.channels)?,
        embed_dim: map.get(&k("embed_dim"), d.embed_dim)?,
        encoder_depth: depth,
        heads: map.get(&k("heads"), d.heads)?,
        mlp_ratio: map.get(&k("mlp_ratio"), d.mlp_ratio)?,
        predictor_depth: map.get(&k("predictor_depth"), d.predictor_depth)?,
        predictor_dim: map.get(&k("predictor_dim"), d.predictor_dim)?,
        predictor_heads: map.get(&k("predictor_heads"), d.predictor_heads)?,
        level_indices: map.get_list(&k("levels"), &default_levels)?,
        multimodal_tokenizer: map.get_bool(&k("multimodal"), d.multimodal_tokenizer)?,
        rope_base: map.get(&k("rope_base"), d.rope_base)?,
        fusion_hidden: (fusion_hidden > 0).then_some(fusion_hidden).or(d.fusion_hidden),
        predictor_out_dim: (out_dim > 0).then_some(out_dim).or(d.predictor_out_dim),
        ln_eps: map.get(&k("ln_eps"), d.ln_eps)?,
        init_std: map.get(&k("init_std"), d.init_std)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_to_map(m: &mut ConfigMap, prefix: &str, c: &ModelConfig) {
    let k = |s: &str| format!("{prefix}.{s}");
    m.set(&k("patch_size"), c.patch_size);
    m.set(&k("tubelet"), c.tubelet_size);
    m.set(&k("channels"), c.channels);
    m.set(&k("embed_dim"), c.embed_dim);
    m.set(&k("depth"), c.encoder_depth);
    m.set(&k("heads"), c.heads);
    m.set(&k("mlp_ratio"), c.mlp_ratio);
    m.set(&k("predictor_depth"), c.predictor_depth);
    m.set(&k("predictor_dim"), c.predictor_dim);
    m.set(&k("predictor_heads"), c.predictor_heads);
    let levels: Vec<String> = c.level_indices.iter().map(|l| l.to_string()).collect();
    m.set(&k("levels"), levels.join(", "));
    m.set(&k("multimodal"), c.multimodal_tokenizer);
    m.set(&k("rope_base"), c.rope_base);
    m.set(&k("fusion_hidden"), c.fusion_hidden.unwrap_or(0));
    m.set(&k("predictor_out_dim"), c.predictor_out_dim.unwrap_or(0));
    m.set(&k("ln_eps"), c.ln_eps);
    m.set(&k("init_std"), c.init_std);
}

pub fn scene_from_map(map: &ConfigMap, d: &SceneSpec) -> Result<SceneSpec> {
    let objects = map.get_list("data.objects", &[d.objects.0, d.objects.1])?;
    let objects = match objects[..] {
        [a, b] => (a, b),
        _ => return Err(crate::Error::Config("data.objects needs two values".into())),
    };
    Ok(SceneSpec {
        objects,
        size: map.get_pair("data.object_size", d.size)?,
        speed: map.get_pair("data.speed", d.speed)?,
        noise: map.get("data.noise", d.noise)?,
        ..d.clone()
    })
}

pub fn scene_to_map(m: &mut ConfigMap, s: &SceneSpec) {
    m.set("data.objects", format!("{}, {}", s.objects.0, s.objects.1));
    m.set("data.object_size", format!("{}, {}", s.size.0, s.size.1));
    m.set("data.speed", format!("{}, {}", s.speed.0, s.speed.1));
    m.set("data.noise", s.noise);
}
