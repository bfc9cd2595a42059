//! Distillation from a frozen pretrained encoder into a smaller student.
//!
//! The student state reuses [`TrainState`]: its `teacher` field holds the
//! Polyak average of the student encoder, which is the exported model. The
//! frozen target encoder lives apart in [`FrozenTeacher`] and is never
//! written to.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::run::{teacher_features, RunOptions, StepRecord};
use super::step::{apply_update, make_batch, Sample, StepStats};
use super::{PretrainConfig, TrainState};
use crate::data::{Checkpoint, ConfigMap, Streams};
use crate::model::rope::NATIVE;
use crate::model::{encode, fuse_levels, predict, tokenize, ModelConfig};
use crate::objective::{dense_loss, ema_update};
use crate::tensor::{ParamStore, Real, Tape};
use crate::{Error, Result};

/// A pretrained encoder used only to produce targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTeacher {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub config_hash: String,
}

impl FrozenTeacher {
    /// Loads the EMA encoder of a pretraining checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let cfg = PretrainConfig::from_map(&ConfigMap::parse(&ck.config_text)?)?;
        let shapes: Vec<_> = cfg
            .model
            .param_shapes()
            .into_iter()
            .filter(|(n, _)| ModelConfig::is_encoder_param(n))
            .collect();
        let section = ck.section("teacher")?;
        crate::data::checkpoint::check_names("teacher", section, &shapes)?;
        let mut params = ParamStore::new();
        for (n, _) in &shapes {
            params.insert(n.clone(), section.get(n)?.clone());
        }
        Ok(Self {
            model: cfg.model,
            params,
            config_hash: ck.config_hash,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    /// Student recipe: architecture, masking, loss weights, schedule,
    /// batch and data. `student.ema` is the Polyak coefficient.
    pub student: PretrainConfig,
    pub teacher: PathBuf,
    /// Teacher for the cooldown phase. When set, the student encoder is
    /// reset to its running average at the switch.
    pub cooldown_teacher: Option<PathBuf>,
}

/// Student architecture for `teacher`: one output level, a fresh predictor
/// half as deep as the encoder but never deeper than the teacher's, and a
/// head projecting to the teacher's width.
pub fn student_model(teacher: &ModelConfig, embed_dim: usize, depth: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        embed_dim,
        encoder_depth: depth,
        heads,
        predictor_depth: (depth / 2).min(teacher.predictor_depth).max(1),
        predictor_dim: embed_dim,
        predictor_heads: heads,
        level_indices: vec![depth],
        predictor_out_dim: Some(teacher.embed_dim),
        fusion_hidden: None,
        ..teacher.clone()
    }
}

/// Checks that `student` can be trained against `teacher`.
pub fn check_compatible(student: &ModelConfig, teacher: &ModelConfig) -> Result<()> {
    if student.patch_size != teacher.patch_size
        || student.tubelet_size != teacher.tubelet_size
        || student.channels != teacher.channels
    {
        return Err(Error::Config(format!(
            "student patches {}x{}x{} do not match teacher patches {}x{}x{}",
            student.tubelet_size,
            student.patch_size,
            student.patch_size,
            teacher.tubelet_size,
            teacher.patch_size,
            teacher.patch_size
        )));
    }
    if student.levels() != 1 {
        return Err(Error::Config("distillation trains the last level only".into()));
    }
    if student.out_dim() != teacher.embed_dim {
        return Err(Error::Config(format!(
            "predictor output width {} differs from teacher width {}",
            student.out_dim(),
            teacher.embed_dim
        )));
    }
    Ok(())
}

fn distill_gradients(
    cfg: &PretrainConfig,
    student: &ParamStore<f32>,
    teacher: &FrozenTeacher,
    batch: &[Sample],
    ramp: f64,
) -> Result<(Vec<Vec<f32>>, f64, f64, f64)> {
    let model = &cfg.model;
    let mut acc: Vec<Vec<f32>> = student.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let scale = 1.0 / batch.len().max(1) as f32;
    let (mut total, mut pred, mut ctx) = (0.0, 0.0, 0.0);
    for sample in batch {
        let target = teacher_features(&teacher.model, &teacher.params, &sample.input)?;
        let spec = &sample.mask;
        if target.rows() != spec.grid.len() {
            return Err(Error::Config("teacher and student token grids differ".into()));
        }
        let mut tape = Tape::new();
        let s = student.bind(&mut tape, true);
        let target = tape.constant(target);
        let (tok, grid) = tokenize(&mut tape, &s, model, &sample.input)?;
        let enc = encode(&mut tape, &s, model, tok, &grid, Some(&spec.context), NATIVE)?;
        let fused = fuse_levels(&mut tape, &s, &enc)?;
        let cp: Vec<_> = spec.context.iter().map(|&i| grid.coord(i)).collect();
        let mp: Vec<_> = spec.masked.iter().map(|&i| grid.coord(i)).collect();
        let outs = predict(&mut tape, &s, model, fused, &cp, &mp, sample.modality(), NATIVE)?;
        let w = cfg.loss.token_weights(spec, sample.modality(), ramp)?;
        let dl = dense_loss(&mut tape, &outs, &[target], spec, &w)?;
        let n = batch.len() as f64;
        let l = tape.scalar(dl.total).as_f64();
        total += l / n;
        pred += tape.scalar(dl.predict).as_f64() / n;
        ctx += dl.context.map_or(0.0, |c| tape.scalar(c).as_f64()) / n;
        if !l.is_finite() {
            continue;
        }
        let grads = tape.backward(dl.total)?;
        for (a, g) in acc.iter_mut().zip(s.collect_grads(&grads)) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y * scale;
            }
        }
    }
    Ok((acc, total, pred, ctx))
}

/// Mean distillation loss of `batch` without updating anything.
pub fn distill_loss(
    cfg: &PretrainConfig,
    student: &ParamStore<f32>,
    teacher: &FrozenTeacher,
    batch: &[Sample],
    ramp: f64,
) -> Result<f64> {
    check_compatible(&cfg.model, &teacher.model)?;
    Ok(distill_gradients(cfg, student, teacher, batch, ramp)?.1)
}

/// One student update against `teacher`, then the Polyak average.
pub fn distill_step(
    cfg: &PretrainConfig,
    state: &mut TrainState<f32>,
    teacher: &FrozenTeacher,
    batch: &[Sample],
) -> Result<StepStats> {
    check_compatible(&cfg.model, &teacher.model)?;
    let step = state.step;
    let lr = cfg.schedule.lr_at(step.min(cfg.schedule.total_steps))?;
    let ramp = cfg.loss.ramp(step, cfg.schedule.total_steps);
    let (grads, loss, predict, context) = distill_gradients(cfg, &state.student, teacher, batch, ramp)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, last_good: None });
    }
    apply_update(&mut state.student, &mut state.moments, &grads, step, &cfg.optim, lr)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema)?;
    state.step += 1;
    let images = batch.iter().filter(|s| s.modality() == crate::model::Modality::Image).count();
    Ok(StepStats {
        step,
        loss,
        predict,
        context,
        lr,
        lambda_ramp: ramp,
        images,
        videos: batch.len() - images,
    })
}

impl DistillConfig {
    /// Student config map plus the teacher checkpoints it depends on.
    pub fn to_map(&self, teachers: &[&FrozenTeacher]) -> ConfigMap {
        let mut m = self.student.to_map();
        for (i, t) in teachers.iter().enumerate() {
            m.set(&format!("distill.teacher{i}"), &t.config_hash);
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub state: TrainState<f32>,
    pub records: Vec<StepRecord>,
    /// Exported model: the averaged student encoder.
    pub exported: ParamStore<f32>,
}

/// Runs distillation over the student's schedule. Writes `metrics.jsonl`
/// and `final.bin` (whose `teacher` section is the exported encoder) when
/// an output directory is given.
pub fn run_distillation(cfg: &DistillConfig, opts: &RunOptions) -> Result<DistillOutput> {
    let sc = &cfg.student;
    sc.validate()?;
    let first = FrozenTeacher::load(&cfg.teacher)?;
    check_compatible(&sc.model, &first.model)?;
    let second = cfg.cooldown_teacher.as_deref().map(FrozenTeacher::load).transpose()?;
    if let Some(t) = &second {
        check_compatible(&sc.model, &t.model)?;
    }
    let mut used = vec![&first];
    used.extend(second.as_ref());
    let map = cfg.to_map(&used);
    let mut state = TrainState::<f32>::init(&sc.model, sc.seed, map.hash())?;
    let streams = Streams::new(sc.seed);
    let end = opts.stop_at.unwrap_or(sc.schedule.total_steps).min(sc.schedule.total_steps);

    let mut metrics = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        crate::data::format::write_atomic(&dir.join("config.txt"), map.serialize().as_bytes())?;
        metrics = Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?));
    }
    let mut records = Vec::new();
    while state.step < end {
        let step = state.step;
        let cooldown = sc.schedule.in_cooldown(step);
        let teacher = match (&second, cooldown) {
            (Some(t), true) => t,
            _ => &first,
        };
        if second.is_some() && cooldown && step == sc.schedule.cooldown_start() {
            for (name, t) in state.teacher.iter() {
                *state.student.get_mut(name)? = t.clone();
            }
        }
        let batch = make_batch(sc, &streams, step)?;
        let stats = distill_step(sc, &mut state, teacher, &batch)?;
        let rec = StepRecord {
            step: stats.step,
            phase: if cooldown { "cooldown" } else { "primary" },
            loss: stats.loss,
            predict: stats.predict,
            context: stats.context,
            lr: stats.lr,
            lambda_ramp: stats.lambda_ramp,
            ema: sc.ema,
            images: stats.images,
            videos: stats.videos,
            teacher_spread: None,
            spread_ratio: None,
        };
        if let Some(w) = metrics.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        records.push(rec);
    }
    if let Some(dir) = &opts.out_dir {
        state.save(&map, &dir.join("final.bin"))?;
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    Ok(DistillOutput {
        exported: state.teacher.clone(),
        state,
        records,
    })
}
