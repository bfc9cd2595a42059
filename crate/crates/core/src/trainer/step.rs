use super::{PretrainConfig, TrainState};
use crate::data::{generate_clip, rng, Streams};
use crate::masking::{sample_mask, MaskSpec};
use crate::model::rope::NATIVE;
use crate::model::{encode, fuse_levels, predict, tokenize, Modality, ModelConfig, PatchGrid, VisualInput};
use crate::objective::{dense_loss, ema_update, LossWeights};
use crate::tensor::{adamw_step, AdamWParams, Binding, Gradients, ParamStore, Real, Tape, TensorError};
use crate::{Error, Result};

/// One training sample with its mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: VisualInput,
    pub mask: MaskSpec,
}

impl Sample {
    pub fn modality(&self) -> Modality {
        self.input.modality
    }
}

/// Token grid the model will produce for `input`.
pub fn grid_for(model: &ModelConfig, input: &VisualInput) -> Result<PatchGrid> {
    match input.modality {
        Modality::Image => PatchGrid::for_image(input.height, input.width, model.patch_size),
        Modality::Video => PatchGrid::for_video(
            input.frames,
            input.height,
            input.width,
            model.patch_size,
            model.tubelet_size,
        ),
    }
}

/// The samples of `step`: images first, then videos. Sample `j` of step
/// `s` draws its scene from data stream `s·B + j` and its mask from mask
/// stream `s·B + j`.
pub fn make_batch(cfg: &PretrainConfig, streams: &Streams, step: u64) -> Result<Vec<Sample>> {
    let res = cfg.resolution.resolution_at(step.min(cfg.schedule.total_steps), &cfg.schedule)?;
    let per = cfg.per_step() as u64;
    let image_scene = cfg.scene_at(res.image, 1);
    let video_scene = cfg.scene_at(res.video, res.video_frames);
    (0..cfg.per_step())
        .map(|j| {
            let index = step * per + j as u64;
            let is_image = j < cfg.batch_images;
            let spec = if is_image { &image_scene } else { &video_scene };
            let clip = generate_clip(spec, &mut streams.get(rng::DATA_PRETRAIN, index))?;
            let input = clip.to_input(is_image)?;
            let grid = grid_for(&cfg.model, &input)?;
            let mask = sample_mask(&grid, &cfg.mask, &mut streams.get(rng::MASKS, index))?;
            Ok(Sample { input, mask })
        })
        .collect()
}

/// Builds one sample's dense loss on `tape`. Targets are the teacher's
/// levels over the full token set, detached.
pub fn sample_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &ModelConfig,
    student: &Binding<T>,
    teacher: &Binding<T>,
    sample: &Sample,
    weights: &LossWeights,
    ramp: f64,
) -> Result<crate::objective::DenseLoss> {
    let spec = &sample.mask;
    let (t_tok, grid) = tokenize(tape, teacher, model, &sample.input)?;
    if grid != spec.grid {
        return Err(Error::Input("mask grid does not match the sample".into()));
    }
    let targets = encode(tape, teacher, model, t_tok, &grid, None, NATIVE)?;
    let targets: Vec<_> = targets.levels.iter().map(|&v| tape.detach(v)).collect();

    let (s_tok, _) = tokenize(tape, student, model, &sample.input)?;
    let ctx = encode(tape, student, model, s_tok, &grid, Some(&spec.context), NATIVE)?;
    let fused = fuse_levels(tape, student, &ctx)?;
    let ctx_pos: Vec<_> = spec.context.iter().map(|&i| grid.coord(i)).collect();
    let mask_pos: Vec<_> = spec.masked.iter().map(|&i| grid.coord(i)).collect();
    let outputs = predict(tape, student, model, fused, &ctx_pos, &mask_pos, sample.modality(), NATIVE)?;
    let w = weights.token_weights(spec, sample.modality(), ramp)?;
    dense_loss(tape, &outputs, &targets, spec, &w)
}

/// Per-sample scalars of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub predict: f64,
    pub context: f64,
}

/// Mean gradient of a group of samples, one vector per student tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardGrads<T> {
    pub grads: Vec<Vec<T>>,
    pub samples: usize,
    pub losses: Vec<LossParts>,
}

/// Gradients of the mean dense loss over `samples`. Also asserts that no
/// gradient reached the teacher.
pub fn shard_gradients<T: Real>(
    model: &ModelConfig,
    student: &ParamStore<T>,
    teacher: &ParamStore<T>,
    samples: &[Sample],
    weights: &LossWeights,
    ramp: f64,
) -> Result<ShardGrads<T>> {
    let mut acc: Vec<Vec<T>> = student.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
    let mut losses = Vec::with_capacity(samples.len());
    let scale = if samples.is_empty() {
        T::zero()
    } else {
        T::one() / T::c(samples.len() as f64)
    };
    for sample in samples {
        let mut tape = Tape::new();
        let s = student.bind(&mut tape, true);
        let t = teacher.bind(&mut tape, true);
        let dl = sample_loss(&mut tape, model, &s, &t, sample, weights, ramp)?;
        let parts = LossParts {
            total: tape.scalar(dl.total).as_f64(),
            predict: tape.scalar(dl.predict).as_f64(),
            context: dl.context.map_or(0.0, |c| tape.scalar(c).as_f64()),
        };
        losses.push(parts);
        if !parts.total.is_finite() {
            continue;
        }
        let grads = tape.backward(dl.total)?;
        assert_teacher_untouched(&t, &grads)?;
        for (a, g) in acc.iter_mut().zip(s.collect_grads(&grads)) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y * scale;
            }
        }
    }
    Ok(ShardGrads {
        grads: acc,
        samples: samples.len(),
        losses,
    })
}

fn assert_teacher_untouched<T: Real>(teacher: &Binding<T>, grads: &Gradients<T>) -> Result<()> {
    let m = teacher.max_abs_grad(grads);
    if m != T::zero() {
        return Err(Error::Input(format!("teacher received a gradient of magnitude {m}")));
    }
    Ok(())
}

/// Sample-count-weighted combination of per-shard mean gradients, equal to
/// the mean gradient of the combined batch. A missing shard (zero samples)
/// contributes nothing.
pub fn aggregate_modality_grads<T: Real>(
    image: &[Vec<T>],
    video: &[Vec<T>],
    n_image: usize,
    n_video: usize,
) -> Result<Vec<Vec<T>>> {
    let total = n_image + n_video;
    if total == 0 {
        return Err(Error::Input("no samples to aggregate".into()));
    }
    if n_image == 0 {
        return Ok(video.to_vec());
    }
    if n_video == 0 {
        return Ok(image.to_vec());
    }
    if image.len() != video.len() {
        return Err(TensorError::ShapeMismatch {
            op: "aggregate_modality_grads",
            lhs: vec![image.len()],
            rhs: vec![video.len()],
        }
        .into());
    }
    let wi = T::c(n_image as f64 / total as f64);
    let wv = T::c(n_video as f64 / total as f64);
    image
        .iter()
        .zip(video)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "aggregate_modality_grads",
                    lhs: vec![a.len()],
                    rhs: vec![b.len()],
                }
                .into());
            }
            Ok(a.iter().zip(b).map(|(&x, &y)| wi * x + wv * y).collect())
        })
        .collect()
}

/// Scalars reported for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub predict: f64,
    pub context: f64,
    pub lr: f64,
    pub lambda_ramp: f64,
    pub images: usize,
    pub videos: usize,
}

/// Weight decay applies to matrices only, not to gains, biases or
/// embedding vectors.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2 && !shape.contains(&1)
}

/// Applies one AdamW update at `lr` to every student tensor.
pub fn apply_update<T: Real>(
    store: &mut ParamStore<T>,
    moments: &mut [crate::tensor::Moments<T>],
    grads: &[Vec<T>],
    step: u64,
    base: &AdamWParams,
    lr: f64,
) -> Result<()> {
    for (((name, p), m), g) in store.iter_mut().zip(moments.iter_mut()).zip(grads) {
        let hp = AdamWParams {
            lr,
            weight_decay: if decays(p.shape()) { base.weight_decay } else { 0.0 },
            ..*base
        };
        adamw_step(name, p.data_mut(), g, m, step + 1, &hp)?;
    }
    Ok(())
}

/// One optimizer step on `batch`: image shard and video shard gradients
/// (in that order), aggregation, AdamW, then the EMA teacher update.
pub fn pretrain_step<T: Real>(
    cfg: &PretrainConfig,
    state: &mut TrainState<T>,
    batch: &[Sample],
) -> Result<StepStats> {
    let step = state.step;
    let lr = cfg.schedule.lr_at(step.min(cfg.schedule.total_steps))?;
    let ramp = cfg.loss.ramp(step, cfg.schedule.total_steps);
    let (images, videos): (Vec<Sample>, Vec<Sample>) =
        batch.iter().cloned().partition(|s| s.modality() == Modality::Image);
    let gi = shard_gradients(&cfg.model, &state.student, &state.teacher, &images, &cfg.loss, ramp)?;
    let gv = shard_gradients(&cfg.model, &state.student, &state.teacher, &videos, &cfg.loss, ramp)?;
    let n = (gi.samples + gv.samples) as f64;
    let mut parts = LossParts::default();
    for l in gi.losses.iter().chain(&gv.losses) {
        parts.total += l.total / n;
        parts.predict += l.predict / n;
        parts.context += l.context / n;
    }
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss { step, last_good: None });
    }
    let grads = aggregate_modality_grads(&gi.grads, &gv.grads, gi.samples, gv.samples)?;
    apply_update(&mut state.student, &mut state.moments, &grads, step, &cfg.optim, lr)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema)?;
    state.step += 1;
    Ok(StepStats {
        step,
        loss: parts.total,
        predict: parts.predict,
        context: parts.context,
        lr,
        lambda_ramp: ramp,
        images: gi.samples,
        videos: gv.samples,
    })
}

/// Mean dense loss of `batch` under the current state, without updating.
pub fn evaluate_loss<T: Real>(cfg: &PretrainConfig, state: &TrainState<T>, batch: &[Sample], ramp: f64) -> Result<f64> {
    let mut total = 0.0;
    for sample in batch {
        let mut tape = Tape::new();
        let s = state.student.bind(&mut tape, false);
        let t = state.teacher.bind(&mut tape, false);
        let dl = sample_loss(&mut tape, &cfg.model, &s, &t, sample, &cfg.loss, ramp)?;
        total += tape.scalar(dl.total).as_f64();
    }
    Ok(total / batch.len().max(1) as f64)
}
