//! Losses, loss weights and schedules.

use crate::masking::MaskSpec;
use crate::model::Modality;
use crate::tensor::{ParamStore, Real, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// How context-token weights are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// `λ_i = λ` for every context token.
    Constant,
    /// `λ_i = λ / sqrt(d_min(i))`.
    DistanceWeighted,
}

impl WeightScheme {
    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Constant => "constant",
            WeightScheme::DistanceWeighted => "distance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "distance" => Ok(Self::DistanceWeighted),
            other => Err(Error::Config(format!("unknown weighting scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_video: f64,
    pub lambda_image: f64,
    /// `(start, end)` of the linear λ ramp as fractions of the total steps.
    pub warmup: (f64, f64),
    pub scheme: WeightScheme,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_video: 0.5,
            lambda_image: 0.7,
            warmup: (0.37, 0.74),
            scheme: WeightScheme::DistanceWeighted,
        }
    }
}

impl LossWeights {
    /// Pure masked prediction, no context term.
    pub fn mask_only() -> Self {
        Self {
            lambda_video: 0.0,
            lambda_image: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.warmup;
        if self.lambda_video < 0.0 || self.lambda_image < 0.0 {
            return Err(Error::Config("λ must be non-negative".into()));
        }
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Config(format!("λ warm-up window {a}..{b} must satisfy 0 <= start < end <= 1")));
        }
        Ok(())
    }

    pub fn lambda(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Image => self.lambda_image,
            Modality::Video => self.lambda_video,
        }
    }

    /// Warm-up factor in `[0, 1]`: 0 before the window, linear inside, 1 after.
    pub fn ramp(&self, step: u64, total_steps: u64) -> f64 {
        if total_steps == 0 {
            return 1.0;
        }
        let x = step as f64 / total_steps as f64;
        let (a, b) = self.warmup;
        ((x - a) / (b - a)).clamp(0.0, 1.0)
    }

    /// Per-context-token weight for `spec`, in `spec.context` order.
    pub fn token_weights(&self, spec: &MaskSpec, modality: Modality, ramp: f64) -> Result<Vec<f64>> {
        let base = self.lambda(modality);
        spec.d_min
            .iter()
            .map(|&d| match self.scheme {
                WeightScheme::Constant => Ok(ramp * base),
                WeightScheme::DistanceWeighted => lambda_weight(d, base, ramp),
            })
            .collect()
    }
}

/// `ramp · λ / sqrt(d_min)`.
pub fn lambda_weight(d_min: u32, lambda_base: f64, ramp: f64) -> Result<f64> {
    if d_min == 0 {
        return Err(Error::Input("d_min = 0 belongs to a masked token".into()));
    }
    Ok(ramp * lambda_base / (d_min as f64).sqrt())
}

fn check_pairs<T: Real>(tape: &Tape<T>, preds: &[Var], targets: &[Var]) -> Result<()> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Input(format!(
            "{} prediction levels against {} target levels",
            preds.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|&t| tape.requires_grad(t)) {
        return Err(Error::Input("targets must be detached from the graph".into()));
    }
    Ok(())
}

/// Mean over levels of the mean (over rows) per-token L1 distance, where
/// the per-token distance is the channel mean of `|p − t|`. Row `r` of
/// every prediction is compared with row `r` of the matching target.
pub fn prediction_loss<T: Real>(tape: &mut Tape<T>, preds: &[Var], targets: &[Var]) -> Result<Var> {
    check_pairs(tape, preds, targets)?;
    let terms = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| tape.mean_l1(p, t))
        .collect::<std::result::Result<Vec<_>, TensorError>>()?;
    Ok(level_mean(tape, &terms)?)
}

/// `(1/|C|) Σ_i λ_i · L1_i`, averaged over levels.
pub fn context_loss<T: Real>(tape: &mut Tape<T>, preds: &[Var], targets: &[Var], weights: &[f64]) -> Result<Var> {
    check_pairs(tape, preds, targets)?;
    let w: Vec<T> = weights.iter().map(|&x| T::c(x)).collect();
    let terms = preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| tape.weighted_mean_l1(p, t, &w))
        .collect::<std::result::Result<Vec<_>, TensorError>>()?;
    Ok(level_mean(tape, &terms)?)
}

fn level_mean<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> std::result::Result<Var, TensorError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::one() / T::c(terms.len() as f64)))
}

/// The three scalars of one sample's dense loss.
#[derive(Debug, Clone, Copy)]
pub struct DenseLoss {
    pub total: Var,
    pub predict: Var,
    pub context: Option<Var>,
}

/// Dense loss of one sample.
///
/// `outputs` are the predictor maps (context rows first, then one row per
/// masked token in `spec.masked` order); `teacher` holds the matching
/// full-grid target levels. The context term is skipped when every weight
/// is zero, which leaves the value unchanged and saves the node.
pub fn dense_loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &[Var],
    teacher: &[Var],
    spec: &MaskSpec,
    context_weights: &[f64],
) -> Result<DenseLoss> {
    if spec.masked.is_empty() {
        return Err(Error::Input("prediction loss needs at least one masked token".into()));
    }
    if context_weights.len() != spec.context.len() {
        return Err(Error::Input("one context weight per context token required".into()));
    }
    let n_c = spec.context.len();
    let n_m = spec.masked.len();
    let mut p_mask = Vec::with_capacity(outputs.len());
    let mut t_mask = Vec::with_capacity(outputs.len());
    for (&o, &t) in outputs.iter().zip(teacher) {
        if tape.shape(o)[0] != n_c + n_m {
            return Err(Error::Input(format!(
                "prediction has {} rows, expected {}",
                tape.shape(o)[0],
                n_c + n_m
            )));
        }
        p_mask.push(tape.slice(o, 0, n_c, n_m)?);
        t_mask.push(tape.gather_rows(t, &spec.masked)?);
    }
    let predict = prediction_loss(tape, &p_mask, &t_mask)?;
    if context_weights.iter().all(|&w| w == 0.0) {
        return Ok(DenseLoss {
            total: predict,
            predict,
            context: None,
        });
    }
    let mut p_ctx = Vec::with_capacity(outputs.len());
    let mut t_ctx = Vec::with_capacity(outputs.len());
    for (&o, &t) in outputs.iter().zip(teacher) {
        p_ctx.push(tape.slice(o, 0, 0, n_c)?);
        t_ctx.push(tape.gather_rows(t, &spec.context)?);
    }
    let context = context_loss(tape, &p_ctx, &t_ctx, context_weights)?;
    let total = tape.add(predict, context)?;
    Ok(DenseLoss {
        total,
        predict,
        context: Some(context),
    })
}

/// `θ̄ ← m·θ̄ + (1 − m)·θ` for every tensor of `teacher`, matched by name.
pub fn ema_update<T: Real>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA coefficient {m} outside [0, 1]")));
    }
    let keep = T::c(m);
    let take = T::c(1.0 - m);
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        if s.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ema_update",
                lhs: t.shape().to_vec(),
                rhs: s.shape().to_vec(),
            }
            .into());
        }
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = keep * *a + take * b;
        }
    }
    Ok(())
}

/// Mean over channels of the per-channel standard deviation across tokens.
pub fn feature_spread<T: Real>(features: &Tensor<T>) -> f64 {
    let n = features.rows();
    let d = features.last_dim();
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| features.row(r)[c].as_f64()).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (features.row(r)[c].as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Learning-rate schedule: linear warm-up from `start_lr`, constant at
/// `constant_lr`, then a linear cooldown to `final_lr` over the last
/// `cooldown_steps` of `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub start_lr: f64,
    pub constant_lr: f64,
    pub total_steps: u64,
    pub cooldown_steps: u64,
    pub final_lr: f64,
}

impl Schedule {
    pub fn reference() -> Self {
        Self {
            warmup_steps: 12_000,
            start_lr: 1e-4,
            constant_lr: 5.25e-4,
            total_steps: 147_000,
            cooldown_steps: 12_000,
            final_lr: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps + self.cooldown_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warm-up {} plus cooldown {} exceed {} total steps",
                self.warmup_steps, self.cooldown_steps, self.total_steps
            )));
        }
        if [self.start_lr, self.constant_lr, self.final_lr].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// First step of the cooldown phase.
    pub fn cooldown_start(&self) -> u64 {
        self.total_steps - self.cooldown_steps
    }

    pub fn in_cooldown(&self, step: u64) -> bool {
        self.cooldown_steps > 0 && step >= self.cooldown_start()
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Input(format!("step {step} beyond {} total steps", self.total_steps)));
        }
        let lerp = |a: f64, b: f64, num: u64, den: u64| a + (b - a) * num as f64 / den as f64;
        Ok(if step < self.warmup_steps {
            lerp(self.start_lr, self.constant_lr, step, self.warmup_steps)
        } else if !self.in_cooldown(step) {
            self.constant_lr
        } else {
            lerp(self.constant_lr, self.final_lr, step - self.cooldown_start(), self.cooldown_steps)
        })
    }
}

/// Input sizes of one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub image: usize,
    pub video_frames: usize,
    pub video: usize,
}

/// Primary and cooldown input sizes; the switch happens once, at the first
/// cooldown step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolutionPlan {
    pub primary: Resolution,
    pub cooldown: Resolution,
}

impl ResolutionPlan {
    pub fn reference() -> Self {
        Self {
            primary: Resolution {
                image: 256,
                video_frames: 16,
                video: 256,
            },
            cooldown: Resolution {
                image: 512,
                video_frames: 64,
                video: 384,
            },
        }
    }

    pub fn resolution_at(&self, step: u64, schedule: &Schedule) -> Result<Resolution> {
        if step > schedule.total_steps {
            return Err(Error::Input(format!("step {step} beyond {} total steps", schedule.total_steps)));
        }
        Ok(if schedule.in_cooldown(step) {
            self.cooldown
        } else {
            self.primary
        })
    }
}
