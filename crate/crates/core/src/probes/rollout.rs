use crate::model::rope::NATIVE;
use crate::model::{encode, fuse_levels, predict, tokenize, Modality, ModelConfig, VisualInput};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::{Error, Result};

/// Mean L1 error of predicted future features, per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub horizons: Vec<usize>,
    /// Against the teacher encoding of the same clip.
    pub true_error: Vec<f64>,
    /// Against the teacher encoding of a different clip, when given.
    pub control_error: Option<Vec<f64>>,
}

fn last_level(model: &ModelConfig, teacher: &ParamStore<f32>, input: &VisualInput) -> Result<Tensor<f32>> {
    crate::trainer::run::teacher_features(model, teacher, input)
}

fn l1_rows(pred: &Tensor<f32>, rows: std::ops::Range<usize>, target: &Tensor<f32>, idx: &[usize]) -> f64 {
    let d = target.last_dim();
    let mut s = 0.0f64;
    for (r, &i) in rows.zip(idx) {
        for (a, b) in pred.row(r).iter().zip(target.row(i)) {
            s += (a - b).abs() as f64;
        }
    }
    s / (idx.len() * d) as f64
}

/// Encodes the first `prefix` temporal slices of `clip` with the student,
/// asks the predictor for slice `prefix − 1 + h` and compares with the
/// teacher's features there. Horizon 0 scores the visible tokens themselves.
pub fn rollout_eval(
    model: &ModelConfig,
    student: &ParamStore<f32>,
    teacher: &ParamStore<f32>,
    clip: &VisualInput,
    prefix: usize,
    horizons: &[usize],
    control: Option<&VisualInput>,
) -> Result<RolloutReport> {
    if clip.modality != Modality::Video {
        return Err(Error::Input("rollout needs a video clip".into()));
    }
    if model.out_dim() != model.embed_dim {
        return Err(Error::Config("rollout compares predictor outputs with teacher features of the same width".into()));
    }
    let target = last_level(model, teacher, clip)?;
    let control_target = control.map(|c| last_level(model, teacher, c)).transpose()?;
    if let Some(c) = &control_target {
        if c.shape() != target.shape() {
            return Err(Error::Input("control clip has a different token grid".into()));
        }
    }
    let mut true_error = Vec::with_capacity(horizons.len());
    let mut control_error = control_target.as_ref().map(|_| Vec::with_capacity(horizons.len()));
    for &h in horizons {
        let mut tape = Tape::new();
        let b = student.bind(&mut tape, false);
        let (tok, grid) = tokenize(&mut tape, &b, model, clip)?;
        if prefix == 0 || prefix > grid.t || prefix - 1 + h >= grid.t {
            return Err(Error::Input(format!(
                "horizon {h} after a {prefix}-slice prefix exceeds the clip's {} slices",
                grid.t
            )));
        }
        let per = grid.h * grid.w;
        let visible: Vec<usize> = (0..prefix * per).collect();
        let future: Vec<usize> = if h == 0 {
            Vec::new()
        } else {
            let t = prefix - 1 + h;
            (t * per..(t + 1) * per).collect()
        };
        let ctx = encode(&mut tape, &b, model, tok, &grid, Some(&visible), NATIVE)?;
        let fused = fuse_levels(&mut tape, &b, &ctx)?;
        let cp: Vec<_> = visible.iter().map(|&i| grid.coord(i)).collect();
        let mp: Vec<_> = future.iter().map(|&i| grid.coord(i)).collect();
        let outs = predict(&mut tape, &b, model, fused, &cp, &mp, Modality::Video, NATIVE)?;
        let pred = tape.value(*outs.last().expect("at least one head"));
        let (rows, idx) = if h == 0 {
            (0..visible.len(), visible.as_slice())
        } else {
            (visible.len()..visible.len() + future.len(), future.as_slice())
        };
        true_error.push(l1_rows(pred, rows.clone(), &target, idx));
        if let (Some(errs), Some(c)) = (control_error.as_mut(), &control_target) {
            errs.push(l1_rows(pred, rows, c, idx));
        }
    }
    Ok(RolloutReport {
        horizons: horizons.to_vec(),
        true_error,
        control_error,
    })
}

/// Outcome of paired rollout trials at one horizon.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RolloutTrials {
    pub horizon: usize,
    pub trials: usize,
    /// Trials where the true future was predicted better than the control.
    pub wins: usize,
    pub mean_true: f64,
    pub mean_control: f64,
}

impl RolloutTrials {
    pub fn win_rate(&self) -> f64 {
        self.wins as f64 / self.trials.max(1) as f64
    }
}

/// Trial `i` predicts clip `i` and uses clip `i + 1` (cyclically) as the
/// shuffled-future control.
pub fn rollout_trials(
    model: &ModelConfig,
    student: &ParamStore<f32>,
    teacher: &ParamStore<f32>,
    clips: &[VisualInput],
    prefix: usize,
    horizon: usize,
) -> Result<RolloutTrials> {
    if clips.len() < 2 {
        return Err(Error::Input("rollout trials need at least two clips".into()));
    }
    let (mut wins, mut st, mut sc) = (0, 0.0, 0.0);
    for (i, clip) in clips.iter().enumerate() {
        let control = &clips[(i + 1) % clips.len()];
        let r = rollout_eval(model, student, teacher, clip, prefix, &[horizon], Some(control))?;
        let t = r.true_error[0];
        let c = r.control_error.expect("control given")[0];
        wins += usize::from(t < c);
        st += t;
        sc += c;
    }
    let n = clips.len();
    Ok(RolloutTrials {
        horizon,
        trials: n,
        wins,
        mean_true: st / n as f64,
        mean_control: sc / n as f64,
    })
}
