use rand::seq::SliceRandom;

use super::{cosine_lr, GridCell, ProbeConfig};
use crate::data::rng::{self, Streams};
use crate::data::synth::Clip;
use crate::dense_eval::metrics::{miou, patch_majority, patch_mean, rmse, upsample_nearest};
use crate::tensor::{adamw_step, AdamWParams, Moments, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenseTask {
    Segmentation { classes: usize },
    Depth,
}

impl DenseTask {
    fn outputs(self) -> usize {
        match self {
            DenseTask::Segmentation { classes } => classes,
            DenseTask::Depth => 1,
        }
    }
}

/// Per-token affine map on standardized features. For depth the target is
/// standardized too and mapped back on prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub task: DenseTask,
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[D, outputs]` row-major.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl LinearProbe {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn raw(&self, row: &[f64], out: &mut [f64]) {
        let c = out.len();
        out.copy_from_slice(&self.b);
        for (j, ((&x, &m), &s)) in row.iter().zip(&self.mean).zip(&self.inv_std).enumerate() {
            let z = (x - m) * s;
            for (o, &w) in out.iter_mut().zip(&self.w[j * c..(j + 1) * c]) {
                *o += z * w;
            }
        }
    }

    /// Regression output of a feature row.
    pub fn regress(&self, row: &[f64]) -> f64 {
        let mut o = [0.0];
        self.raw(row, &mut o);
        o[0] * self.target_std + self.target_mean
    }

    /// Arg-max class of a feature row.
    pub fn classify(&self, row: &[f64]) -> usize {
        let mut o = vec![0.0; self.b.len()];
        self.raw(row, &mut o);
        let mut best = 0;
        for (i, &v) in o.iter().enumerate() {
            if v > o[best] {
                best = i;
            }
        }
        best
    }
}

fn standardize(rows: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() / d;
    let mut mean = vec![0.0; d];
    for r in rows.chunks(d) {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for r in rows.chunks(d) {
        for ((v, &x), &m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let inv_std = var.iter().map(|v| 1.0 / (v / n as f64).sqrt().max(1e-6)).collect();
    (mean, inv_std)
}

/// Trains one affine probe with AdamW and cosine decay. `rows` is `[N, D]`;
/// `targets` holds a class id (as `f64`) or a regression value per row.
#[allow(clippy::too_many_arguments)]
pub fn fit_linear(
    rows: &[f64],
    d: usize,
    targets: &[f64],
    task: DenseTask,
    lr: f64,
    weight_decay: f64,
    epochs: usize,
    batch_size: usize,
    shuffle: &mut impl rand::Rng,
) -> Result<LinearProbe> {
    let n = targets.len();
    if n == 0 || rows.len() != n * d {
        return Err(Error::Input(format!("{} feature values for {n} targets of dimension {d}", rows.len())));
    }
    let (target_mean, target_std) = match task {
        DenseTask::Segmentation { classes } => {
            let first = targets[0];
            if targets.iter().all(|&t| t == first) {
                return Err(Error::Input("segmentation labels contain a single class".into()));
            }
            if targets.iter().any(|&t| t < 0.0 || t as usize >= classes) {
                return Err(Error::Input("segmentation label out of range".into()));
            }
            (0.0, 1.0)
        }
        DenseTask::Depth => {
            let m = targets.iter().sum::<f64>() / n as f64;
            let s = (targets.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n as f64).sqrt();
            if !(s > 0.0) {
                return Err(Error::Input("depth targets are constant".into()));
            }
            (m, s)
        }
    };
    let c = task.outputs();
    let (mean, inv_std) = standardize(rows, d);
    let z: Vec<f64> = rows
        .chunks(d)
        .flat_map(|r| r.iter().zip(&mean).zip(&inv_std).map(|((x, m), s)| (x - m) * s).collect::<Vec<_>>())
        .collect();
    let y: Vec<f64> = targets.iter().map(|t| (t - target_mean) / target_std).collect();
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut mw = Moments::zeros(d * c);
    let mut mb = Moments::zeros(c);
    let batches = n.div_ceil(batch_size);
    let total = epochs * batches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut gw = vec![0.0; d * c];
    let mut gb = vec![0.0; c];
    let mut out = vec![0.0; c];
    let mut update = 0;
    for _ in 0..epochs {
        order.shuffle(shuffle);
        for chunk in order.chunks(batch_size) {
            gw.iter_mut().for_each(|g| *g = 0.0);
            gb.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let zi = &z[i * d..(i + 1) * d];
                out.copy_from_slice(&b);
                for (j, &x) in zi.iter().enumerate() {
                    for (o, &wv) in out.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                        *o += x * wv;
                    }
                }
                // dL/dout
                match task {
                    DenseTask::Depth => out[0] = 2.0 * (out[0] - y[i]),
                    DenseTask::Segmentation { .. } => {
                        let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut s = 0.0;
                        for o in out.iter_mut() {
                            *o = (*o - mx).exp();
                            s += *o;
                        }
                        out.iter_mut().for_each(|o| *o /= s);
                        out[y[i] as usize] -= 1.0;
                    }
                }
                for (g, &o) in gb.iter_mut().zip(&out) {
                    *g += o * inv;
                }
                for (j, &x) in zi.iter().enumerate() {
                    for (g, &o) in gw[j * c..(j + 1) * c].iter_mut().zip(&out) {
                        *g += x * o * inv;
                    }
                }
            }
            let rate = cosine_lr(lr, update, total);
            update += 1;
            let hp = AdamWParams {
                lr: rate,
                weight_decay,
                ..AdamWParams::default()
            };
            adamw_step("probe.w", &mut w, &gw, &mut mw, update as u64, &hp)?;
            let hb = AdamWParams { weight_decay: 0.0, ..hp };
            adamw_step("probe.b", &mut b, &gb, &mut mb, update as u64, &hb)?;
        }
    }
    Ok(LinearProbe {
        task,
        mean,
        inv_std,
        w,
        b,
        target_mean,
        target_std,
    })
}

/// The best probe of a sweep with its held-out metric and the
/// constant-prediction baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeReport {
    pub cells: Vec<GridCell>,
    pub best: usize,
    /// mIoU for segmentation, RMSE for depth; both at pixel resolution.
    pub metric: f64,
    pub baseline: f64,
    pub probe: LinearProbe,
}

impl LinearProbeReport {
    pub fn metric_name(&self) -> &'static str {
        match self.probe.task {
            DenseTask::Segmentation { .. } => "mIoU",
            DenseTask::Depth => "RMSE",
        }
    }

    pub fn table(&self) -> String {
        super::format_grid(self.metric_name(), &self.cells, self.best)
    }
}

fn token_rows(features: &[Tensor<f32>]) -> (Vec<f64>, usize) {
    let d = features.first().map_or(0, |f| f.last_dim());
    (features.iter().flat_map(|f| f.data().iter().map(|&v| v as f64)).collect(), d)
}

fn token_targets(clips: &[Clip], patch: usize, task: DenseTask) -> Vec<f64> {
    clips
        .iter()
        .flat_map(|c| {
            let n = c.frame_pixels();
            match task {
                DenseTask::Segmentation { .. } => patch_majority(&c.class[..n], c.width, c.height, patch)
                    .into_iter()
                    .map(f64::from)
                    .collect::<Vec<_>>(),
                DenseTask::Depth => patch_mean(&c.depth[..n], c.width, c.height, patch)
                    .into_iter()
                    .map(f64::from)
                    .collect(),
            }
        })
        .collect()
}

/// Pixel-level metric of `probe` on frame 0 of each clip, predictions
/// upsampled from patches by nearest assignment.
pub fn evaluate_dense(probe: &LinearProbe, features: &[Tensor<f32>], clips: &[Clip], patch: usize) -> Result<f64> {
    let d = probe.dim();
    let (mut pred_c, mut gt_c, mut pred_d, mut gt_d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (f, c) in features.iter().zip(clips) {
        let (gh, gw) = (c.height / patch, c.width / patch);
        if f.rows() != gh * gw || f.last_dim() != d {
            return Err(Error::Input("features do not match the clip geometry".into()));
        }
        let n = c.frame_pixels();
        let rows: Vec<Vec<f64>> = (0..f.rows()).map(|r| f.row(r).iter().map(|&v| v as f64).collect()).collect();
        match probe.task {
            DenseTask::Segmentation { .. } => {
                let labels: Vec<u8> = rows.iter().map(|r| probe.classify(r) as u8).collect();
                pred_c.extend(upsample_nearest(&labels, gh, gw, patch));
                gt_c.extend_from_slice(&c.class[..n]);
            }
            DenseTask::Depth => {
                let v: Vec<f32> = rows.iter().map(|r| probe.regress(r) as f32).collect();
                pred_d.extend(upsample_nearest(&v, gh, gw, patch));
                gt_d.extend_from_slice(&c.depth[..n]);
            }
        }
    }
    match probe.task {
        DenseTask::Segmentation { classes } => miou(&pred_c, &gt_c, classes),
        DenseTask::Depth => rmse(&pred_d, &gt_d),
    }
}

/// Constant-prediction baseline: the training majority class or mean depth.
pub fn constant_baseline(train: &[Clip], val: &[Clip], patch: usize, task: DenseTask) -> Result<f64> {
    let targets = token_targets(train, patch, task);
    match task {
        DenseTask::Segmentation { classes } => {
            let mut counts = vec![0usize; classes];
            for &t in &targets {
                counts[t as usize] += 1;
            }
            let major = (0..classes).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap_or(0) as u8;
            let gt: Vec<u8> = val.iter().flat_map(|c| c.class[..c.frame_pixels()].to_vec()).collect();
            miou(&vec![major; gt.len()], &gt, classes)
        }
        DenseTask::Depth => {
            let m = (targets.iter().sum::<f64>() / targets.len().max(1) as f64) as f32;
            let gt: Vec<f32> = val.iter().flat_map(|c| c.depth[..c.frame_pixels()].to_vec()).collect();
            rmse(&vec![m; gt.len()], &gt)
        }
    }
}

/// Sweeps the config grid on the training features and reports the cell
/// with the best held-out metric. Each cell shuffles from its own probe
/// stream index.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe_train(
    train_features: &[Tensor<f32>],
    train_clips: &[Clip],
    val_features: &[Tensor<f32>],
    val_clips: &[Clip],
    patch: usize,
    task: DenseTask,
    cfg: &ProbeConfig,
    streams: &Streams,
) -> Result<LinearProbeReport> {
    cfg.validate()?;
    if train_features.len() != train_clips.len() || val_features.len() != val_clips.len() || train_clips.is_empty() {
        return Err(Error::Input("features and clips must pair up and be non-empty".into()));
    }
    let (rows, d) = token_rows(train_features);
    let targets = token_targets(train_clips, patch, task);
    let mut cells = Vec::new();
    let mut best: Option<(usize, LinearProbe)> = None;
    for (i, (lr, wd)) in cfg.grid().into_iter().enumerate() {
        let mut shuffle = streams.get(rng::PROBE, i as u64);
        let probe = fit_linear(&rows, d, &targets, task, lr, wd, cfg.epochs, cfg.batch_size, &mut shuffle)?;
        let metric = evaluate_dense(&probe, val_features, val_clips, patch)?;
        let better = match (&best, task) {
            (None, _) => true,
            (Some((b, _)), DenseTask::Segmentation { .. }) => metric > cells_metric(&cells, *b),
            (Some((b, _)), DenseTask::Depth) => metric < cells_metric(&cells, *b),
        };
        cells.push(GridCell {
            lr,
            weight_decay: wd,
            metric,
        });
        if better {
            best = Some((i, probe));
        }
    }
    let (best, probe) = best.expect("non-empty grid");
    Ok(LinearProbeReport {
        metric: cells[best].metric,
        baseline: constant_baseline(train_clips, val_clips, patch, task)?,
        cells,
        best,
        probe,
    })
}

fn cells_metric(cells: &[GridCell], i: usize) -> f64 {
    cells[i].metric
}
