//! Frozen-backbone probes: linear dense probes, the attentive classifier and
//! predictor rollout.

pub mod attentive;
pub mod features;
pub mod linear;
pub mod rollout;

pub use attentive::{attentive_probe_forward, train_attentive_probe, AttentiveProbe, ClassificationReport};
pub use features::{extract_features, FeatureCache, FeatureLevels};
pub use linear::{fit_linear, linear_probe_train, DenseTask, LinearProbe, LinearProbeReport};
pub use rollout::{rollout_eval, rollout_trials, RolloutReport, RolloutTrials};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    Segmentation,
    Depth,
    Classification,
    Rollout,
}

impl ProbeTask {
    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::Segmentation => "seg",
            ProbeTask::Depth => "depth",
            ProbeTask::Classification => "cls",
            ProbeTask::Rollout => "rollout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(ProbeTask::Segmentation),
            "depth" => Ok(ProbeTask::Depth),
            "cls" | "classification" => Ok(ProbeTask::Classification),
            "rollout" => Ok(ProbeTask::Rollout),
            _ => Err(Error::Config(format!("unknown probe task `{s}`"))),
        }
    }
}

/// Sweep and optimization settings of one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Input resolution in pixels; 0 keeps the data's own size.
    pub resolution: usize,
    pub levels: FeatureLevels,
}

impl ProbeConfig {
    pub fn for_task(task: ProbeTask) -> Self {
        let (lrs, weight_decays, epochs, batch_size) = match task {
            ProbeTask::Segmentation => (vec![1.5e-3, 8e-4, 5e-4], vec![0.01, 1e-4], 100, 256),
            ProbeTask::Depth => (vec![1.5e-3, 1e-3, 8e-4], vec![1e-3, 1e-4], 100, 256),
            ProbeTask::Classification => (vec![2e-3, 1e-3, 5e-4], vec![0.01, 1e-4], 20, 16),
            ProbeTask::Rollout => (Vec::new(), Vec::new(), 0, 1),
        };
        Self {
            task,
            lrs,
            weight_decays,
            epochs,
            batch_size,
            resolution: 0,
            levels: FeatureLevels::Last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == ProbeTask::Rollout {
            return Ok(());
        }
        if self.lrs.is_empty() || self.weight_decays.is_empty() || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("probe needs a non-empty grid, epochs ≥ 1 and batch ≥ 1".into()));
        }
        if self.lrs.iter().chain(&self.weight_decays).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("probe grid values must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Grid cells in row-major order: learning rate outer, decay inner.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        self.lrs
            .iter()
            .flat_map(|&lr| self.weight_decays.iter().map(move |&wd| (lr, wd)))
            .collect()
    }
}

/// Cosine decay from `lr` to zero over `total` updates.
pub fn cosine_lr(lr: f64, update: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let x = update as f64 / (total - 1) as f64;
    0.5 * lr * (1.0 + (std::f64::consts::PI * x).cos())
}

/// One grid cell and its held-out score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub lr: f64,
    pub weight_decay: f64,
    pub metric: f64,
}

/// Text table of grid cells, marking the selected row.
pub fn format_grid(metric_name: &str, cells: &[GridCell], best: usize) -> String {
    let mut s = format!("{:>10} {:>10} {:>10}\n", "lr", "wd", metric_name);
    for (i, c) in cells.iter().enumerate() {
        let mark = if i == best { " *" } else { "" };
        s.push_str(&format!("{:>10.2e} {:>10.2e} {:>10.4}{mark}\n", c.lr, c.weight_decay, c.metric));
    }
    s
}
