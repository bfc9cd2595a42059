use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use vjepa_core::ablation::{self, AblationConfig, EvalData, Rung};
use vjepa_core::data::format::write_atomic;
use vjepa_core::data::synth::NUM_CLASSES;
use vjepa_core::data::{write_dataset, read_split, ConfigMap, Streams};
use vjepa_core::model::evenly_spaced_levels;
use vjepa_core::dense_eval::{pca_map, vos_clip, write_mask, write_pca_images, Neighborhood, PropagationParams};
use vjepa_core::probes::{rollout_trials, DenseTask, ProbeTask};
use vjepa_core::tensor::Tensor;
use vjepa_core::trainer::run::teacher_features;
use vjepa_core::trainer::{
    load_checkpoint, run_distillation, run_pretraining, student_model, DistillConfig, FrozenTeacher, PretrainConfig,
    RunOptions,
};
use vjepa_core::{Error, Result};

/// Dense masked latent prediction on synthetic moving shapes.
#[derive(Parser)]
#[command(name = "vjepa", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; each subcommand writes into a subdirectory of it.
    #[arg(long, global = true, env = "VJEPA_OUT", default_value = "runs")]
    out: PathBuf,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic moving-shapes dataset with dense labels.
    GenData {
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 32)]
        val: usize,
        /// Frames per clip; 1 writes images.
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Canvas size in pixels; defaults to the primary image resolution.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Pretrain an encoder, predictor and EMA teacher.
    Pretrain {
        /// Total steps; warm-up and cooldown keep their fractions.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written under the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Distill a frozen pretrained encoder into a smaller student.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Teacher for the cooldown phase.
        #[arg(long)]
        cooldown_teacher: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Probe frozen features of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// seg, depth, cls or rollout.
        #[arg(long)]
        task: String,
        /// Dataset written by gen-data; synthesized from the seed otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 96)]
        train: usize,
        #[arg(long, default_value_t = 48)]
        val: usize,
        #[arg(long)]
        epochs: Option<usize>,
        /// Rollout: visible temporal slices.
        #[arg(long, default_value_t = 2)]
        prefix: usize,
        /// Rollout: slices ahead of the last visible one.
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        /// Rollout: frames per clip.
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Segment videos by label propagation from the first frame.
    Vos {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 4)]
        context: usize,
        #[arg(long, default_value_t = 3.0)]
        radius: f64,
        /// circle or square.
        #[arg(long, default_value = "circle")]
        shape: String,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        /// Write predicted masks as grey-level images.
        #[arg(long)]
        masks: bool,
    },
    /// Render the first three principal components of patch features.
    Pca {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Encode a video clip instead of an image.
        #[arg(long)]
        video: bool,
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Train and probe the recipe ladder, one row per configuration.
    Ablate {
        #[arg(long, default_value_t = 2000)]
        steps: u64,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Comma-separated subset of mask,context,deep,tokenizer.
        #[arg(long)]
        rungs: Option<String>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        probe_epochs: Option<usize>,
        /// Skip the propagation column.
        #[arg(long)]
        no_vos: bool,
    },
}

fn load_config(common: &Common) -> Result<ConfigMap> {
    match &common.config {
        Some(p) => ConfigMap::load(p),
        None => Ok(ConfigMap::new()),
    }
}

/// `base` with the keys of `user` written over it.
fn overlay(base: ConfigMap, user: &ConfigMap) -> ConfigMap {
    let mut m = base;
    for k in user.keys() {
        if let Some(v) = user.raw(k) {
            m.set(k, v);
        }
    }
    m
}

fn pretrain_config(common: &Common, base: PretrainConfig, steps: Option<u64>) -> Result<PretrainConfig> {
    let user = load_config(common)?;
    let mut map = overlay(base.to_map(), &user);
    // a new depth without explicit levels keeps the base's level count
    if user.contains("model.depth") && !user.contains("model.levels") {
        let depth: usize = user.get("model.depth", base.model.encoder_depth)?;
        let levels = evenly_spaced_levels(depth, base.model.levels().min(depth).max(1));
        map.set("model.levels", levels.iter().map(usize::to_string).collect::<Vec<_>>().join(", "));
    }
    let mut cfg = PretrainConfig::from_map(&map)?;
    let unknown: Vec<String> = user.keys().filter(|k| !map_knows(&map, k)).map(str::to_string).collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown configuration keys: {}", unknown.join(", "))));
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = steps {
        cfg = cfg.with_steps(n);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn map_knows(map: &ConfigMap, key: &str) -> bool {
    !map.unread().iter().any(|k| k == key)
}

fn rung_from(name: &str) -> Result<Rung> {
    Ok(match name.trim() {
        "mask" => Rung::MaskOnly,
        "context" => Rung::ContextLoss,
        "deep" => Rung::DeepSupervision,
        "tokenizer" => Rung::ModalityTokenizer,
        other => return Err(Error::Config(format!("unknown rung {other:?}"))),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let seed = common.seed.unwrap_or(0);
    match cli.command {
        Command::GenData {
            train,
            val,
            frames,
            size,
        } => {
            let cfg = pretrain_config(common, PretrainConfig::default(), None)?;
            let spec = cfg.scene_at(size.unwrap_or(cfg.resolution.primary.image), frames);
            let out = common.out.join("data");
            write_dataset(&out, &spec, &Streams::new(cfg.seed), train, val)?;
            println!("wrote {train} train and {val} val clips to {}", out.display());
        }
        Command::Pretrain { steps, resume } => {
            let cfg = pretrain_config(common, PretrainConfig::default(), steps)?;
            let out = common.out.join("pretrain");
            let r = run_pretraining(
                &cfg,
                &RunOptions {
                    out_dir: Some(out.clone()),
                    resume,
                    stop_at: None,
                },
            )?;
            let last = r.records.last().map_or(f64::NAN, |x| x.loss);
            println!(
                "step {} loss {last:.5} min teacher spread ratio {:.3}; checkpoints in {}",
                r.state.step,
                r.min_spread_ratio,
                out.display()
            );
        }
        Command::Distill {
            teacher,
            cooldown_teacher,
            dim,
            depth,
            heads,
            steps,
        } => {
            let t = FrozenTeacher::load(&teacher)?;
            let base = PretrainConfig::from_map(&ConfigMap::parse(&vjepa_core::data::Checkpoint::load(&teacher)?.config_text)?)?;
            let mut cfg = pretrain_config(common, base, steps)?;
            cfg.model = student_model(&t.model, dim, depth, heads);
            let out = common.out.join("distill");
            let r = run_distillation(
                &DistillConfig {
                    student: cfg,
                    teacher,
                    cooldown_teacher,
                },
                &RunOptions {
                    out_dir: Some(out.clone()),
                    ..RunOptions::default()
                },
            )?;
            let last = r.records.last().map_or(f64::NAN, |x| x.loss);
            println!("step {} loss {last:.5}; exported model in {}", r.state.step, out.join("final.bin").display());
        }
        Command::Probe {
            checkpoint,
            task,
            data,
            train,
            val,
            epochs,
            prefix,
            horizon,
            frames,
        } => {
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            let task = ProbeTask::parse(&task)?;
            let mut acfg = AblationConfig::desk(cfg.schedule.total_steps);
            acfg.sizes.train_images = train;
            acfg.sizes.val_images = val;
            acfg.sizes.train_videos = train;
            acfg.sizes.val_videos = val;
            acfg.base = cfg.clone();
            let streams = Streams::new(seed);
            let model = &cfg.model;
            let probe_cfg = |t| {
                let mut p = match t {
                    ProbeTask::Classification => acfg.cls_probe.clone(),
                    ProbeTask::Depth => acfg.depth_probe.clone(),
                    _ => acfg.seg_probe.clone(),
                };
                if let Some(e) = epochs {
                    p.epochs = e;
                }
                p
            };
            let (tr, va) = match &data {
                Some(d) => (read_split(&d.join("train"))?, read_split(&d.join("val"))?),
                None => {
                    let d = EvalData::generate(&acfg, &streams)?;
                    if task == ProbeTask::Classification || task == ProbeTask::Rollout {
                        (d.train_videos, d.val_videos)
                    } else {
                        (d.train_images, d.val_images)
                    }
                }
            };
            match task {
                ProbeTask::Segmentation | ProbeTask::Depth => {
                    let dt = if task == ProbeTask::Depth {
                        DenseTask::Depth
                    } else {
                        DenseTask::Segmentation { classes: NUM_CLASSES }
                    };
                    let r = ablation::probe_dense(model, &state.teacher, &tr, &va, dt, &probe_cfg(task), &streams)?;
                    print!("{}", r.table());
                    println!("{} {:.4} (constant baseline {:.4})", r.metric_name(), r.metric, r.baseline);
                }
                ProbeTask::Classification => {
                    let image = tr[0].frames == 1;
                    let pc = probe_cfg(task);
                    let r = ablation::probe_classification(model, &state.teacher, &tr, &va, image, acfg.probe_heads, &pc, &streams)?;
                    print!("{}", r.table());
                    println!("accuracy {:.4}", r.accuracy);
                }
                ProbeTask::Rollout => {
                    let spec = cfg.scene_at(cfg.resolution.primary.video, frames);
                    let clips = match &data {
                        Some(_) => va,
                        None => vjepa_core::data::generate_split(&spec, &streams, "rollout", val)?,
                    };
                    let inputs = clips.iter().map(|c| c.to_input(false)).collect::<Result<Vec<_>>>()?;
                    let r = rollout_trials(model, &state.student, &state.teacher, &inputs, prefix, horizon)?;
                    println!(
                        "horizon {} trials {} true<control {} ({:.1}%) mean L1 true {:.5} control {:.5}",
                        r.horizon,
                        r.trials,
                        r.wins,
                        100.0 * r.win_rate(),
                        r.mean_true,
                        r.mean_control
                    );
                }
            }
        }
        Command::Vos {
            checkpoint,
            clips,
            frames,
            context,
            radius,
            shape,
            top_k,
            temperature,
            masks,
        } => {
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            let params = PropagationParams {
                context,
                radius,
                shape: Neighborhood::parse(&shape)?,
                top_k,
                temperature,
            };
            params.validate()?;
            let spec = cfg.scene_at(cfg.resolution.primary.video, frames);
            let data = vjepa_core::data::generate_split(&spec, &Streams::new(seed), vjepa_core::data::rng::DATA_VAL, clips)?;
            let out = common.out.join("vos");
            let mut total = 0.0;
            for (i, c) in data.iter().enumerate() {
                let r = vos_clip(&cfg.model, &state.teacher, c, &params)?;
                println!("clip {i}: J {:.4} F {:.4}", r.scores.j, r.scores.f);
                total += r.scores.mean();
                if masks {
                    let labels = c.instance.iter().copied().max().unwrap_or(0) as usize + 1;
                    for (t, m) in r.frames.iter().zip(&r.masks) {
                        fs::create_dir_all(&out)?;
                        write_mask(&out.join(format!("clip{i}_f{t}.pgm")), c.width, c.height, m, labels)?;
                    }
                }
            }
            println!("J&F mean {:.4} over {} clips", total / data.len().max(1) as f64, data.len());
        }
        Command::Pca { checkpoint, video, scale } => {
            let (cfg, state) = load_checkpoint(&checkpoint)?;
            let r = cfg.resolution.primary;
            let spec = if video { cfg.scene_at(r.video, r.video_frames) } else { cfg.scene_at(r.image, 1) };
            let clip = vjepa_core::data::generate_clip(&spec, &mut Streams::new(seed).get(vjepa_core::data::rng::DATA_VAL, 0))?;
            let input = clip.to_input(!video)?;
            let grid = vjepa_core::trainer::step::grid_for(&cfg.model, &input)?;
            let f: Tensor<f64> = teacher_features(&cfg.model, &state.teacher, &input)?.cast();
            let map = pca_map(&f, &grid)?;
            let out = common.out.join("pca");
            let files = write_pca_images(&out, &map, scale)?;
            let v = &map.pca.variances;
            println!("explained variance {:.4e} {:.4e} {:.4e}; {} images in {}", v[0], v[1], v[2], files.len(), out.display());
        }
        Command::Ablate {
            steps,
            seeds,
            rungs,
            train,
            val,
            probe_epochs,
            no_vos,
        } => {
            let mut acfg = AblationConfig::desk(steps);
            acfg.base = pretrain_config(common, acfg.base.clone(), None)?;
            if let Some(n) = train {
                acfg.sizes.train_images = n;
                acfg.sizes.train_videos = n;
            }
            if let Some(n) = val {
                acfg.sizes.val_images = n;
                acfg.sizes.val_videos = n;
            }
            if let Some(e) = probe_epochs {
                acfg.seg_probe.epochs = e;
                acfg.depth_probe.epochs = e;
                acfg.cls_probe.epochs = e;
            }
            if no_vos {
                acfg.vos = None;
            }
            let ladder: Vec<Rung> = match &rungs {
                Some(s) => s.split(',').map(rung_from).collect::<Result<_>>()?,
                None => Rung::ALL.to_vec(),
            };
            let out = common.out.join("ablate");
            let mut results = Vec::new();
            for s in seed..seed + seeds {
                for &rung in &ladder {
                    let dir = out.join(format!("{}-s{s}", rung_slug(rung)));
                    let opts = RunOptions {
                        out_dir: Some(dir),
                        ..RunOptions::default()
                    };
                    let r = ablation::run_rung(&acfg, rung, s, &opts)?;
                    info!("{} seed {s}: {:.0}s", rung.label(), r.seconds);
                    results.push(r);
                }
            }
            let rows = ablation::summarize(&results);
            let table = ablation::format_table(&rows);
            print!("{table}");
            fs::create_dir_all(&out)?;
            write_atomic(&out.join("table.txt"), table.as_bytes())?;
            write_json(&out.join("results.json"), &results)?;
            if let Some(d) = ablation::directional(&rows) {
                println!(
                    "context: seg {:+.2} cls {:+.2}; deep: cls {:+.2} seg kept {:.0}%",
                    100.0 * d.context_seg_gain,
                    100.0 * d.context_cls_change,
                    100.0 * d.deep_cls_change,
                    100.0 * d.deep_seg_retained
                );
            }
        }
    }
    Ok(())
}

fn rung_slug(r: Rung) -> &'static str {
    match r {
        Rung::MaskOnly => "mask",
        Rung::ContextLoss => "context",
        Rung::DeepSupervision => "deep",
        Rung::ModalityTokenizer => "tokenizer",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
