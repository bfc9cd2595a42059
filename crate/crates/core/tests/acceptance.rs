//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 12 train the desk ladder and take most of the runtime.
//! `VJEPA_ACCEPTANCE_QUICK=1` skips them (and criterion 12 depends on a
//! model from 6). The process exits nonzero only when a deterministic
//! criterion fails; the two empirical ones are reported as measured.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vjepa_core::ablation::{directional, format_table, summarize, train_and_probe, AblationConfig, Rung};
use vjepa_core::data::{generate_split, Checkpoint, SceneSpec, Streams};
use vjepa_core::dense_eval::{principal_components, propagate_labels, Neighborhood, PropagationParams};
use vjepa_core::masking::{sample_mask, DistanceMetric, MaskParams, MaskSpec};
use vjepa_core::model::rope::{rope_apply, ResolutionScale, NATIVE};
use vjepa_core::model::{evenly_spaced_levels, Coord, ModelConfig, PatchGrid};
use vjepa_core::objective::{
    context_loss, ema_update, lambda_weight, prediction_loss, Resolution, ResolutionPlan, Schedule,
};
use vjepa_core::probes::rollout_trials;
use vjepa_core::tensor::gradcheck::check;
use vjepa_core::tensor::{ParamStore, RopeTable, Tape, Tensor, Var};
use vjepa_core::trainer::step::{aggregate_modality_grads, sample_loss, shard_gradients};
use vjepa_core::trainer::{
    make_batch, pretrain_step, run_distillation, run_pretraining, scaled_scene, student_model, DistillConfig,
    FrozenTeacher, PretrainConfig, RunOptions, RunOutput, TrainState,
};

type Outcome = Result<(bool, String), String>;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Property,
    Empirical,
}

#[derive(Default)]
struct Tally {
    pass: usize,
    fail: usize,
    skip: usize,
    hard_fail: bool,
}

impl Tally {
    fn run(&mut self, id: u32, name: &str, kind: Kind, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let res = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match res {
            Ok((true, d)) => {
                self.pass += 1;
                ("PASS", d)
            }
            Ok((false, d)) => {
                self.fail += 1;
                self.hard_fail |= kind == Kind::Property;
                ("FAIL", d)
            }
            Err(e) => {
                self.fail += 1;
                self.hard_fail |= kind == Kind::Property;
                ("FAIL", format!("error: {e}"))
            }
        };
        println!("[{tag}] {id:>2} {name}: {detail} ({secs:.1}s)");
    }

    fn skip(&mut self, id: u32, name: &str, why: &str) {
        self.skip += 1;
        println!("[SKIP] {id:>2} {name}: {why}");
    }
}

thread_local! {
    /// Sentinel minima of every training run made here, by label.
    static SPREADS: RefCell<Vec<(String, f64)>> = const { RefCell::new(Vec::new()) };
}

fn record_spread(label: &str, ratio: f64) {
    SPREADS.with(|s| s.borrow_mut().push((label.to_string(), ratio)));
}

fn pretrain(label: &str, cfg: &PretrainConfig, opts: &RunOptions) -> Result<RunOutput, String> {
    let out = run_pretraining(cfg, opts).map_err(|e| e.to_string())?;
    record_spread(label, out.min_spread_ratio);
    Ok(out)
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn tiny(total: u64, cooldown: u64) -> PretrainConfig {
    let res = Resolution {
        image: 16,
        video_frames: 4,
        video: 16,
    };
    PretrainConfig {
        model: ModelConfig {
            patch_size: 4,
            embed_dim: 24,
            encoder_depth: 2,
            heads: 2,
            predictor_depth: 1,
            predictor_dim: 24,
            predictor_heads: 2,
            level_indices: evenly_spaced_levels(2, 2),
            ..ModelConfig::default()
        },
        schedule: Schedule {
            warmup_steps: total / 10,
            start_lr: 1e-4,
            constant_lr: 1e-3,
            total_steps: total,
            cooldown_steps: cooldown,
            final_lr: 1e-6,
        },
        batch_images: 2,
        batch_videos: 1,
        resolution: ResolutionPlan {
            primary: res,
            cooldown: Resolution { image: 24, ..res },
        },
        scene: scaled_scene(&SceneSpec::default(), 32, 16, 1),
        checkpoint_every: 0,
        eval_every: 10,
        sentinel_clips: 2,
        ..PretrainConfig::default()
    }
}

// ---------------------------------------------------------------- 1

type Built = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> vjepa_core::tensor::Result<Var>>;

fn rope_table(rng: &mut ChaCha8Rng, tokens: usize, pairs: usize) -> RopeTable<f64> {
    let angles: Vec<f64> = (0..tokens * pairs).map(|_| rng.random_range(-3.0..3.0)).collect();
    RopeTable {
        tokens,
        pairs,
        cos: angles.iter().map(|a| a.cos()).collect(),
        sin: angles.iter().map(|a| a.sin()).collect(),
    }
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t6 = rope_table(&mut rng, 3, 4);
    let t4 = rope_table(&mut rng, 3, 2);
    let ops: Vec<(&str, Vec<Vec<usize>>, Built)> = vec![
        ("matmul", vec![vec![4, 5], vec![5, 3]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add/broadcast", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![vec![3, 4], vec![4]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul/broadcast", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("gelu", vec![vec![3, 5]], Box::new(|t, v| Ok(t.gelu(v[0])))),
        ("softmax/1", vec![vec![3, 5]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax/0", vec![vec![3, 5]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5))),
        ("concat", vec![vec![2, 3], vec![2, 4]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![vec![4, 6]], Box::new(|t, v| t.slice(v[0], 1, 2, 3))),
        ("reshape", vec![vec![4, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 8]))),
        ("transpose", vec![vec![4, 6]], Box::new(|t, v| t.transpose(v[0]))),
        ("gather_rows", vec![vec![4, 3]], Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1]))),
        ("rope", vec![vec![3, 16]], Box::new(move |t, v| t.rope(v[0], &t6))),
        ("rope/1head", vec![vec![3, 4]], Box::new(move |t, v| t.rope(v[0], &t4))),
        ("attention", vec![vec![3, 8], vec![5, 8], vec![5, 8]], Box::new(|t, v| t.attention(v[0], v[1], v[2], 2))),
        ("sum", vec![vec![4, 3]], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![vec![4, 3]], Box::new(|t, v| Ok(t.mean(v[0])))),
        (
            "weighted_mean_l1",
            vec![vec![3, 4], vec![3, 4]],
            Box::new(|t, v| t.weighted_mean_l1(v[0], v[1], &[0.5, 1.0, 0.25])),
        ),
        ("mean_l1", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mean_l1(v[0], v[1]))),
        ("mse", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("cross_entropy", vec![vec![3, 4]], Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 1]))),
        (
            "block",
            vec![vec![4, 8], vec![8, 8], vec![8], vec![8]],
            Box::new(|t, v| {
                let n = t.layernorm(v[0], v[2], v[3], 1e-5)?;
                let h = t.matmul(n, v[1])?;
                let a = t.attention(h, h, h, 2)?;
                let g = t.gelu(a);
                t.add(g, v[0])
            }),
        ),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    let mut instances = 0;
    for (name, shapes, f) in &ops {
        for trial in 0..10u64 {
            let mut inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
                .collect();
            // |a - b| has a kink at 0; keep differences clear of the probe step
            if name.contains("l1") {
                let a = inputs[0].data().to_vec();
                for (b, x) in inputs[1].data_mut().iter_mut().zip(a) {
                    if (*b - x).abs() < 1e-3 {
                        *b = x + 1e-2;
                    }
                }
            }
            let r = check(&inputs, 1e-5, trial, f).map_err(e)?;
            instances += 1;
            if r.max_rel_err > worst.0 {
                worst = (r.max_rel_err, name);
            }
        }
    }
    Ok((
        worst.0 < 1e-4,
        format!(
            "{} ops x 10 instances ({instances}), max rel err {:.2e} on {} (tol 1e-4)",
            ops.len(),
            worst.0,
            worst.1
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn naive_l1_rows(p: &[f64], t: &[f64], d: usize) -> Vec<f64> {
    p.chunks(d)
        .zip(t.chunks(d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / d as f64)
        .collect()
}

fn formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        // weight
        let d = rng.random_range(1..40u32);
        let lam = rng.random_range(0.0..1.0);
        let ramp = rng.random_range(0.0..1.0);
        let got = lambda_weight(d, lam, ramp).map_err(e)?;
        let want = ramp * lam * (d as f64).powf(-0.5);
        worst[0] = worst[0].max((got - want).abs());

        // dense terms, several levels
        let levels = rng.random_range(1..4);
        let rows = rng.random_range(1..9);
        let dim = rng.random_range(1..7);
        let mut tape = Tape::<f64>::new();
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..levels {
            let p: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            preds.push(tape.param(Tensor::new(vec![rows, dim], p.clone()).map_err(e)?));
            targets.push(tape.constant(Tensor::new(vec![rows, dim], t.clone()).map_err(e)?));
            raw.push((p, t));
        }
        let dmins: Vec<u32> = (0..rows).map(|_| rng.random_range(1..10)).collect();
        let weights: Vec<f64> = dmins.iter().map(|&d| ramp * lam / (d as f64).sqrt()).collect();
        let pl = prediction_loss(&mut tape, &preds, &targets).map_err(e)?;
        let cl = context_loss(&mut tape, &preds, &targets, &weights).map_err(e)?;
        let mut want_p = 0.0;
        let mut want_c = 0.0;
        for (p, t) in &raw {
            let per = naive_l1_rows(p, t, dim);
            want_p += per.iter().sum::<f64>() / rows as f64;
            want_c += per.iter().zip(&weights).map(|(l, w)| l * w).sum::<f64>() / rows as f64;
        }
        want_p /= levels as f64;
        want_c /= levels as f64;
        worst[1] = worst[1].max((tape.scalar(pl) - want_p).abs());
        worst[2] = worst[2].max((tape.scalar(cl) - want_c).abs());

        // average
        let m = 0.99925;
        let mut teacher = ParamStore::<f64>::new();
        let mut student = ParamStore::<f64>::new();
        for k in 0..3 {
            let n = rng.random_range(1..20);
            teacher.insert(format!("w{k}"), Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0)));
            student.insert(format!("w{k}"), Tensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0)));
        }
        let before = teacher.clone();
        ema_update(&mut teacher, &student, m).map_err(e)?;
        for (name, t) in teacher.iter() {
            let old = before.get(name).map_err(e)?.data();
            let s = student.get(name).map_err(e)?.data();
            for ((&got, &o), &sv) in t.data().iter().zip(old).zip(s) {
                worst[3] = worst[3].max((got - (o * m + sv * (1.0 - m))).abs());
            }
        }
    }
    let ok = worst.iter().all(|&w| w < 1e-6);
    Ok((
        ok,
        format!(
            "100 instances, max abs err weight {:.1e}, prediction {:.1e}, context {:.1e}, average {:.1e} (tol 1e-6)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn metric_dist(metric: DistanceMetric, a: Coord, b: Coord) -> u32 {
    let d: Vec<u32> = (0..3).map(|i| (a[i] as i64 - b[i] as i64).unsigned_abs() as u32).collect();
    match metric {
        DistanceMetric::Chebyshev => *d.iter().max().unwrap(),
        DistanceMetric::Manhattan => d.iter().sum(),
    }
}

fn block_violation(spec: &MaskSpec, p: &MaskParams) -> Option<String> {
    let g = spec.grid;
    let dims = [g.t, g.h, g.w];
    let hw = (g.h * g.w) as f64;
    let (smin, smax) = p.spatial_scale;
    let (amin, amax) = p.aspect_ratio;
    let mut union = vec![false; g.len()];
    for b in &spec.blocks {
        let [rt, rh, rw] = b.requested.map(|x| x as f64);
        // rounding of sqrt(area·ar) and sqrt(area/ar) moves each side by ≤ 0.5
        let lo = (rh - 0.5) * (rw - 0.5) / hw;
        let hi = (rh + 0.5) * (rw + 0.5) / hw;
        if lo > smax + 1e-12 || hi < smin - 1e-12 {
            return Some(format!("block area {rh}x{rw} outside scale range"));
        }
        if (rh - 0.5) / (rw + 0.5) > amax + 1e-12 || (rh + 0.5) / (rw - 0.5) < amin - 1e-12 {
            return Some(format!("block {rh}x{rw} outside aspect range"));
        }
        let t_lo = (p.temporal_scale.0 * g.t as f64).round().max(1.0);
        let t_hi = (p.temporal_scale.1 * g.t as f64).round().max(1.0);
        if rt < t_lo || rt > t_hi {
            return Some(format!("block length {rt} outside temporal range"));
        }
        for a in 0..3 {
            if b.extent[a] != b.requested[a].min(dims[a]) || b.origin[a] + b.extent[a] > dims[a] {
                return Some("block leaves the grid or is clamped wrongly".into());
            }
        }
        let frac = (b.extent[1] * b.extent[2]) as f64 / hw;
        if frac > hi + 1e-12 {
            return Some(format!("realized block fraction {frac} above its request"));
        }
        for t in b.origin[0]..b.origin[0] + b.extent[0] {
            for h in b.origin[1]..b.origin[1] + b.extent[1] {
                for w in b.origin[2]..b.origin[2] + b.extent[2] {
                    union[g.index([t, h, w])] = true;
                }
            }
        }
    }
    let masked: Vec<usize> = (0..g.len()).filter(|&i| union[i]).collect();
    let context: Vec<usize> = (0..g.len()).filter(|&i| !union[i]).collect();
    if masked != spec.masked || context != spec.context {
        return Some("masked/context sets differ from the union of blocks".into());
    }
    if spec.d_min.len() != spec.context.len() || spec.d_min.contains(&0) {
        return Some("context distances missing or zero".into());
    }
    None
}

fn mask_geometry() -> Outcome {
    let params = MaskParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let grids = [PatchGrid::new(8, 16, 16), PatchGrid::new(1, 16, 16), PatchGrid::new(8, 14, 14)];
    let mut frac = 0.0;
    let mut clamped = 0usize;
    for i in 0..10_000 {
        let grid = grids[i % grids.len()];
        let spec = sample_mask(&grid, &params, &mut rng).map_err(e)?;
        if spec.masked.is_empty() || spec.context.is_empty() || spec.masked.len() + spec.context.len() != grid.len() {
            return Ok((false, format!("mask {i} is not a partition")));
        }
        let all: BTreeSet<usize> = spec.masked.iter().chain(&spec.context).copied().collect();
        if all.len() != grid.len() {
            return Ok((false, format!("mask {i} has overlapping sets")));
        }
        if spec.blocks.len() != params.num_blocks {
            return Ok((false, format!("mask {i} has {} blocks", spec.blocks.len())));
        }
        if let Some(v) = block_violation(&spec, &params) {
            return Ok((false, format!("mask {i}: {v}")));
        }
        clamped += spec.blocks.iter().filter(|b| b.was_clamped()).count();
        frac += spec.masked.len() as f64 / grid.len() as f64;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(304);
    let mut compared = 0;
    for inst in 0..100 {
        let grid = PatchGrid::new(rng.random_range(1..4), rng.random_range(1..7), rng.random_range(2..7));
        let density = rng.random_range(0.05..0.6);
        let mut masked: Vec<usize> = (0..grid.len()).filter(|_| rng.random_bool(density)).collect();
        if masked.is_empty() {
            masked.push(rng.random_range(0..grid.len()));
        }
        if masked.len() == grid.len() {
            masked.pop();
        }
        let metric = if inst % 2 == 0 {
            DistanceMetric::Chebyshev
        } else {
            DistanceMetric::Manhattan
        };
        let spec = MaskSpec::from_masked(grid, &masked, metric).map_err(e)?;
        for (&c, &d) in spec.context.iter().zip(&spec.d_min) {
            let brute = masked.iter().map(|&m| metric_dist(metric, grid.coord(c), grid.coord(m))).min().unwrap();
            if brute != d {
                return Ok((false, format!("grid {inst}: token {c} has d_min {d}, brute force {brute}")));
            }
            compared += 1;
        }
    }
    Ok((
        true,
        format!(
            "10000 masks valid (mean masked fraction {:.3}, {clamped} clamped blocks); d_min exact on 100 grids ({compared} tokens)",
            frac / 10_000.0
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn frozen_contracts(dir: &Path) -> Outcome {
    // every sample of every step, teacher bound as trainable leaves
    let cfg = tiny(12, 2);
    let streams = Streams::new(4);
    let mut st = TrainState::<f64>::init(&cfg.model, 4, cfg.hash()).map_err(e)?;
    let mut checked = 0;
    for step in 0..cfg.schedule.total_steps {
        let batch = make_batch(&cfg, &streams, step).map_err(e)?;
        let ramp = cfg.loss.ramp(step, cfg.schedule.total_steps);
        for sample in &batch {
            let mut tape = Tape::new();
            let s = st.student.bind(&mut tape, true);
            let t = st.teacher.bind(&mut tape, true);
            let dl = sample_loss(&mut tape, &cfg.model, &s, &t, sample, &cfg.loss, ramp).map_err(e)?;
            let grads = tape.backward(dl.total).map_err(e)?;
            for &v in t.vars() {
                if let Some(g) = grads.get(v) {
                    if g.iter().any(|&x| x != 0.0) {
                        return Ok((false, format!("teacher gradient at step {step}")));
                    }
                }
            }
            let student_moved = s.vars().iter().any(|&v| grads.get(v).is_some_and(|g| g.iter().any(|&x| x != 0.0)));
            if !student_moved {
                return Ok((false, format!("student received no gradient at step {step}")));
            }
            checked += 1;
        }
        pretrain_step(&cfg, &mut st, &batch).map_err(e)?;
    }

    // distillation against a saved checkpoint, both phases
    let tcfg = tiny(30, 3);
    let tdir = dir.join("teacher");
    pretrain(
        "frozen/teacher",
        &tcfg,
        &RunOptions {
            out_dir: Some(tdir.clone()),
            ..RunOptions::default()
        },
    )?;
    let path = tdir.join("final.bin");
    let bytes = fs::read(&path).map_err(e)?;
    let before = FrozenTeacher::load(&path).map_err(e)?;
    let mut student = tiny(40, 4);
    student.model = student_model(&before.model, 24, 2, 2);
    student.ema = 0.99;
    let out = run_distillation(
        &DistillConfig {
            student,
            teacher: path.clone(),
            cooldown_teacher: Some(path.clone()),
        },
        &RunOptions {
            out_dir: Some(dir.join("student")),
            ..RunOptions::default()
        },
    )
    .map_err(e)?;
    let after = FrozenTeacher::load(&path).map_err(e)?;
    let same_bytes = fs::read(&path).map_err(e)? == bytes;
    let same_bits = before
        .params
        .iter()
        .zip(after.params.iter())
        .all(|((na, a), (nb, b))| na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    Ok((
        same_bytes && same_bits,
        format!(
            "{checked} samples over {} steps with exactly zero teacher gradient; distillation teacher unchanged after {} steps (bytes {same_bytes}, bits {same_bits})",
            cfg.schedule.total_steps,
            out.records.len()
        ),
    ))
}

// ---------------------------------------------------------------- 5

fn head_logits(q: &Tensor<f64>, k: &Tensor<f64>, heads: usize) -> Vec<f64> {
    let hd = q.last_dim() / heads;
    (0..heads)
        .map(|h| (0..hd).map(|i| q.data()[h * hd + i] * k.data()[h * hd + i]).sum())
        .collect()
}

fn rotated(x: &Tensor<f64>, heads: usize, pos: Coord, base: f64, scale: ResolutionScale) -> Result<Tensor<f64>, String> {
    rope_apply(x, heads, &[pos], base, scale).map_err(e)
}

fn rotary_property() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let base = ModelConfig::default().rope_base;
    let mut worst_shift: f64 = 0.0;
    let mut worst_interp: f64 = 0.0;
    let mut worst_scaled_shift: f64 = 0.0;
    for trial in 0..300 {
        let (heads, dim) = [(2, 32), (4, 64), (1, 12), (3, 72)][trial % 4];
        let q = Tensor::from_fn(&[1, dim], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[1, dim], |_| rng.random_range(-1.0..1.0));
        let p1: Coord = [rng.random_range(0..8), rng.random_range(0..16), rng.random_range(0..16)];
        let p2: Coord = [rng.random_range(0..8), rng.random_range(0..16), rng.random_range(0..16)];
        // one axis at a time, then all three
        let mut delta = [0usize; 3];
        match trial % 4 {
            a @ 0..=2 => delta[a] = rng.random_range(1..32),
            _ => delta = [rng.random_range(1..32), rng.random_range(1..32), rng.random_range(1..32)],
        }
        let shift = |p: Coord| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
        let a = head_logits(&rotated(&q, heads, p1, base, NATIVE)?, &rotated(&k, heads, p2, base, NATIVE)?, heads);
        let b = head_logits(
            &rotated(&q, heads, shift(p1), base, NATIVE)?,
            &rotated(&k, heads, shift(p2), base, NATIVE)?,
            heads,
        );
        for (x, y) in a.iter().zip(&b) {
            worst_shift = worst_shift.max((x - y).abs());
        }

        // positions s·p at scale s land on the native angles of p
        let s = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let scale = s.map(|x| x as f64);
        let up = |p: Coord| [p[0] * s[0], p[1] * s[1], p[2] * s[2]];
        let native = rotated(&q, heads, p1, base, NATIVE)?;
        let interp = rotated(&q, heads, up(p1), base, scale)?;
        for (x, y) in native.data().iter().zip(interp.data()) {
            worst_interp = worst_interp.max((x - y).abs());
        }
        let c = head_logits(&rotated(&q, heads, p1, base, scale)?, &rotated(&k, heads, p2, base, scale)?, heads);
        let d = head_logits(
            &rotated(&q, heads, shift(p1), base, scale)?,
            &rotated(&k, heads, shift(p2), base, scale)?,
            heads,
        );
        for (x, y) in c.iter().zip(&d) {
            worst_scaled_shift = worst_scaled_shift.max((x - y).abs());
        }
    }
    let ok = worst_shift < 1e-5 && worst_interp < 1e-5 && worst_scaled_shift < 1e-5;
    Ok((
        ok,
        format!(
            "300 q/k pairs: translation {worst_shift:.1e}, interpolation {worst_interp:.1e}, translation at scale {worst_scaled_shift:.1e} (tol 1e-5)"
        ),
    ))
}

// ---------------------------------------------------------------- 6, 12

struct Ladder {
    rows: Vec<vjepa_core::ablation::RungResult>,
    deep_seed0: Option<(PretrainConfig, TrainState<f32>)>,
}

fn ladder(steps: u64, seeds: u64) -> Result<Ladder, String> {
    let mut cfg = AblationConfig::desk(steps);
    cfg.vos = None;
    let mut rows = Vec::new();
    let mut deep_seed0 = None;
    for seed in 0..seeds {
        for rung in [Rung::MaskOnly, Rung::ContextLoss, Rung::DeepSupervision] {
            let (r, pc, st) = train_and_probe(&cfg, rung, seed, &RunOptions::default()).map_err(e)?;
            record_spread(&format!("{} s{seed}", rung.label()), r.min_spread_ratio);
            println!(
                "       {} seed {seed}: seg {:.2} cls {:.2}/{:.2} loss {:.4} ({:.0}s)",
                rung.label(),
                100.0 * r.scores.seg_miou,
                100.0 * r.scores.cls_image,
                100.0 * r.scores.cls_video,
                r.final_loss,
                r.seconds
            );
            if rung == Rung::DeepSupervision && seed == 0 {
                deep_seed0 = Some((pc, st));
            }
            rows.push(r);
        }
    }
    Ok(Ladder { rows, deep_seed0 })
}

fn directional_check(ladder: &Ladder, secs: f64) -> Outcome {
    let summary = summarize(&ladder.rows);
    for line in format_table(&summary).lines() {
        println!("       {line}");
    }
    let d = directional(&summary).ok_or("ladder rows missing")?;
    let fast = secs < 30.0 * 60.0;
    Ok((
        d.context_holds && d.deep_holds && fast,
        format!(
            "(a) seg gain {:+.2} pts (need >= +3), cls change {:+.2} pts (need < 0): {}; (b) deep cls vs mask-only {:+.2} pts (need >= -1), seg gain kept {:.0}% (need >= 80%): {}; {:.1} min (need < 30)",
            100.0 * d.context_seg_gain,
            100.0 * d.context_cls_change,
            if d.context_holds { "holds" } else { "not reproduced" },
            100.0 * d.deep_cls_change,
            100.0 * d.deep_seg_retained,
            if d.deep_holds { "holds" } else { "not reproduced" },
            secs / 60.0
        ),
    ))
}

fn rollout_control(cfg: &PretrainConfig, st: &TrainState<f32>) -> Outcome {
    let scene = SceneSpec {
        frames: 8,
        ..cfg.scene.clone()
    };
    let clips = generate_split(&scene, &Streams::new(cfg.seed), "rollout", 100).map_err(e)?;
    let inputs = clips.iter().map(|c| c.to_input(false)).collect::<Result<Vec<_>, _>>().map_err(e)?;
    let r = rollout_trials(&cfg.model, &st.student, &st.teacher, &inputs, 2, 1).map_err(e)?;
    Ok((
        r.win_rate() >= 0.9,
        format!(
            "{}/{} trials true < control ({:.0}%, need >= 90%), mean L1 true {:.4} control {:.4}",
            r.wins,
            r.trials,
            100.0 * r.win_rate(),
            r.mean_true,
            r.mean_control
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn collapse_sentinel() -> Outcome {
    let runs = SPREADS.with(|s| s.borrow().clone());
    if runs.is_empty() {
        return Err("no training runs recorded".into());
    }
    let (label, worst) = runs.iter().min_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    Ok((
        worst > 0.01,
        format!("{} runs, lowest spread ratio {worst:.3} ({label}), need > 0.01", runs.len()),
    ))
}

// ---------------------------------------------------------------- 8

fn unit_rows(f: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..f.rows())
        .map(|r| {
            let row = f.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
        })
        .collect()
}

/// Every frame's soft labels from the full affinity of query patches to
/// the allowed source patches, neighbourhood and top-k applied in-line.
fn brute_propagation(
    frames: &[Tensor<f64>],
    gh: usize,
    gw: usize,
    first: &[u8],
    labels: usize,
    p: &PropagationParams,
) -> Vec<Vec<f64>> {
    let n = gh * gw;
    let feats: Vec<Vec<Vec<f64>>> = frames.iter().map(unit_rows).collect();
    let mut fields = vec![vec![0.0; n * labels]];
    for (i, &l) in first.iter().enumerate() {
        fields[0][i * labels + l as usize] = 1.0;
    }
    for t in 1..frames.len() {
        let mut sources = vec![0];
        for s in 1..t {
            if t - s <= p.context {
                sources.push(s);
            }
        }
        let mut out = vec![0.0; n * labels];
        for q in 0..n {
            let mut cands = Vec::new();
            for &s in &sources {
                for j in 0..n {
                    let dy = (j / gw) as f64 - (q / gw) as f64;
                    let dx = (j % gw) as f64 - (q % gw) as f64;
                    let inside = match p.shape {
                        Neighborhood::Circle => (dy * dy + dx * dx).sqrt() <= p.radius,
                        Neighborhood::Square => dy.abs() <= p.radius && dx.abs() <= p.radius,
                    };
                    if inside {
                        let sim: f64 = feats[t][q].iter().zip(&feats[s][j]).map(|(a, b)| a * b).sum();
                        cands.push((sim, s, j));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0));
            cands.truncate(p.top_k);
            let top = cands[0].0;
            let z: f64 = cands.iter().map(|c| ((c.0 - top) / p.temperature).exp()).sum();
            for &(sim, s, j) in &cands {
                let w = ((sim - top) / p.temperature).exp() / z;
                for l in 0..labels {
                    out[q * labels + l] += w * fields[s][j * labels + l];
                }
            }
        }
        fields.push(out);
    }
    fields
}

fn argmax_rows(field: &[f64], labels: usize) -> Vec<u8> {
    field
        .chunks(labels)
        .map(|r| {
            let mut best = 0;
            for l in 1..labels {
                if r[l] > r[best] {
                    best = l;
                }
            }
            best as u8
        })
        .collect()
}

fn propagation_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let (gh, gw, d) = (rng.random_range(2..5), rng.random_range(2..5), rng.random_range(2..6));
        let frames_n = rng.random_range(2..6);
        let labels = rng.random_range(2..4);
        let frames: Vec<Tensor<f64>> = (0..frames_n)
            .map(|_| Tensor::from_fn(&[gh * gw, d], |_| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut first: Vec<u8> = (0..gh * gw).map(|_| rng.random_range(0..labels as u8)).collect();
        first[0] = 1;
        let params = if inst % 2 == 0 {
            PropagationParams::dense(rng.random_range(1..4), rng.random_range(0.05..1.0))
        } else {
            PropagationParams {
                context: rng.random_range(1..4),
                radius: rng.random_range(1.0..3.0),
                shape: if inst % 4 == 1 { Neighborhood::Circle } else { Neighborhood::Square },
                top_k: rng.random_range(1..6),
                temperature: rng.random_range(0.05..1.0),
            }
        };
        let got = propagate_labels(&frames, gh, gw, &first, labels, &params).map_err(e)?;
        let want = brute_propagation(&frames, gh, gw, &first, labels, &params);
        for t in 0..frames_n {
            if got.hard(t) != argmax_rows(&want[t], labels) {
                return Ok((false, format!("instance {inst} frame {t}: hard labels differ")));
            }
            for (a, b) in got.fields[t].iter().zip(&want[t]) {
                worst = worst.max((a - b).abs());
            }
        }
    }

    // identical frames
    let (gh, gw) = (6, 6);
    let frame = Tensor::from_fn(&[gh * gw, 32], |_| rng.sample::<f64, _>(StandardNormal));
    let first: Vec<u8> = (0..gh * gw).map(|i| ((i % gw) / 2 + (i / gw) % 2) as u8 % 3).collect();
    let frames = vec![frame; 10];
    let params = PropagationParams {
        context: 4,
        radius: 3.0,
        temperature: 0.05,
        ..PropagationParams::reference()
    };
    let got = propagate_labels(&frames, gh, gw, &first, 3, &params).map_err(e)?;
    let mut j_min: f64 = 1.0;
    for t in 0..frames.len() {
        let hard = got.hard(t);
        for l in 1..3u8 {
            let inter = hard.iter().zip(&first).filter(|(a, b)| **a == l && **b == l).count();
            let union = hard.iter().zip(&first).filter(|(a, b)| **a == l || **b == l).count();
            if union > 0 {
                j_min = j_min.min(inter as f64 / union as f64);
            }
        }
    }
    Ok((
        worst < 1e-12 && j_min == 1.0,
        format!("20 instances, hard labels identical, soft max diff {worst:.1e}; identical frames J = {j_min:.3}"),
    ))
}

// ---------------------------------------------------------------- 9

fn pca_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut worst_rec: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    let mut ordered = true;
    for _ in 0..10 {
        let d = rng.random_range(6..24);
        let n = rng.random_range(40..200);
        // orthonormal planted basis by Gram-Schmidt
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 3 {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let spread = [4.0, 2.0, 0.7];
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let s: Vec<f64> = spread.iter().map(|&a| a * rng.sample::<f64, _>(StandardNormal)).collect();
            for c in 0..d {
                data.push(mean[c] + (0..3).map(|k| s[k] * basis[k][c]).sum::<f64>());
            }
        }
        let x = Tensor::new(vec![n, d], data).map_err(e)?;
        let pca = principal_components(&x, 3).map_err(e)?;
        for r in 0..n {
            let back = pca.reconstruct(&pca.project(x.row(r)));
            for (a, b) in back.iter().zip(x.row(r)) {
                worst_rec = worst_rec.max((a - b).abs());
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                worst_orth = worst_orth.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        ordered &= pca.variances.windows(2).all(|w| w[0] >= w[1]);
    }
    Ok((
        worst_rec < 1e-5 && worst_orth < 1e-6 && ordered,
        format!(
            "10 planted subspaces: reconstruction {worst_rec:.1e} (tol 1e-5), orthonormality {worst_orth:.1e}, variances non-increasing {ordered}"
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn determinism(dir: &Path) -> Outcome {
    let cfg = tiny(50, 5);
    let a = pretrain("determinism/a", &cfg, &RunOptions::default())?;
    let b = pretrain("determinism/b", &cfg, &RunOptions::default())?;
    let same = a.records.len() == 50
        && a.records.iter().zip(&b.records).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits())
        && a.state == b.state;

    let mut rc = tiny(30, 4);
    rc.checkpoint_every = 10;
    let full = pretrain(
        "resume/full",
        &rc,
        &RunOptions {
            out_dir: Some(dir.join("full")),
            ..RunOptions::default()
        },
    )?;
    let ck = dir.join("full").join("ckpt_000010.bin");
    let resumed = pretrain(
        "resume/tail",
        &rc,
        &RunOptions {
            out_dir: Some(dir.join("resumed")),
            resume: Some(ck.clone()),
            stop_at: None,
        },
    )?;
    let resumed_ok = resumed.records.len() == 20
        && full.records[10..]
            .iter()
            .zip(&resumed.records)
            .all(|(x, y)| x.step == y.step && x.loss.to_bits() == y.loss.to_bits())
        && full.state == resumed.state;

    let bytes = fs::read(&ck).map_err(e)?;
    Checkpoint::from_bytes(&bytes).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut positions: Vec<usize> = (0..64).map(|_| rng.random_range(0..bytes.len())).collect();
    positions.extend([0, 7, bytes.len() / 2, bytes.len() - 1]);
    let mut rejected = 0;
    for &p in &positions {
        let mut bad = bytes.clone();
        bad[p] ^= 1 << rng.random_range(0..8);
        if Checkpoint::from_bytes(&bad).is_err() {
            rejected += 1;
        }
    }
    let truncated = Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err();
    Ok((
        same && resumed_ok && rejected == positions.len() && truncated,
        format!(
            "50-step trajectories identical {same}; resume matches 20 steps bitwise {resumed_ok}; {rejected}/{} single-byte corruptions rejected, truncation rejected {truncated}",
            positions.len()
        ),
    ))
}

// ---------------------------------------------------------------- 11

fn shard_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for trial in 0..8u64 {
        let mut cfg = tiny(20, 2);
        cfg.batch_images = rng.random_range(1..4);
        cfg.batch_videos = rng.random_range(1..3);
        let streams = Streams::new(trial);
        let st = TrainState::<f64>::init(&cfg.model, trial, cfg.hash()).map_err(e)?;
        let step = rng.random_range(0..cfg.schedule.total_steps);
        let ramp = rng.random_range(0.0..1.0);
        let batch = make_batch(&cfg, &streams, step).map_err(e)?;
        let (img, vid) = batch.split_at(cfg.batch_images);
        let gi = shard_gradients(&cfg.model, &st.student, &st.teacher, img, &cfg.loss, ramp).map_err(e)?;
        let gv = shard_gradients(&cfg.model, &st.student, &st.teacher, vid, &cfg.loss, ramp).map_err(e)?;
        let agg = aggregate_modality_grads(&gi.grads, &gv.grads, gi.samples, gv.samples).map_err(e)?;
        let mixed = shard_gradients(&cfg.model, &st.student, &st.teacher, &batch, &cfg.loss, ramp).map_err(e)?;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (a, m) in agg.iter().flatten().zip(mixed.grads.iter().flatten()) {
            num = num.max((a - m).abs());
            den = den.max(m.abs());
        }
        worst = worst.max(num / den);
        cases += 1;
    }
    Ok((
        worst < 1e-6,
        format!("{cases} random micro-batches, max relative difference {worst:.1e} (tol 1e-6)"),
    ))
}

// ----------------------------------------------------------------

fn main() {
    let t0 = Instant::now();
    let quick = std::env::var("VJEPA_ACCEPTANCE_QUICK").is_ok_and(|v| v != "0" && !v.is_empty());
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut tally = Tally::default();

    tally.run(1, "gradient suite", Kind::Property, gradient_suite);
    tally.run(2, "formula oracles", Kind::Property, formula_oracles);
    tally.run(3, "mask geometry", Kind::Property, mask_geometry);
    tally.run(4, "frozen contracts", Kind::Property, || frozen_contracts(&tmp.path().join("frozen")));
    tally.run(5, "rotary property", Kind::Property, rotary_property);

    let mut ladder_out = None;
    if quick {
        tally.skip(6, "directional ladder", "quick mode");
    } else {
        let mut secs = 0.0;
        let mut built = None;
        tally.run(6, "directional ladder", Kind::Empirical, || {
            let start = Instant::now();
            let l = ladder(2000, 3)?;
            secs = start.elapsed().as_secs_f64();
            let r = directional_check(&l, secs);
            built = Some(l);
            r
        });
        ladder_out = built;
    }

    tally.run(8, "propagation oracle", Kind::Property, propagation_oracle);
    tally.run(9, "pca", Kind::Property, pca_check);
    tally.run(10, "determinism and persistence", Kind::Property, || determinism(&tmp.path().join("det")));
    tally.run(11, "modality-shard equivalence", Kind::Property, shard_equivalence);
    match ladder_out.as_ref().and_then(|l| l.deep_seed0.as_ref()) {
        Some((cfg, st)) => tally.run(12, "rollout control", Kind::Empirical, || rollout_control(cfg, st)),
        None => tally.skip(12, "rollout control", "needs the ladder's deep-supervision model"),
    }
    tally.run(7, "collapse sentinel", Kind::Property, collapse_sentinel);

    println!(
        "acceptance: {}/{} passed, {} failed, {} skipped in {:.1} min",
        tally.pass,
        tally.pass + tally.fail + tally.skip,
        tally.fail,
        tally.skip,
        t0.elapsed().as_secs_f64() / 60.0
    );
    if tally.hard_fail {
        std::process::exit(1);
    }
}
