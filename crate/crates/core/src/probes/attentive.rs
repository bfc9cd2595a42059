use rand::seq::SliceRandom;

use super::{cosine_lr, format_grid, GridCell, ProbeConfig};
use crate::data::rng::{self, Streams};
use crate::model::blocks::{linear, norm, transformer_block, BlockShape};
use crate::model::{init_store, rope, Coord, PatchGrid};
use crate::tensor::{adamw_step, AdamWParams, Binding, Moments, ParamStore, Real, RopeTable, Tape, Tensor, Var};
use crate::trainer::step::decays;
use crate::{Error, Result};

/// Stream indices of attentive-probe cells start here so they never meet
/// the linear-probe cells.
const STREAM_OFFSET: u64 = 1 << 32;

/// Three self-attention blocks, one cross-attention block reading a
/// learnable query, then a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveProbe<T> {
    pub dim: usize,
    pub heads: usize,
    pub classes: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub eps: f64,
    pub rope_base: f64,
    pub params: ParamStore<T>,
}

impl<T: Real> AttentiveProbe<T> {
    pub fn param_shapes(dim: usize, classes: usize, blocks: usize, mlp_ratio: usize) -> Vec<(String, Vec<usize>)> {
        let d = dim;
        let mut out = Vec::new();
        for i in 0..blocks {
            for (n, s) in BlockShape::new(d, mlp_ratio).param_shapes() {
                out.push((format!("blk{i}.{n}"), s));
            }
        }
        let h = d * mlp_ratio;
        for (n, s) in [
            ("query", vec![1, d]),
            ("cross.ln_q.g", vec![d]),
            ("cross.ln_q.b", vec![d]),
            ("cross.ln_kv.g", vec![d]),
            ("cross.ln_kv.b", vec![d]),
            ("cross.q.w", vec![d, d]),
            ("cross.q.b", vec![d]),
            ("cross.kv.w", vec![d, 2 * d]),
            ("cross.kv.b", vec![2 * d]),
            ("cross.proj.w", vec![d, d]),
            ("cross.proj.b", vec![d]),
            ("cross.ln2.g", vec![d]),
            ("cross.ln2.b", vec![d]),
            ("cross.fc1.w", vec![d, h]),
            ("cross.fc1.b", vec![h]),
            ("cross.fc2.w", vec![h, d]),
            ("cross.fc2.b", vec![d]),
            ("head.w", vec![d, classes]),
            ("head.b", vec![classes]),
        ] {
            out.push((n.to_string(), s));
        }
        out
    }

    pub fn init(dim: usize, heads: usize, classes: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) || classes == 0 {
            return Err(Error::Config(format!("probe of width {dim} with {heads} heads and {classes} classes")));
        }
        let (blocks, mlp_ratio) = (3, 4);
        let params = init_store(&Self::param_shapes(dim, classes, blocks, mlp_ratio), 0.02, rng)?;
        Ok(Self {
            dim,
            heads,
            classes,
            blocks,
            mlp_ratio,
            eps: 1e-6,
            rope_base: 100.0,
            params,
        })
    }

    /// Rotary table for the self-attention blocks, or `None` when the head
    /// width cannot be split over three axes.
    pub fn rope_table(&self, positions: &[Coord]) -> Option<RopeTable<T>> {
        rope::table(positions, self.dim / self.heads, self.rope_base, rope::NATIVE).ok()
    }
}

/// Logits `[1, classes]` of one `[tokens, D]` feature set.
pub fn attentive_probe_forward<T: Real>(
    tape: &mut Tape<T>,
    p: &Binding<T>,
    probe: &AttentiveProbe<T>,
    features: Var,
    positions: Option<&RopeTable<T>>,
) -> Result<Var> {
    let d = probe.dim;
    let mut x = features;
    for i in 0..probe.blocks {
        x = transformer_block(tape, p, &format!("blk{i}"), x, probe.heads, positions, probe.eps)?;
    }
    let query = p.var("query")?;
    let qn = norm(tape, p, "cross.ln_q", query, probe.eps)?;
    let q = linear(tape, p, "cross.q", qn)?;
    let xn = norm(tape, p, "cross.ln_kv", x, probe.eps)?;
    let kv = linear(tape, p, "cross.kv", xn)?;
    let k = tape.slice(kv, 1, 0, d)?;
    let v = tape.slice(kv, 1, d, d)?;
    let a = tape.attention(q, k, v, probe.heads)?;
    let a = linear(tape, p, "cross.proj", a)?;
    let h = tape.add(query, a)?;
    let m = norm(tape, p, "cross.ln2", h, probe.eps)?;
    let m = linear(tape, p, "cross.fc1", m)?;
    let m = tape.gelu(m);
    let m = linear(tape, p, "cross.fc2", m)?;
    let h = tape.add(h, m)?;
    linear(tape, p, "head", h)
}

/// One labelled feature set.
#[derive(Debug, Clone)]
pub struct ClsExample {
    pub features: Tensor<f32>,
    pub grid: PatchGrid,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ClassificationReport {
    pub cells: Vec<GridCell>,
    pub best: usize,
    /// Held-out top-1 accuracy of the best cell.
    pub accuracy: f64,
    pub probe: AttentiveProbe<f32>,
}

impl ClassificationReport {
    pub fn table(&self) -> String {
        format_grid("acc", &self.cells, self.best)
    }
}

fn logits_of(probe: &AttentiveProbe<f32>, ex: &ClsExample) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let b = probe.params.bind(&mut tape, false);
    let x = tape.constant(ex.features.clone());
    let table = probe.rope_table(&ex.grid.coords());
    let l = attentive_probe_forward(&mut tape, &b, probe, x, table.as_ref())?;
    Ok(tape.value(l).data().to_vec())
}

pub fn accuracy(probe: &AttentiveProbe<f32>, examples: &[ClsExample]) -> Result<f64> {
    let mut correct = 0;
    for ex in examples {
        let l = logits_of(probe, ex)?;
        let mut best = 0;
        for (i, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = i;
            }
        }
        correct += usize::from(best == ex.label);
    }
    Ok(correct as f64 / examples.len().max(1) as f64)
}

fn train_cell(
    train: &[ClsExample],
    classes: usize,
    heads: usize,
    lr: f64,
    wd: f64,
    cfg: &ProbeConfig,
    streams: &Streams,
    cell: u64,
) -> Result<AttentiveProbe<f32>> {
    let dim = train[0].features.last_dim();
    let mut probe = AttentiveProbe::<f32>::init(dim, heads, classes, &mut streams.get(rng::PROBE, STREAM_OFFSET + 2 * cell))?;
    let mut shuffle = streams.get(rng::PROBE, STREAM_OFFSET + 2 * cell + 1);
    let tables: Vec<Option<RopeTable<f32>>> = train.iter().map(|e| probe.rope_table(&e.grid.coords())).collect();
    let mut moments: Vec<Moments<f32>> = probe.params.iter().map(|(_, t)| Moments::zeros(t.len())).collect();
    let total = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut update = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f32>> = probe.params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
            let inv = 1.0 / chunk.len() as f32;
            for &i in chunk {
                let mut tape = Tape::new();
                let b = probe.params.bind(&mut tape, true);
                let x = tape.constant(train[i].features.clone());
                let logits = attentive_probe_forward(&mut tape, &b, &probe, x, tables[i].as_ref())?;
                let loss = tape.cross_entropy(logits, &[train[i].label])?;
                let grads = tape.backward(loss)?;
                for (a, g) in acc.iter_mut().zip(b.collect_grads(&grads)) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            }
            let rate = cosine_lr(lr, update, total);
            update += 1;
            for (((name, t), m), g) in probe.params.iter_mut().zip(moments.iter_mut()).zip(&acc) {
                let hp = AdamWParams {
                    lr: rate,
                    weight_decay: if decays(t.shape()) { wd } else { 0.0 },
                    ..AdamWParams::default()
                };
                adamw_step(name, t.data_mut(), g, m, update as u64, &hp)?;
            }
        }
    }
    Ok(probe)
}

/// Sweeps the grid of `cfg`, selecting the cell with the best held-out
/// accuracy (the earliest on ties).
pub fn train_attentive_probe(
    train: &[ClsExample],
    val: &[ClsExample],
    classes: usize,
    heads: usize,
    cfg: &ProbeConfig,
    streams: &Streams,
) -> Result<ClassificationReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("classification probe needs training and held-out examples".into()));
    }
    if let Some(e) = train.iter().chain(val).find(|e| e.label >= classes) {
        return Err(Error::Input(format!("label {} out of range for {classes} classes", e.label)));
    }
    let first = train[0].label;
    if train.iter().all(|e| e.label == first) {
        return Err(Error::Input("classification labels contain a single class".into()));
    }
    let mut cells = Vec::new();
    let mut best: Option<(usize, AttentiveProbe<f32>)> = None;
    for (i, (lr, wd)) in cfg.grid().into_iter().enumerate() {
        let probe = train_cell(train, classes, heads, lr, wd, cfg, streams, i as u64)?;
        let acc = accuracy(&probe, val)?;
        let better = best.as_ref().is_none_or(|(b, _)| acc > cells_acc(&cells, *b));
        cells.push(GridCell {
            lr,
            weight_decay: wd,
            metric: acc,
        });
        if better {
            best = Some((i, probe));
        }
    }
    let (best, probe) = best.expect("non-empty grid");
    Ok(ClassificationReport {
        accuracy: cells[best].metric,
        cells,
        best,
        probe,
    })
}

fn cells_acc(cells: &[GridCell], i: usize) -> f64 {
    cells[i].metric
}
