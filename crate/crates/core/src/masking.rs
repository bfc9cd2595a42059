//! Multi-block spatio-temporal masks and per-context-token distance to the
//! nearest masked token.

use std::collections::VecDeque;

use rand::Rng;

use crate::model::PatchGrid;
use crate::{Error, Result};

/// Grid metric used for `d_min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    /// `max(|dt|, |dh|, |dw|)`; diagonal neighbours are at distance 1.
    Chebyshev,
    /// `|dt| + |dh| + |dw|`.
    Manhattan,
}

impl DistanceMetric {
    pub fn name(self) -> &'static str {
        match self {
            DistanceMetric::Chebyshev => "chebyshev",
            DistanceMetric::Manhattan => "manhattan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chebyshev" => Ok(Self::Chebyshev),
            "manhattan" => Ok(Self::Manhattan),
            other => Err(Error::Config(format!("unknown distance metric {other:?}"))),
        }
    }

    pub fn between(self, a: [usize; 3], b: [usize; 3]) -> u32 {
        let d = |i: usize| a[i].abs_diff(b[i]) as u32;
        match self {
            DistanceMetric::Chebyshev => d(0).max(d(1)).max(d(2)),
            DistanceMetric::Manhattan => d(0) + d(1) + d(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskParams {
    /// Fraction of the frame area covered by one block.
    pub spatial_scale: (f64, f64),
    /// Fraction of the clip length covered by one block.
    pub temporal_scale: (f64, f64),
    /// Height over width of a block.
    pub aspect_ratio: (f64, f64),
    pub num_blocks: usize,
    pub metric: DistanceMetric,
    /// Whole-mask redraws allowed when the union swallows every token.
    pub max_attempts: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            spatial_scale: (0.15, 0.7),
            temporal_scale: (1.0, 1.0),
            aspect_ratio: (0.75, 1.5),
            num_blocks: 8,
            metric: DistanceMetric::Chebyshev,
            max_attempts: 1000,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |(a, b): (f64, f64)| a > 0.0 && a <= b && b <= 1.0;
        if !unit(self.spatial_scale) || !unit(self.temporal_scale) {
            return Err(Error::Config("mask scales must satisfy 0 < min <= max <= 1".into()));
        }
        let (a, b) = self.aspect_ratio;
        if !(a > 0.0 && a <= b && b.is_finite()) {
            return Err(Error::Config("mask aspect ratio must satisfy 0 < min <= max".into()));
        }
        if self.num_blocks == 0 || self.max_attempts == 0 {
            return Err(Error::Config("num_blocks and max_attempts must be positive".into()));
        }
        Ok(())
    }
}

/// One sampled block: origin and extent in patch units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskBlock {
    pub origin: [usize; 3],
    pub extent: [usize; 3],
    /// Extent before clamping to the grid, `(t, h, w)`.
    pub requested: [usize; 3],
}

impl MaskBlock {
    pub fn was_clamped(&self) -> bool {
        self.extent != self.requested
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub grid: PatchGrid,
    /// Sorted masked token indices.
    pub masked: Vec<usize>,
    /// Sorted context token indices.
    pub context: Vec<usize>,
    /// `d_min[k]` belongs to `context[k]`.
    pub d_min: Vec<u32>,
    pub blocks: Vec<MaskBlock>,
    pub metric: DistanceMetric,
}

impl MaskSpec {
    /// Builds a spec from an explicit masked set.
    pub fn from_masked(grid: PatchGrid, masked: &[usize], metric: DistanceMetric) -> Result<Self> {
        let n = grid.len();
        let mut is_masked = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(Error::Input(format!("masked index {i} outside a grid of {n}")));
            }
            is_masked[i] = true;
        }
        Self::from_flags(grid, &is_masked, Vec::new(), metric)
    }

    fn from_flags(grid: PatchGrid, is_masked: &[bool], blocks: Vec<MaskBlock>, metric: DistanceMetric) -> Result<Self> {
        let masked: Vec<usize> = (0..grid.len()).filter(|&i| is_masked[i]).collect();
        let context: Vec<usize> = (0..grid.len()).filter(|&i| !is_masked[i]).collect();
        if masked.is_empty() || context.is_empty() {
            return Err(Error::Input(format!(
                "mask must leave both sets nonempty (masked {}, context {})",
                masked.len(),
                context.len()
            )));
        }
        let dist = distance_field(&grid, is_masked, metric);
        let d_min = context.iter().map(|&i| dist[i]).collect();
        Ok(Self {
            grid,
            masked,
            context,
            d_min,
            blocks,
            metric,
        })
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.binary_search(&index).is_ok()
    }
}

/// Distance from every token to the nearest masked token (0 on the mask),
/// by multi-source breadth-first expansion.
pub fn distance_field(grid: &PatchGrid, is_masked: &[bool], metric: DistanceMetric) -> Vec<u32> {
    let n = grid.len();
    let mut dist = vec![u32::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    for (i, &m) in is_masked.iter().enumerate() {
        if m {
            dist[i] = 0;
            queue.push_back(i);
        }
    }
    let offsets: Vec<[isize; 3]> = match metric {
        DistanceMetric::Chebyshev => {
            let mut v = Vec::with_capacity(26);
            for dt in -1..=1 {
                for dh in -1..=1 {
                    for dw in -1..=1 {
                        if (dt, dh, dw) != (0, 0, 0) {
                            v.push([dt, dh, dw]);
                        }
                    }
                }
            }
            v
        }
        DistanceMetric::Manhattan => vec![[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]],
    };
    let dims = [grid.t as isize, grid.h as isize, grid.w as isize];
    while let Some(i) = queue.pop_front() {
        let c = grid.coord(i);
        for off in &offsets {
            let mut nb = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let v = c[a] as isize + off[a];
                if v < 0 || v >= dims[a] {
                    inside = false;
                    break;
                }
                nb[a] = v as usize;
            }
            if !inside {
                continue;
            }
            let j = grid.index(nb);
            if dist[j] == u32::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    dist
}

/// `d_min` for every context token of `spec`, recomputed from its mask.
pub fn min_distance_map(spec: &MaskSpec) -> Vec<u32> {
    let mut flags = vec![false; spec.grid.len()];
    for &i in &spec.masked {
        flags[i] = true;
    }
    let dist = distance_field(&spec.grid, &flags, spec.metric);
    spec.context.iter().map(|&i| dist[i]).collect()
}

fn uniform(rng: &mut impl Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

fn sample_block(grid: &PatchGrid, params: &MaskParams, rng: &mut impl Rng) -> MaskBlock {
    let scale = uniform(rng, params.spatial_scale);
    let ar = uniform(rng, params.aspect_ratio);
    let tscale = uniform(rng, params.temporal_scale);
    let area = scale * (grid.h * grid.w) as f64;
    let h = ((area * ar).sqrt().round() as usize).max(1);
    let w = ((area / ar).sqrt().round() as usize).max(1);
    let t = ((tscale * grid.t as f64).round() as usize).max(1);
    let requested = [t, h, w];
    let extent = [t.min(grid.t), h.min(grid.h), w.min(grid.w)];
    let origin = [
        rng.random_range(0..=grid.t - extent[0]),
        rng.random_range(0..=grid.h - extent[1]),
        rng.random_range(0..=grid.w - extent[2]),
    ];
    MaskBlock {
        origin,
        extent,
        requested,
    }
}

/// Union of `num_blocks` random blocks. The whole draw is repeated when it
/// would leave no context token.
pub fn sample_mask(grid: &PatchGrid, params: &MaskParams, rng: &mut impl Rng) -> Result<MaskSpec> {
    params.validate()?;
    if grid.len() < 2 {
        return Err(Error::Geometry(format!("a grid of {} token(s) cannot be masked", grid.len())));
    }
    for _ in 0..params.max_attempts {
        let mut flags = vec![false; grid.len()];
        let blocks: Vec<MaskBlock> = (0..params.num_blocks).map(|_| sample_block(grid, params, rng)).collect();
        for b in &blocks {
            for t in b.origin[0]..b.origin[0] + b.extent[0] {
                for h in b.origin[1]..b.origin[1] + b.extent[1] {
                    for w in b.origin[2]..b.origin[2] + b.extent[2] {
                        flags[grid.index([t, h, w])] = true;
                    }
                }
            }
        }
        if flags.iter().all(|&m| m) {
            continue;
        }
        let clamped = blocks.iter().filter(|b| b.was_clamped()).count();
        if clamped > 0 {
            log::debug!("{clamped} mask block(s) clamped to the {}x{}x{} grid", grid.t, grid.h, grid.w);
        }
        return MaskSpec::from_flags(*grid, &flags, blocks, params.metric);
    }
    Err(Error::Geometry(format!(
        "no mask with a nonempty context after {} attempts on a {}x{}x{} grid",
        params.max_attempts, grid.t, grid.h, grid.w
    )))
}
