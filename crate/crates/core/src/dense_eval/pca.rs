use crate::model::PatchGrid;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 500;

/// The six orderings of three components onto the R, G and B channels.
pub const PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Leading principal directions of a token set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm directions; all-zero rows pad a rank-deficient input.
    pub components: Vec<Vec<f64>>,
    /// Variance explained by each component, non-increasing.
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Component scores of one feature row.
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &s) in self.components.iter().zip(scores) {
            for (o, a) in out.iter_mut().zip(c) {
                *o += s * a;
            }
        }
        out
    }
}

fn mat_vec(c: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| c[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn unit(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top-`k` principal components by power iteration with deflation on the
/// covariance matrix. Each direction's largest-magnitude loading is made
/// positive.
pub fn principal_components(features: &Tensor<f64>, k: usize) -> Result<Pca> {
    if features.rank() != 2 {
        return Err(Error::Input("features must be [tokens, D]".into()));
    }
    let (n, d) = (features.rows(), features.last_dim());
    if n < 3 {
        return Err(Error::Input(format!("PCA needs at least 3 tokens, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &x) in mean.iter_mut().zip(features.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for ((c, &x), &m) in centered.iter_mut().zip(features.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in 0..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let floor = 1e-12 * trace.max(f64::MIN_POSITIVE);

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        // start from the residual's heaviest column
        let col = (0..d)
            .max_by(|&a, &b| {
                let na: f64 = (0..d).map(|i| cov[i * d + a].powi(2)).sum();
                let nb: f64 = (0..d).map(|i| cov[i * d + b].powi(2)).sum();
                na.total_cmp(&nb)
            })
            .unwrap_or(0);
        let mut v: Vec<f64> = (0..d).map(|i| cov[i * d + col]).collect();
        if unit(&mut v) <= floor {
            log::warn!("features have rank {} < {k}; padding with zero components", components.len());
            components.push(vec![0.0; d]);
            variances.push(0.0);
            continue;
        }
        for _ in 0..MAX_ITERATIONS {
            let mut next = mat_vec(&cov, &v);
            unit(&mut next);
            let diff = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if diff < TOLERANCE {
                break;
            }
        }
        let lambda: f64 = v.iter().zip(mat_vec(&cov, &v)).map(|(a, b)| a * b).sum();
        if lambda <= floor {
            log::warn!("features have rank {} < {k}; padding with zero components", components.len());
            components.push(vec![0.0; d]);
            variances.push(0.0);
            continue;
        }
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        variances.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        variances,
    })
}

/// RGB rendering of the top three components, one image per temporal slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaMap {
    pub pca: Pca,
    /// Per-token component values min–max normalized to `[0, 1]`.
    pub normalized: Vec<[f64; 3]>,
    pub grid: PatchGrid,
}

impl PcaMap {
    /// Interleaved RGB per temporal slice at patch resolution, each patch
    /// drawn as a `scale`×`scale` square.
    pub fn render(&self, permutation: [usize; 3], scale: usize) -> Vec<Vec<u8>> {
        let g = self.grid;
        let scale = scale.max(1);
        let (h, w) = (g.h * scale, g.w * scale);
        (0..g.t)
            .map(|t| {
                let mut img = Vec::with_capacity(h * w * 3);
                for y in 0..h {
                    for x in 0..w {
                        let tok = g.index([t, y / scale, x / scale]);
                        let v = self.normalized[tok];
                        for &c in &permutation {
                            img.push((v[c] * 255.0).round().clamp(0.0, 255.0) as u8);
                        }
                    }
                }
                img
            })
            .collect()
    }
}

/// Mean-centres the features, finds the top three directions and maps each
/// component to `[0, 1]` across all tokens.
pub fn pca_map(features: &Tensor<f64>, grid: &PatchGrid) -> Result<PcaMap> {
    if features.rank() != 2 || features.rows() != grid.len() {
        return Err(Error::Input(format!(
            "features {:?} do not match a grid of {} tokens",
            features.shape(),
            grid.len()
        )));
    }
    let pca = principal_components(features, 3)?;
    let scores: Vec<Vec<f64>> = (0..features.rows()).map(|r| pca.project(features.row(r))).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in &scores {
        for c in 0..3 {
            lo[c] = lo[c].min(s[c]);
            hi[c] = hi[c].max(s[c]);
        }
    }
    let normalized = scores
        .iter()
        .map(|s| {
            let mut v = [0.0; 3];
            for c in 0..3 {
                let span = hi[c] - lo[c];
                v[c] = if span > 0.0 { (s[c] - lo[c]) / span } else { 0.0 };
            }
            v
        })
        .collect();
    Ok(PcaMap {
        pca,
        normalized,
        grid: *grid,
    })
}
