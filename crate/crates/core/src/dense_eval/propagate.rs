use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    /// Euclidean distance ≤ radius.
    Circle,
    /// Chebyshev distance ≤ radius.
    Square,
}

impl Neighborhood {
    pub fn name(self) -> &'static str {
        match self {
            Neighborhood::Circle => "circle",
            Neighborhood::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(Neighborhood::Circle),
            "square" => Ok(Neighborhood::Square),
            _ => Err(Error::Config(format!("unknown neighborhood `{s}`"))),
        }
    }

    fn contains(self, dy: f64, dx: f64, radius: f64) -> bool {
        match self {
            Neighborhood::Circle => dy * dy + dx * dx <= radius * radius,
            Neighborhood::Square => dy.abs().max(dx.abs()) <= radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationParams {
    /// Number of preceding frames used besides the first.
    pub context: usize,
    /// Neighbourhood radius in patches; infinite disables the restriction.
    pub radius: f64,
    pub shape: Neighborhood,
    /// `usize::MAX` keeps every candidate.
    pub top_k: usize,
    pub temperature: f64,
}

impl PropagationParams {
    pub fn reference() -> Self {
        Self {
            context: 15,
            radius: 12.0,
            shape: Neighborhood::Circle,
            top_k: 5,
            temperature: 0.2,
        }
    }

    /// No neighbourhood restriction and no top-k truncation.
    pub fn dense(context: usize, temperature: f64) -> Self {
        Self {
            context,
            radius: f64::INFINITY,
            shape: Neighborhood::Square,
            top_k: usize::MAX,
            temperature,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context < 1 || !(self.radius >= 1.0) || self.top_k < 1 || !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "propagation needs context ≥ 1, radius ≥ 1, top_k ≥ 1 and temperature > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// The search grid `{4,7,10,15} × {12,24,36} × {circle,square} ×
    /// {3,5,10} × {0.01,0.1,0.2,0.7}`.
    pub fn sweep() -> Vec<Self> {
        let mut out = Vec::new();
        for context in [4, 7, 10, 15] {
            for radius in [12.0, 24.0, 36.0] {
                for shape in [Neighborhood::Circle, Neighborhood::Square] {
                    for top_k in [3, 5, 10] {
                        for temperature in [0.01, 0.1, 0.2, 0.7] {
                            out.push(Self {
                                context,
                                radius,
                                shape,
                                top_k,
                                temperature,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Soft labels of every frame, `[tokens, labels]` row-major per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub labels: usize,
    pub fields: Vec<Vec<f64>>,
}

impl Propagation {
    /// Arg-max label of every patch of frame `t`; ties go to the smaller id.
    pub fn hard(&self, t: usize) -> Vec<u8> {
        self.fields[t]
            .chunks(self.labels)
            .map(|row| {
                let mut best = 0;
                for (l, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = l;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Row-wise L2 normalization; zero rows stay zero.
pub fn l2_normalize(x: &Tensor<f64>) -> Vec<f64> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The frames whose labels feed frame `t`: frame 0, then the latest
/// `context` frames before `t`, in increasing order.
pub fn source_frames(t: usize, context: usize) -> Vec<usize> {
    let mut out = vec![0];
    out.extend(t.saturating_sub(context).max(1)..t);
    out
}

/// Weighted k-NN label propagation. `frames[t]` is `[gh·gw, D]`; `first`
/// holds one label per patch of frame 0.
pub fn propagate_labels(
    frames: &[Tensor<f64>],
    gh: usize,
    gw: usize,
    first: &[u8],
    num_labels: usize,
    params: &PropagationParams,
) -> Result<Propagation> {
    params.validate()?;
    let n = gh * gw;
    if frames.is_empty() {
        return Err(Error::Input("no frames to propagate through".into()));
    }
    if first.len() != n || frames.iter().any(|f| f.rank() != 2 || f.rows() != n) {
        return Err(Error::Input(format!("frames and first mask must have {n} patches")));
    }
    if !first.iter().any(|&l| l != 0) {
        return Err(Error::Input("first frame has no labeled patch".into()));
    }
    if let Some(&l) = first.iter().find(|&&l| l as usize >= num_labels) {
        return Err(Error::Input(format!("label {l} out of range for {num_labels} labels")));
    }
    let d = frames[0].last_dim();
    let feats: Vec<Vec<f64>> = frames.iter().map(l2_normalize).collect();
    let mut fields = Vec::with_capacity(frames.len());
    let mut f0 = vec![0.0; n * num_labels];
    for (i, &l) in first.iter().enumerate() {
        f0[i * num_labels + l as usize] = 1.0;
    }
    fields.push(f0);
    for t in 1..frames.len() {
        let sources = source_frames(t, params.context);
        let mut out = vec![0.0; n * num_labels];
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for q in 0..n {
            let (qy, qx) = ((q / gw) as f64, (q % gw) as f64);
            let qf = &feats[t][q * d..(q + 1) * d];
            cand.clear();
            for &s in &sources {
                for j in 0..n {
                    let (dy, dx) = ((j / gw) as f64 - qy, (j % gw) as f64 - qx);
                    if params.shape.contains(dy, dx, params.radius) {
                        cand.push((dot(qf, &feats[s][j * d..(j + 1) * d]), s, j));
                    }
                }
            }
            if params.top_k < cand.len() {
                // stable: on equal similarity the earlier source wins
                let mut order: Vec<usize> = (0..cand.len()).collect();
                order.sort_by(|&a, &b| cand[b].0.total_cmp(&cand[a].0).then(a.cmp(&b)));
                let mut keep: Vec<usize> = order[..params.top_k].to_vec();
                keep.sort_unstable();
                cand = keep.into_iter().map(|i| cand[i]).collect();
            }
            let mx = cand.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = cand.iter().map(|c| ((c.0 - mx) / params.temperature).exp()).collect();
            let z: f64 = e.iter().sum();
            let row = &mut out[q * num_labels..(q + 1) * num_labels];
            for (&(_, s, j), &ei) in cand.iter().zip(&e) {
                let w = ei / z;
                let src = &fields[s][j * num_labels..(j + 1) * num_labels];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        fields.push(out);
    }
    Ok(Propagation {
        labels: num_labels,
        fields,
    })
}
