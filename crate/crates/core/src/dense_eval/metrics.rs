use crate::{Error, Result};

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Input(format!("{what}: prediction has {a} elements, ground truth {b}")));
    }
    Ok(())
}

/// Mean intersection-over-union over the classes present in either map.
pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<f64> {
    check_len(pred.len(), gt.len(), "miou")?;
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::Input(format!("class id {} out of range", p.max(g))));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if present.is_empty() {
        return Err(Error::Input("miou of empty maps".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn rmse(pred: &[f32], gt: &[f32]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "rmse")?;
    if gt.is_empty() {
        return Err(Error::Input("rmse of empty maps".into()));
    }
    let s: f64 = pred.iter().zip(gt).map(|(&p, &g)| (p as f64 - g as f64).powi(2)).sum();
    Ok((s / gt.len() as f64).sqrt())
}

/// IoU of two binary masks; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p && g).count();
    let union = pred.iter().zip(gt).filter(|(&p, &g)| p || g).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mask pixels with at least one 4-neighbour outside the mask (or on the
/// image border): the mask minus its erosion.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<bool> {
    let at = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && mask[y as usize * width + x as usize]
    };
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            if at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)) {
                out[y as usize * width + x as usize] = true;
            }
        }
    }
    out
}

fn dilate(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            for yy in y.saturating_sub(r)..(y + r + 1).min(height) {
                for xx in x.saturating_sub(r)..(x + r + 1).min(width) {
                    out[yy * width + xx] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with a `tolerance`-pixel match radius.
pub fn boundary_f(pred: &[bool], gt: &[bool], width: usize, height: usize, tolerance: usize) -> f64 {
    let bp = boundary(pred, width, height);
    let bg = boundary(gt, width, height);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return 1.0;
    }
    if np == 0 || ng == 0 {
        return 0.0;
    }
    let dg = dilate(&bg, width, height, tolerance);
    let dp = dilate(&bp, width, height, tolerance);
    let precision = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count() as f64 / np as f64;
    let recall = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count() as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Region (J) and boundary (F) scores of a video segmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JF {
    pub j: f64,
    pub f: f64,
}

impl JF {
    pub fn mean(&self) -> f64 {
        (self.j + self.f) / 2.0
    }
}

/// J and F averaged over objects (non-zero ids in `gt`), each object's
/// score averaged over the frames where it is visible. Frame 0 is the
/// given reference and is skipped when `skip_first`.
pub fn j_and_f(
    pred: &[u8],
    gt: &[u8],
    width: usize,
    height: usize,
    frames: usize,
    tolerance: usize,
    skip_first: bool,
) -> Result<JF> {
    let n = width * height;
    check_len(pred.len(), gt.len(), "j_and_f")?;
    check_len(gt.len(), n * frames, "j_and_f frames")?;
    let mut ids: Vec<u8> = gt.iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    let (mut js, mut fs) = (Vec::new(), Vec::new());
    let first = usize::from(skip_first);
    for &id in &ids {
        let (mut j, mut f, mut count) = (0.0, 0.0, 0);
        for t in first..frames {
            let g: Vec<bool> = gt[t * n..(t + 1) * n].iter().map(|&v| v == id).collect();
            if !g.iter().any(|&b| b) {
                continue;
            }
            let p: Vec<bool> = pred[t * n..(t + 1) * n].iter().map(|&v| v == id).collect();
            j += iou(&p, &g);
            f += boundary_f(&p, &g, width, height, tolerance);
            count += 1;
        }
        if count == 0 {
            log::warn!("object {id} has no visible evaluation frame; excluded");
            continue;
        }
        js.push(j / count as f64);
        fs.push(f / count as f64);
    }
    if js.is_empty() {
        return Err(Error::Input("ground truth has no objects to score".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(JF {
        j: mean(&js),
        f: mean(&fs),
    })
}

/// Nearest-patch upsampling of a `[gh, gw]` patch map to `[gh·p, gw·p]`.
pub fn upsample_nearest<V: Copy>(patches: &[V], gh: usize, gw: usize, patch: usize) -> Vec<V> {
    let (h, w) = (gh * patch, gw * patch);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(patches[(y / patch) * gw + x / patch]);
        }
    }
    out
}

/// Majority label of every `patch`×`patch` cell; ties go to the smaller id.
pub fn patch_majority(labels: &[u8], width: usize, height: usize, patch: usize) -> Vec<u8> {
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut counts = [0usize; 256];
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    counts[labels[y * width + x] as usize] += 1;
                }
            }
            let best = (0..256).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap();
            out.push(best as u8);
        }
    }
    out
}

/// Mean value of every `patch`×`patch` cell.
pub fn patch_mean(values: &[f32], width: usize, height: usize, patch: usize) -> Vec<f32> {
    let (gh, gw) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut s = 0.0f64;
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    s += values[y * width + x] as f64;
                }
            }
            out.push((s / (patch * patch) as f64) as f32);
        }
    }
    out
}
