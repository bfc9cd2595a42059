//! Moving-shapes scenes with dense ground truth.
//!
//! Objects are rectangles, discs or up-pointing triangles drawn back to
//! front. Every object moves linearly, all in one shared direction, and
//! bounces off the canvas borders. Per frame the generator emits RGB
//! pixels, a class-id mask (0 = background), an instance-id mask
//! (0 = background) and a depth field.

use rand::Rng;

use crate::model::VisualInput;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Triangle];

    pub fn class_id(self) -> u8 {
        match self {
            ShapeKind::Rect => 1,
            ShapeKind::Disc => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

/// Number of segmentation classes including background.
pub const NUM_CLASSES: usize = 4;
/// Motion directions used as video labels: right, left, down, up.
pub const NUM_DIRECTIONS: usize = 4;
const DIRECTIONS: [(f64, f64); NUM_DIRECTIONS] = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: (usize, usize),
    /// Half-extent range in pixels.
    pub size: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    /// Amplitude of uniform per-pixel texture noise, in 8-bit levels.
    pub noise: f64,
    /// Depth of the nearest layer and spacing between layers.
    pub depth_near: f32,
    pub depth_step: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            frames: 8,
            objects: (1, 3),
            size: (4.0, 9.0),
            speed: (1.0, 2.0),
            noise: 12.0,
            depth_near: 1.0,
            depth_step: 0.75,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.objects;
        if lo == 0 || lo > hi || hi > 250 {
            return Err(Error::Config(format!("object count range {lo}..={hi} is invalid")));
        }
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config("canvas and frame count must be positive".into()));
        }
        if !(self.size.0 >= 1.0 && self.size.0 <= self.size.1) || !(self.speed.0 >= 0.0 && self.speed.0 <= self.speed.1) {
            return Err(Error::Config("size and speed ranges must be ordered and positive".into()));
        }
        if 2.0 * self.size.1 >= self.width.min(self.height) as f64 {
            return Err(Error::Config(format!(
                "objects of half-extent {} do not fit a {}x{} canvas",
                self.size.1, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Depth assigned to pixels that show no object.
    pub fn background_depth(&self) -> f32 {
        self.depth_near + self.depth_step * self.objects.1 as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    /// Half-width and half-height; equal for discs and triangles.
    pub half: (f64, f64),
    pub vx: f64,
    pub vy: f64,
    /// 0 is nearest.
    pub layer: usize,
    pub color: [u8; 3],
}

impl SceneObject {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Rect => dx.abs() <= a && dy.abs() <= b,
            ShapeKind::Disc => dx * dx + dy * dy <= a * a,
            // apex (0, -a), base corners (±a, a)
            ShapeKind::Triangle => dy <= a && dy >= -a && dx.abs() <= (dy + a) / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Rect => 4.0 * a * b,
            ShapeKind::Disc => std::f64::consts::PI * a * a,
            ShapeKind::Triangle => 2.0 * a * a,
        }
    }

    pub fn perimeter(&self) -> f64 {
        let (a, b) = self.half;
        match self.kind {
            ShapeKind::Rect => 4.0 * (a + b),
            ShapeKind::Disc => 2.0 * std::f64::consts::PI * a,
            ShapeKind::Triangle => 2.0 * a + 2.0 * (a * a + 4.0 * a * a).sqrt(),
        }
    }

    fn step(&mut self, width: f64, height: f64) {
        let (a, b) = self.half;
        self.cx += self.vx;
        self.cy += self.vy;
        reflect(&mut self.cx, &mut self.vx, a, width - a);
        reflect(&mut self.cy, &mut self.vy, b, height - b);
    }
}

fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    for _ in 0..4 {
        if *p < lo {
            *p = 2.0 * lo - *p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            break;
        }
    }
    *p = p.clamp(lo, hi);
}

/// A generated clip. Planes are `[frames, height, width]`, RGB is
/// interleaved `[frames, height, width, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub rgb: Vec<u8>,
    pub class: Vec<u8>,
    pub instance: Vec<u8>,
    pub depth: Vec<f32>,
    /// Index into the shared motion directions.
    pub direction: usize,
    /// Initial object states.
    pub objects: Vec<SceneObject>,
}

impl Clip {
    pub fn frame_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Class of the object covering the most pixels in frame 0.
    pub fn dominant_class(&self) -> usize {
        let mut counts = [0usize; NUM_CLASSES];
        for &c in &self.class[..self.frame_pixels()] {
            counts[c as usize] += 1;
        }
        (1..NUM_CLASSES).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap_or(1)
    }

    /// Frame `f` as a one-frame clip.
    pub fn frame(&self, f: usize) -> Clip {
        let n = self.frame_pixels();
        Clip {
            frames: 1,
            rgb: self.rgb[f * n * 3..(f + 1) * n * 3].to_vec(),
            class: self.class[f * n..(f + 1) * n].to_vec(),
            instance: self.instance[f * n..(f + 1) * n].to_vec(),
            depth: self.depth[f * n..(f + 1) * n].to_vec(),
            objects: self.objects.clone(),
            ..*self
        }
    }

    /// Normalized model input: `(x/255 − 0.5) / 0.25`.
    pub fn to_input(&self, as_image: bool) -> Result<VisualInput> {
        let px = normalize_pixels(&self.rgb);
        if as_image {
            VisualInput::image(self.height, self.width, 3, px[..self.frame_pixels() * 3].to_vec())
        } else {
            VisualInput::video(self.frames, self.height, self.width, 3, px)
        }
    }
}

pub fn normalize_pixels(rgb: &[u8]) -> Vec<f32> {
    rgb.iter().map(|&v| (v as f32 / 255.0 - 0.5) / 0.25).collect()
}

fn sample_range(rng: &mut impl Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..b)
    }
}

/// Generates one clip, drawing everything from `rng`.
pub fn generate_clip(spec: &SceneSpec, rng: &mut impl Rng) -> Result<Clip> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let direction = rng.random_range(0..NUM_DIRECTIONS);
    let (dx, dy) = DIRECTIONS[direction];
    let mut layers: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        layers.swap(i, rng.random_range(0..=i));
    }
    let mut objects: Vec<SceneObject> = (0..count)
        .map(|i| {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let a = sample_range(rng, spec.size);
            let half = match kind {
                ShapeKind::Rect => (a, sample_range(rng, spec.size)),
                _ => (a, a),
            };
            let speed = sample_range(rng, spec.speed);
            SceneObject {
                kind,
                cx: rng.random_range(half.0..=w - half.0),
                cy: rng.random_range(half.1..=h - half.1),
                half,
                vx: dx * speed,
                vy: dy * speed,
                layer: layers[i],
                color: [rng.random_range(40..=255), rng.random_range(40..=255), rng.random_range(40..=255)],
            }
        })
        .collect();
    let initial = objects.clone();
    let bg = [rng.random_range(0..40u8), rng.random_range(0..40u8), rng.random_range(0..40u8)];

    // back to front: highest layer first
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(objects[i].layer));

    let n = spec.width * spec.height;
    let mut clip = Clip {
        width: spec.width,
        height: spec.height,
        frames: spec.frames,
        rgb: Vec::with_capacity(n * 3 * spec.frames),
        class: Vec::with_capacity(n * spec.frames),
        instance: Vec::with_capacity(n * spec.frames),
        depth: Vec::with_capacity(n * spec.frames),
        direction,
        objects: initial,
    };
    for f in 0..spec.frames {
        if f > 0 {
            for o in &mut objects {
                o.step(w, h);
            }
        }
        for y in 0..spec.height {
            for x in 0..spec.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut hit = None;
                for &i in &order {
                    if objects[i].contains(px, py) {
                        hit = Some(i);
                    }
                }
                let (color, class, inst, depth) = match hit {
                    Some(i) => {
                        let o = &objects[i];
                        (
                            o.color,
                            o.kind.class_id(),
                            (i + 1) as u8,
                            spec.depth_near + spec.depth_step * o.layer as f32,
                        )
                    }
                    None => (bg, 0, 0, spec.background_depth()),
                };
                for c in color {
                    let noise = if spec.noise > 0.0 {
                        rng.random_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    clip.rgb.push((c as f64 + noise).round().clamp(0.0, 255.0) as u8);
                }
                clip.class.push(class);
                clip.instance.push(inst);
                clip.depth.push(depth);
            }
        }
    }
    Ok(clip)
}
