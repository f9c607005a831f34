//! Synthetic detection scenes: bright axis-aligned shapes on a noisy dark
//! background. A class is a (shape, intensity band) pair.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabelBox, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
    Frame,
}

const SHAPES: [Shape; 3] = [Shape::Rect, Shape::Ellipse, Shape::Frame];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Relative class frequencies; uniform when `None`.
    pub class_weights: Option<Vec<f64>>,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
}

impl SynthConfig {
    pub fn new(n: usize, num_classes: usize, seed: u64) -> Self {
        Self {
            n,
            num_classes,
            image_size: 64,
            seed,
            class_weights: None,
            max_objects: 4,
            min_side: 10,
            max_side: 32,
        }
    }
}

/// Shape and fill intensity used for `class_id`.
pub fn class_style(class_id: usize, num_classes: usize) -> (Shape, f32) {
    let bands = num_classes.div_ceil(SHAPES.len());
    let band = class_id / SHAPES.len();
    let level = if bands <= 1 {
        0.85
    } else {
        0.45 + 0.5 * band as f32 / (bands - 1) as f32
    };
    (SHAPES[class_id % SHAPES.len()], level)
}

fn paint(img: &mut [f32], size: usize, (x0, y0, w, h): (usize, usize, usize, usize), shape: Shape, level: f32) {
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let border = (w.min(h) / 5).max(2);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dx = (x - x0) as f64 + 0.5 - rx;
                    let dy = (y - y0) as f64 + 0.5 - ry;
                    (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
                }
                Shape::Frame => {
                    x < x0 + border || x >= x0 + w - border || y < y0 + border || y >= y0 + h - border
                }
            };
            if inside {
                img[y * size + x] = level;
            }
        }
    }
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    // One pixel of clearance between shapes.
    a.0 < b.0 + b.2 + 1 && b.0 < a.0 + a.2 + 1 && a.1 < b.1 + b.3 + 1 && b.1 < a.1 + a.3 + 1
}

pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.n == 0 || cfg.num_classes == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1 and at least one class".into()));
    }
    if cfg.max_objects == 0 || cfg.min_side < 2 || cfg.min_side > cfg.max_side || cfg.max_side > cfg.image_size {
        return Err(Error::InvalidArgument(format!(
            "object sides {}..={} do not fit a {} px image",
            cfg.min_side, cfg.max_side, cfg.image_size
        )));
    }
    let weights = match &cfg.class_weights {
        Some(w) if w.len() != cfg.num_classes => {
            return Err(Error::InvalidArgument(format!(
                "{} class weights for {} classes",
                w.len(),
                cfg.num_classes
            )))
        }
        Some(w) => w.clone(),
        None => vec![1.0; cfg.num_classes],
    };
    let classes = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("class weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.image_size;
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut img: Vec<f32> = (0..s * s).map(|_| rng.gen_range(0.05..0.25)).collect();
        let count = rng.gen_range(1..=cfg.max_objects);
        let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..count {
            let class_id = classes.sample(&mut rng);
            let (shape, level) = class_style(class_id, cfg.num_classes);
            for _attempt in 0..30 {
                let w = rng.gen_range(cfg.min_side..=cfg.max_side);
                let h = rng.gen_range(cfg.min_side..=cfg.max_side);
                let r = (rng.gen_range(0..=s - w), rng.gen_range(0..=s - h), w, h);
                if placed.iter().any(|&p| overlaps(p, r)) {
                    continue;
                }
                let jitter = rng.gen_range(-0.03f32..0.03);
                paint(&mut img, s, r, shape, level + jitter);
                placed.push(r);
                let n = s as f64;
                boxes.push(LabelBox::new(
                    class_id,
                    (r.0 as f64 + w as f64 / 2.0) / n,
                    (r.1 as f64 + h as f64 / 2.0) / n,
                    w as f64 / n,
                    h as f64 / n,
                ));
                break;
            }
        }
        let mut rgb = Vec::with_capacity(3 * s * s);
        for _ in 0..3 {
            rgb.extend_from_slice(&img);
        }
        out.push(Sample {
            id: format!("synth_{i:05}"),
            image: Tensor::new(vec![3, s, s], rgb)?,
            boxes,
        });
    }
    Ok(out)
}
