//! Synthetic 5-class segmentation data: shapes on a background canvas.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, ManifestEntry, Split};
use super::{quantize, save_image, save_mask, MaskMode, Sample};
use crate::error::{Result, SegError};
use crate::labels::LabelMap;
use crate::tensor::{Shape, Tensor};

pub const MIN_SYNTH_SIZE: usize = 16;

/// Mean RGB color per class; BG is a pale stain-free canvas.
pub const CLASS_COLORS: [[f64; 3]; 5] = [
    [0.94, 0.92, 0.95],
    [0.55, 0.35, 0.65],
    [0.85, 0.55, 0.70],
    [0.30, 0.20, 0.55],
    [0.60, 0.10, 0.25],
];

const NOISE: f64 = 0.05;
const MAX_SHAPES: usize = 4;
const PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Disc { radius: f64 },
    Rect { half_h: f64, half_w: f64 },
    /// Ring with inner radius `inner` (exclusive) and outer `outer`.
    Annulus { inner: f64, outer: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub cy: f64,
    pub cx: f64,
}

impl SynthShape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        match self.kind {
            ShapeKind::Disc { radius } => dy * dy + dx * dx <= radius * radius,
            ShapeKind::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            ShapeKind::Annulus { inner, outer } => {
                let d2 = dy * dy + dx * dx;
                d2 > inner * inner && d2 <= outer * outer
            }
        }
    }

    /// Half extent of the bounding box.
    fn reach(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Disc { radius } => (radius, radius),
            ShapeKind::Rect { half_h, half_w } => (half_h, half_w),
            ShapeKind::Annulus { outer, .. } => (outer, outer),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub shapes: Vec<SynthShape>,
}

fn random_shape(rng: &mut ChaCha8Rng, size: usize) -> SynthShape {
    let s = size as f64;
    let (lo, hi) = (s / 10.0, s / 4.0);
    let kind = match rng.random_range(0..3) {
        0 => ShapeKind::Disc {
            radius: rng.random_range(lo..hi),
        },
        1 => ShapeKind::Rect {
            half_h: rng.random_range(lo..hi),
            half_w: rng.random_range(lo..hi),
        },
        _ => {
            let outer = rng.random_range(lo.max(4.0)..hi.max(4.5));
            ShapeKind::Annulus {
                inner: outer * rng.random_range(0.35..0.6),
                outer,
            }
        }
    };
    let class = rng.random_range(1..=4u8);
    let mut shape = SynthShape {
        kind,
        class,
        cy: 0.0,
        cx: 0.0,
    };
    let (ry, rx) = shape.reach();
    shape.cy = rng.random_range(ry..s - ry);
    shape.cx = rng.random_range(rx..s - rx);
    shape
}

/// Boxes separated by at least one pixel.
fn separated(a: &SynthShape, b: &SynthShape) -> bool {
    let ((ay, ax), (by, bx)) = (a.reach(), b.reach());
    (a.cy - b.cy).abs() > ay + by + 1.0 || (a.cx - b.cx).abs() > ax + bx + 1.0
}

fn one_sample(rng: &mut ChaCha8Rng, size: usize) -> SynthSample {
    let wanted = rng.random_range(1..=MAX_SHAPES);
    let mut shapes: Vec<SynthShape> = Vec::with_capacity(wanted);
    for _ in 0..PLACEMENT_TRIES {
        if shapes.len() == wanted {
            break;
        }
        let cand = random_shape(rng, size);
        if shapes.iter().all(|s| separated(s, &cand)) {
            shapes.push(cand);
        }
    }

    let mut labels = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if let Some(s) = shapes.iter().find(|s| s.contains(y, x)) {
                labels[y * size + x] = s.class;
            }
        }
    }
    // Shapes that rasterize to nothing are dropped so the list matches the mask.
    shapes.retain(|s| labels.contains(&s.class) && (0..size * size).any(|i| s.contains(i / size, i % size)));

    let mut data = vec![0.0; 3 * size * size];
    for (i, &l) in labels.iter().enumerate() {
        for c in 0..3 {
            let v = CLASS_COLORS[l as usize][c] + rng.random_range(-NOISE..=NOISE);
            data[c * size * size + i] = quantize(v) as f64 / 255.0;
        }
    }
    let image = Tensor::new(Shape::new(1, 3, size, size), data).expect("sized");
    let mask = LabelMap::new(1, size, size, labels).expect("sized");
    SynthSample {
        sample: Sample { image, mask },
        shapes,
    }
}

/// `count` samples of `size × size`, fully determined by `seed`.
///
/// Image values are quantized to multiples of 1/255 so a saved and reloaded
/// sample is bit-identical.
pub fn synthetic_samples(count: usize, size: usize, seed: u64) -> Result<Vec<SynthSample>> {
    if size < MIN_SYNTH_SIZE {
        return Err(SegError::InvalidArgument(format!(
            "synthetic size {size} is too small to place shapes (minimum {MIN_SYNTH_SIZE})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| one_sample(&mut rng, size)).collect())
}

/// Split for sample `i` of `count`: the last tenth is test, the tenth
/// before it validation, the rest training.
fn split_for(i: usize, count: usize) -> Split {
    let tenth = count / 10;
    if i >= count - tenth {
        Split::Test
    } else if i >= count - 2 * tenth {
        Split::Val
    } else {
        Split::Train
    }
}

/// Writes `images/NNNN.ppm`, `masks/NNNN.pgm` and `manifest.tsv` under `dir`.
pub fn generate_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Manifest> {
    let samples = synthetic_samples(count, size, seed)?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| SegError::io(&p, e))?;
    }
    let width = count.saturating_sub(1).to_string().len().max(4);
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let image = dir.join("images").join(format!("{i:0width$}.ppm"));
        let mask = dir.join("masks").join(format!("{i:0width$}.pgm"));
        save_image(&s.sample.image, &image)?;
        save_mask(&s.sample.mask, &mask, MaskMode::Raw)?;
        entries.push(ManifestEntry {
            image,
            mask,
            split: split_for(i, count),
        });
    }
    let manifest = Manifest::new(entries)?;
    manifest.write(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}
