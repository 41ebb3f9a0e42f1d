//! Images, masks, synthetic data and manifests.

mod manifest;
pub mod pnm;
mod synth;

use std::path::Path;

pub use manifest::{Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, synthetic_samples, ShapeKind, SynthSample, SynthShape, CLASS_COLORS, MIN_SYNTH_SIZE};

use crate::error::{Result, SegError};
use crate::labels::{LabelMap, NUM_CLASSES};
use crate::nn;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};
use pnm::{Pnm, PnmKind};

/// One RGB image with its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)` with values in `[0, 1]`.
    pub image: Tensor,
    /// `1 × h × w`.
    pub mask: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, mask: LabelMap) -> Result<Sample> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || mask.dims() != (1, s.h, s.w) {
            return Err(SegError::InvalidArgument(format!(
                "sample image {s} and mask {:?} do not agree",
                mask.dims()
            )));
        }
        mask.validate(NUM_CLASSES)?;
        Ok(Sample { image, mask })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }
}

/// Palette for `MaskMode::Palette`, indexed by class.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [0, 160, 0],
    [255, 255, 0],
    [255, 128, 0],
    [255, 0, 0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// P5 PGM holding class indices.
    #[default]
    Raw,
    /// P6 PPM colored with [`PALETTE`].
    Palette,
}

fn read_pnm(path: &Path, kind: PnmKind) -> Result<Pnm> {
    let bytes = std::fs::read(path).map_err(|e| SegError::io(path, e))?;
    let p = pnm::decode(&bytes).map_err(|e| e.at_path(path))?;
    if p.kind != kind {
        return Err(SegError::Format {
            path: Some(path.to_path_buf()),
            reason: format!("expected {kind:?} image, found {:?}", p.kind),
        });
    }
    Ok(p)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| SegError::io(path, e))
}

/// Reads a P6 image scaled by 1/255.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let p = read_pnm(path, PnmKind::Rgb)?;
    let (h, w) = (p.height, p.width);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        p.data[(y * w + x) * 3 + c] as f64 / 255.0
    }))
}

/// Writes a `(1, 3, h, w)` tensor as P6, rounding to the nearest level.
pub fn save_image(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.n != 1 || s.c != 3 {
        return Err(SegError::InvalidShape {
            op: "save_image",
            reason: format!("expected (1, 3, h, w), got {s}"),
        });
    }
    let mut data = Vec::with_capacity(s.h * s.w * 3);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                data.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    let p = Pnm {
        kind: PnmKind::Rgb,
        width: s.w,
        height: s.h,
        maxval: 255,
        data,
    };
    write_file(path, &pnm::encode(&p))
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a P5 mask; any value above 4 is a [`SegError::LabelRange`].
pub fn load_mask(path: &Path) -> Result<LabelMap> {
    let p = read_pnm(path, PnmKind::Gray)?;
    let mask = LabelMap::new(1, p.height, p.width, p.data)?;
    mask.validate(NUM_CLASSES).map_err(|e| match e {
        SegError::LabelRange { label, classes, .. } => SegError::LabelRange {
            label,
            classes,
            context: Some(path.display().to_string()),
        },
        other => other,
    })?;
    Ok(mask)
}

pub fn save_mask(mask: &LabelMap, path: &Path, mode: MaskMode) -> Result<()> {
    if mask.batch() != 1 {
        return Err(SegError::InvalidArgument(format!(
            "save_mask takes a single mask, got a batch of {}",
            mask.batch()
        )));
    }
    mask.validate(NUM_CLASSES)?;
    let p = match mode {
        MaskMode::Raw => Pnm {
            kind: PnmKind::Gray,
            width: mask.width(),
            height: mask.height(),
            maxval: 255,
            data: mask.labels().to_vec(),
        },
        MaskMode::Palette => Pnm {
            kind: PnmKind::Rgb,
            width: mask.width(),
            height: mask.height(),
            maxval: 255,
            data: mask.labels().iter().flat_map(|&l| PALETTE[l as usize]).collect(),
        },
    };
    write_file(path, &pnm::encode(&p))
}

pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = load_image(image_path)?;
    let mask = load_mask(mask_path)?;
    let s = image.shape();
    if (s.h, s.w) != (mask.height(), mask.width()) {
        return Err(SegError::Format {
            path: Some(mask_path.to_path_buf()),
            reason: format!(
                "mask is {}×{} but image {} is {}×{}",
                mask.height(),
                mask.width(),
                image_path.display(),
                s.h,
                s.w
            ),
        });
    }
    Sample::new(image, mask)
}

fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    (((2 * dst + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

/// Nearest-neighbor resampling with half-pixel centers.
pub fn resize_mask(mask: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (n, h, w) = mask.dims();
    if out_h == 0 || out_w == 0 {
        return Err(SegError::InvalidArgument(format!("cannot resize a mask to {out_h}×{out_w}")));
    }
    let rows: Vec<usize> = (0..out_h).map(|y| nearest_index(y, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| nearest_index(x, w, out_w)).collect();
    let mut labels = Vec::with_capacity(n * out_h * out_w);
    for b in 0..n {
        for &r in &rows {
            labels.extend(cols.iter().map(|&c| mask.get(b, r, c)));
        }
    }
    LabelMap::new(n, out_h, out_w, labels)
}

/// Square resize: bilinear image, nearest-neighbor mask.
pub fn resize_sample(s: &Sample, target: usize) -> Result<Sample> {
    if s.size() == (target, target) {
        return Ok(s.clone());
    }
    let image = nn::resize_bilinear(&mut Tape::new(), &s.image, target, target)?;
    let mask = resize_mask(&s.mask, target, target)?;
    Ok(Sample { image, mask })
}
