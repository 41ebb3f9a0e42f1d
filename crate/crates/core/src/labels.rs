//! Per-pixel class labels.

use std::fmt;

use crate::error::{Result, SegError};

pub const NUM_CLASSES: usize = 5;

/// Class order BG < NC < GP3 < GP4 < GP5, used for the ordinal metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum GleasonClass {
    Background = 0,
    NonCancerous = 1,
    Gp3 = 2,
    Gp4 = 3,
    Gp5 = 4,
}

impl GleasonClass {
    pub const ALL: [GleasonClass; NUM_CLASSES] = [
        GleasonClass::Background,
        GleasonClass::NonCancerous,
        GleasonClass::Gp3,
        GleasonClass::Gp4,
        GleasonClass::Gp5,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            GleasonClass::Background => "BG",
            GleasonClass::NonCancerous => "NC",
            GleasonClass::Gp3 => "GP3",
            GleasonClass::Gp4 => "GP4",
            GleasonClass::Gp5 => "GP5",
        }
    }
}

impl fmt::Display for GleasonClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Name used in reports for class `i`; falls back to `class<i>` beyond the
/// five Gleason labels.
pub fn class_name(i: usize) -> String {
    GleasonClass::from_index(i)
        .map(|c| c.short_name().to_string())
        .unwrap_or_else(|| format!("class{i}"))
}

/// Batch of `h × w` label planes, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(SegError::InvalidArgument(format!(
                "label map {n}×{h}×{w} needs {} labels, got {}",
                n * h * w,
                labels.len()
            )));
        }
        Ok(LabelMap { n, h, w, labels })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        LabelMap {
            n,
            h,
            w,
            labels: vec![label; n * h * w],
        }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.labels[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, label: u8) {
        self.labels[(n * self.h + y) * self.w + x] = label;
    }

    /// Item `i` of the batch as a single-plane map.
    pub fn item(&self, i: usize) -> LabelMap {
        let len = self.h * self.w;
        LabelMap {
            n: 1,
            h: self.h,
            w: self.w,
            labels: self.labels[i * len..(i + 1) * len].to_vec(),
        }
    }

    pub fn stack(items: &[LabelMap]) -> Result<LabelMap> {
        let first = items
            .first()
            .ok_or_else(|| SegError::InvalidArgument("cannot stack zero label maps".into()))?;
        let mut labels = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(SegError::InvalidArgument(format!(
                    "label map {}×{} does not match {}×{}",
                    m.h, m.w, first.h, first.w
                )));
            }
            n += m.n;
            labels.extend_from_slice(&m.labels);
        }
        LabelMap::new(n, first.h, first.w, labels)
    }

    /// Fails with [`SegError::LabelRange`] if any label is `>= classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l as usize >= classes) {
            Some(&l) => Err(SegError::LabelRange {
                label: l.into(),
                classes,
                context: None,
            }),
            None => Ok(()),
        }
    }

    /// Sorted distinct labels.
    pub fn present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            if let Some(slot) = h.get_mut(l as usize) {
                *slot += 1;
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_range() {
        let m = LabelMap::new(1, 1, 3, vec![0, 4, 2]).unwrap();
        assert!(m.validate(5).is_ok());
        assert!(matches!(m.validate(4), Err(SegError::LabelRange { label: 4, .. })));
        assert_eq!(m.present(), vec![0, 2, 4]);
    }

    #[test]
    fn class_names() {
        let names: Vec<_> = (0..6).map(class_name).collect();
        assert_eq!(names, ["BG", "NC", "GP3", "GP4", "GP5", "class5"]);
    }
}
