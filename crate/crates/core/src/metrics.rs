//! Pixel-level evaluation: confusion matrix, quadratic-weighted kappa and a
//! per-class report.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SegError};
use crate::labels::{class_name, LabelMap};

/// `k × k` pixel counts; entry `(r, c)` counts pixels with truth `r`
/// predicted as `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Row-major counts.
    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(SegError::InvalidArgument(format!(
                "{k}×{k} confusion matrix needs {} counts, got {}",
                k * k,
                counts.len()
            )));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Adds `pred`/`truth` pixel pairs.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.dims() != truth.dims() {
            return Err(SegError::InvalidArgument(format!(
                "prediction {:?} and truth {:?} label maps differ in size",
                pred.dims(),
                truth.dims()
            )));
        }
        pred.validate(self.k)?;
        truth.validate(self.k)?;
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            self.counts[t as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(SegError::InvalidArgument(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.k, other.k
            )));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Drops row and column `class`.
    pub fn without_class(&self, class: usize) -> ConfusionMatrix {
        let keep: Vec<usize> = (0..self.k).filter(|&i| i != class).collect();
        let counts = keep
            .iter()
            .flat_map(|&r| keep.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        ConfusionMatrix {
            k: keep.len(),
            counts,
        }
    }
}

pub fn confusion(pred: &LabelMap, truth: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

/// Cohen's kappa with weights `(i − j)² / (K − 1)²` over the ordinal class order.
///
/// Fails with [`SegError::Undefined`] for an empty matrix, fewer than two
/// classes, or zero expected disagreement.
pub fn quadratic_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k;
    let total = cm.total();
    if total == 0 {
        return Err(SegError::Undefined("kappa of an empty confusion matrix".into()));
    }
    if k < 2 {
        return Err(SegError::Undefined("kappa needs at least two classes".into()));
    }
    let n = total as f64;
    let rows: Vec<f64> = (0..k)
        .map(|i| (0..k).map(|j| cm.get(i, j)).sum::<u64>() as f64 / n)
        .collect();
    let cols: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| cm.get(i, j)).sum::<u64>() as f64 / n)
        .collect();
    let norm = ((k - 1) * (k - 1)) as f64;
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = (i as f64 - j as f64).powi(2) / norm;
            observed += w * cm.get(i, j) as f64 / n;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected == 0.0 {
        return Err(SegError::Undefined(
            "kappa with zero expected disagreement".into(),
        ));
    }
    Ok(1.0 - observed / expected)
}

/// [`quadratic_kappa`] optionally computed without the background class.
pub fn quadratic_kappa_with(cm: &ConfusionMatrix, exclude_background: bool) -> Result<f64> {
    if exclude_background {
        quadratic_kappa(&cm.without_class(0))
    } else {
        quadratic_kappa(cm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub classes: Vec<ClassReport>,
    pub accuracy: f64,
}

impl Report {
    /// Mean hard Dice over classes `1..`, skipping undefined ones.
    pub fn mean_foreground_dice(&self) -> Option<f64> {
        let vals: Vec<f64> = self.classes.iter().skip(1).filter_map(|c| c.dice).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_report(cm: &ConfusionMatrix) -> Result<Report> {
    let total = cm.total();
    if total == 0 {
        return Err(SegError::Undefined("report of an empty confusion matrix".into()));
    }
    let classes = (0..cm.k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp = (0..cm.k).filter(|&r| r != c).map(|r| cm.get(r, c)).sum::<u64>();
            let fn_ = (0..cm.k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum::<u64>();
            ClassReport {
                class: c,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                dice: ratio(2 * tp, 2 * tp + fp + fn_),
                iou: ratio(tp, tp + fp + fn_),
            }
        })
        .collect();
    Ok(Report {
        classes,
        accuracy: cm.trace() as f64 / total as f64,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v}")).unwrap_or_else(|| "n/a".into())
}

/// Metrics CSV: one row per class, then `accuracy`, `mean_foreground_dice`
/// and `quadratic_kappa` summary rows with the value in the second column.
pub fn metrics_csv(report: &Report, kappa: Option<f64>) -> String {
    let mut s = String::from("class,precision,recall,dice,iou\n");
    for c in &report.classes {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            class_name(c.class),
            cell(c.precision),
            cell(c.recall),
            cell(c.dice),
            cell(c.iou)
        );
    }
    let _ = writeln!(s, "accuracy,{},,,", report.accuracy);
    let _ = writeln!(s, "mean_foreground_dice,{},,,", cell(report.mean_foreground_dice()));
    let _ = writeln!(s, "quadratic_kappa,{},,,", cell(kappa));
    s
}

pub fn write_metrics_csv(path: &Path, report: &Report, kappa: Option<f64>) -> Result<()> {
    std::fs::write(path, metrics_csv(report, kappa)).map_err(|e| SegError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_give_diagonal() {
        let m = LabelMap::new(1, 2, 3, vec![0, 1, 1, 4, 4, 4]).unwrap();
        let cm = confusion(&m, &m, 5).unwrap();
        assert_eq!(cm.trace(), 6);
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.get(4, 4), 3);
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn single_pixel_off_diagonal() {
        let t = LabelMap::new(1, 1, 1, vec![2]).unwrap();
        let p = LabelMap::new(1, 1, 1, vec![4]).unwrap();
        let cm = confusion(&p, &t, 5).unwrap();
        assert_eq!(cm.get(2, 4), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn confusion_rejects_bad_labels() {
        let t = LabelMap::new(1, 1, 2, vec![0, 5]).unwrap();
        assert!(matches!(confusion(&t, &t, 5), Err(SegError::LabelRange { .. })));
        let small = LabelMap::new(1, 1, 1, vec![0]).unwrap();
        assert!(confusion(&small, &t, 5).is_err());
    }

    #[test]
    fn kappa_examples() {
        let diag = ConfusionMatrix::from_counts(5, (0..25).map(|i| if i % 6 == 0 { 3 } else { 0 }).collect()).unwrap();
        assert_eq!(quadratic_kappa(&diag).unwrap(), 1.0);
        let two = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        assert!((quadratic_kappa(&two).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kappa_undefined_cases() {
        assert!(matches!(quadratic_kappa(&ConfusionMatrix::new(5)), Err(SegError::Undefined(_))));
        // Both raters constant on the same class.
        let mut c = vec![0; 25];
        c[6] = 10;
        let cm = ConfusionMatrix::from_counts(5, c).unwrap();
        assert!(matches!(quadratic_kappa(&cm), Err(SegError::Undefined(_))));
    }

    #[test]
    fn excluding_background() {
        let cm = ConfusionMatrix::from_counts(3, vec![50, 1, 0, 2, 5, 1, 0, 1, 4]).unwrap();
        let fg = cm.without_class(0);
        assert_eq!(fg.counts(), &[5, 1, 1, 4]);
        assert_eq!(quadratic_kappa_with(&cm, true).unwrap(), quadratic_kappa(&fg).unwrap());
    }

    #[test]
    fn report_values() {
        // Class 0: TP=2, FP=1, FN=1.
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 3]).unwrap();
        let r = per_class_report(&cm).unwrap();
        assert!((r.classes[0].dice.unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.classes[0].iou.unwrap() - 0.5).abs() < 1e-15);
        assert!((r.accuracy - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_na() {
        let m = LabelMap::new(1, 1, 2, vec![0, 1]).unwrap();
        let r = per_class_report(&confusion(&m, &m, 5).unwrap()).unwrap();
        assert_eq!(r.classes[0].dice, Some(1.0));
        assert_eq!(r.classes[3].dice, None);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_foreground_dice(), Some(1.0));
        let csv = metrics_csv(&r, Some(1.0));
        assert!(csv.starts_with("class,precision,recall,dice,iou\nBG,1,1,1,1\n"));
        assert!(csv.contains("GP4,n/a,n/a,n/a,n/a\n"));
        assert!(csv.ends_with("quadratic_kappa,1,,,\n"));
    }
}
