//! Segmentation scoring: pixel accuracy, per-class F1 and IoU, mean
//! scores with absent-class exclusion, and the merged-category overall F1
//! used for face parsing (brows and eyes merged left+right, mouth parts
//! merged).

use std::collections::BTreeSet;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// Confusion counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        ConfusionMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one prediction/ground-truth pair of equal-shaped maps.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::dimension(
                "accumulate",
                &[pred.height, pred.width],
                &[gt.height, gt.width],
            ));
        }
        for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
            if p as usize >= self.n || g as usize >= self.n {
                return Err(Error::contract(format!(
                    "class id out of range: pred {p}, gt {g}, n {}",
                    self.n
                )));
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of shard matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::dimension("merge", &[self.n], &[other.n]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|j| self.at(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|i| self.at(i, c)).sum()
    }
}

/// All derived scores. Classes absent from both maps carry `None` and are
/// excluded from every mean; class 0 is the background.
#[derive(Debug, Clone)]
pub struct Scores {
    pub pixel_acc: f64,
    pub per_class_f1: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_f1_excl_bg: f64,
}

/// Computes accuracy, per-class F1/IoU and their means from a non-empty
/// confusion matrix.
pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::contract("scores of an empty confusion matrix"));
    }
    let trace: u64 = (0..cm.n).map(|c| cm.at(c, c)).sum();
    let mut per_class_f1 = Vec::with_capacity(cm.n);
    let mut per_class_iou = Vec::with_capacity(cm.n);
    for c in 0..cm.n {
        let tp = cm.at(c, c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        if tp + fp + fn_ == 0 {
            per_class_f1.push(None);
            per_class_iou.push(None);
        } else {
            per_class_f1.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            per_class_iou.push(Some(tp as f64 / (tp + fp + fn_) as f64));
        }
    }
    let mean = |vals: &[Option<f64>]| -> f64 {
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(Scores {
        pixel_acc: trace as f64 / total as f64,
        miou: mean(&per_class_iou),
        mean_f1_excl_bg: mean(&per_class_f1[1..]),
        per_class_f1,
        per_class_iou,
    })
}

/// Named groups of class ids scored as single merged categories.
#[derive(Debug, Clone)]
pub struct MergeSpec {
    pub categories: Vec<(String, Vec<usize>)>,
}

impl MergeSpec {
    pub fn new(categories: Vec<(&str, Vec<usize>)>) -> Self {
        MergeSpec {
            categories: categories
                .into_iter()
                .map(|(n, ids)| (n.to_string(), ids))
                .collect(),
        }
    }

    /// Face-parsing style merge for the 8 synthetic classes: eyes and
    /// brows pair up, nose and mouth stand alone. Background and skin are
    /// not merged categories.
    pub fn face_default() -> Self {
        MergeSpec::new(vec![
            ("eyes", vec![2, 3]),
            ("brows", vec![4, 5]),
            ("nose", vec![6]),
            ("mouth", vec![7]),
        ])
    }

    /// One category per foreground class, the identity merge.
    pub fn singletons(num_classes: usize) -> Self {
        MergeSpec {
            categories: (1..num_classes)
                .map(|c| (format!("class_{c}"), vec![c]))
                .collect(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (name, ids) in &self.categories {
            if ids.is_empty() {
                return Err(Error::contract(format!("merge category {name} is empty")));
            }
            for &id in ids {
                if id >= n {
                    return Err(Error::contract(format!(
                        "merge category {name} references class {id} >= {n}"
                    )));
                }
                if !seen.insert(id) {
                    return Err(Error::contract(format!(
                        "class {id} appears in more than one merge category"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Maps a class id to its category index, or `categories.len()` for
    /// the implicit "other" bucket.
    fn category_of(&self, class: usize) -> usize {
        self.categories
            .iter()
            .position(|(_, ids)| ids.contains(&class))
            .unwrap_or(self.categories.len())
    }

    /// Folds a confusion matrix into (categories + other) by summing rows
    /// and columns within each category.
    pub fn merge_matrix(&self, cm: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        self.validate(cm.n)?;
        let m = self.categories.len() + 1;
        let mut merged = ConfusionMatrix::new(m);
        for gt in 0..cm.n {
            for pred in 0..cm.n {
                let v = cm.at(gt, pred);
                if v > 0 {
                    merged.counts[self.category_of(gt) * m + self.category_of(pred)] += v;
                }
            }
        }
        Ok(merged)
    }
}

/// Micro-averaged F1 over the merged foreground categories:
/// `2*sum(TP) / (2*sum(TP) + sum(FP) + sum(FN))`, with pixels outside all
/// categories collapsed into an ignored "other" bucket.
pub fn merged_overall_f1(cm: &ConfusionMatrix, spec: &MergeSpec) -> Result<f64> {
    let merged = spec.merge_matrix(cm)?;
    let cats = spec.categories.len();
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for c in 0..cats {
        let t = merged.at(c, c);
        tp += t;
        fp += merged.col_sum(c) - t;
        fn_ += merged.row_sum(c) - t;
    }
    if 2 * tp + fp + fn_ == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Macro-averaged F1 over the merged categories (reported alongside the
/// micro score for transparency).
pub fn merged_macro_f1(cm: &ConfusionMatrix, spec: &MergeSpec) -> Result<f64> {
    let merged = spec.merge_matrix(cm)?;
    let cats = spec.categories.len();
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..cats {
        let tp = merged.at(c, c);
        let fp = merged.col_sum(c) - tp;
        let fn_ = merged.row_sum(c) - tp;
        if 2 * tp + fp + fn_ > 0 {
            sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Ok(0.0);
    }
    Ok(sum / present as f64)
}

/// Full evaluation record, rendered as flat `key=value` text.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub scores: Scores,
    pub merged_overall_f1: f64,
    pub merged_macro_f1: f64,
}

impl MetricsReport {
    pub fn from_matrix(cm: &ConfusionMatrix, spec: &MergeSpec) -> Result<Self> {
        Ok(MetricsReport {
            scores: scores(cm)?,
            merged_overall_f1: merged_overall_f1(cm, spec)?,
            merged_macro_f1: merged_macro_f1(cm, spec)?,
        })
    }

    /// One `key=value` pair per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("pixel_acc={:.6}\n", self.scores.pixel_acc));
        out.push_str(&format!("miou={:.6}\n", self.scores.miou));
        for (c, f1) in self.scores.per_class_f1.iter().enumerate() {
            match f1 {
                Some(v) => out.push_str(&format!("f1_class_{c}={v:.6}\n")),
                None => out.push_str(&format!("f1_class_{c}=absent\n")),
            }
        }
        out.push_str(&format!(
            "mean_f1_excl_bg={:.6}\n",
            self.scores.mean_f1_excl_bg
        ));
        out.push_str(&format!(
            "merged_overall_f1={:.6}\n",
            self.merged_overall_f1
        ));
        out.push_str(&format!("merged_macro_f1={:.6}\n", self.merged_macro_f1));
        out
    }

    /// Single-line machine-readable record.
    pub fn to_record(&self) -> String {
        format!(
            "pixel_acc={:.6}\tmiou={:.6}\tmean_f1_excl_bg={:.6}\tmerged_overall_f1={:.6}",
            self.scores.pixel_acc,
            self.scores.miou,
            self.scores.mean_f1_excl_bg,
            self.merged_overall_f1
        )
    }
}
