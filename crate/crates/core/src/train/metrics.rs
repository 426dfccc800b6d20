//! Accuracy and intersection-over-union.

use crate::error::{Error, Result};

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for v in [truth, pred] {
            if v >= self.classes {
                return Err(Error::IndexOutOfRange {
                    index: v,
                    len: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::shape(
                "confusion",
                format!("{} labels, {} predictions", truth.len(), pred.len()),
            ));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", "class counts differ"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn diagonal(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.classes).map(|c| self.get(c, c))
    }

    fn row_total(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    fn col_total(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// Overall accuracy; 0 when empty.
    pub fn oa(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.diagonal().sum::<u64>() as f64 / total as f64
    }

    /// Mean per-class recall over the classes that occur.
    pub fn macc(&self) -> f64 {
        let recalls: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let n = self.row_total(c);
                (n > 0).then(|| self.get(c, c) as f64 / n as f64)
            })
            .collect();
        mean(&recalls)
    }

    /// Mean per-class IoU over the classes that occur or are predicted.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes)
            .filter_map(|c| {
                let union = self.row_total(c) + self.col_total(c) - self.get(c, c);
                (union > 0).then(|| self.get(c, c) as f64 / union as f64)
            })
            .collect();
        mean(&ious)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Category names with their contiguous part-label ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartTaxonomy {
    names: Vec<String>,
    offsets: Vec<usize>,
}

impl PartTaxonomy {
    pub fn new(categories: &[(&str, usize)]) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::invalid("taxonomy has no categories"));
        }
        let mut offsets = vec![0];
        for &(name, parts) in categories {
            if parts == 0 {
                return Err(Error::invalid(format!("category `{name}` has no parts")));
            }
            offsets.push(offsets.last().unwrap() + parts);
        }
        Ok(PartTaxonomy {
            names: categories.iter().map(|(n, _)| n.to_string()).collect(),
            offsets,
        })
    }

    /// The 16 object categories and 50 parts of the ShapeNet part benchmark.
    pub fn shapenet() -> Self {
        Self::new(&[
            ("airplane", 4),
            ("bag", 2),
            ("cap", 2),
            ("car", 4),
            ("chair", 4),
            ("earphone", 3),
            ("guitar", 3),
            ("knife", 2),
            ("lamp", 4),
            ("laptop", 2),
            ("motorbike", 6),
            ("mug", 2),
            ("pistol", 3),
            ("rocket", 3),
            ("skateboard", 3),
            ("table", 3),
        ])
        .expect("static taxonomy")
    }

    pub fn categories(&self) -> usize {
        self.names.len()
    }

    pub fn total_parts(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn name(&self, category: usize) -> Option<&str> {
        self.names.get(category).map(String::as_str)
    }

    /// Part labels owned by `category`.
    pub fn parts(&self, category: usize) -> Result<std::ops::Range<usize>> {
        if category >= self.categories() {
            return Err(Error::IndexOutOfRange {
                index: category,
                len: self.categories(),
            });
        }
        Ok(self.offsets[category]..self.offsets[category + 1])
    }

    /// Category owning part label `part`.
    pub fn category_of(&self, part: usize) -> Option<usize> {
        (0..self.categories()).find(|&c| (self.offsets[c]..self.offsets[c + 1]).contains(&part))
    }
}

/// Per-row argmax over the columns in `allowed`, first index on ties.
pub fn restricted_argmax(logits: &[f64], cols: usize, allowed: std::ops::Range<usize>) -> Result<Vec<usize>> {
    if cols == 0 || !logits.len().is_multiple_of(cols) || allowed.is_empty() || allowed.end > cols {
        return Err(Error::shape(
            "restricted_argmax",
            format!("{} logits, {cols} columns, parts {allowed:?}", logits.len()),
        ));
    }
    Ok(logits
        .chunks_exact(cols)
        .map(|row| {
            let mut best = allowed.start;
            for j in allowed.clone() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Mean over a shape's parts of per-part IoU. A part absent from both
/// prediction and truth scores 1.
pub fn shape_iou(pred: &[usize], truth: &[usize], parts: std::ops::Range<usize>) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "shape_iou",
            format!("{} predictions, {} labels", pred.len(), truth.len()),
        ));
    }
    if parts.is_empty() {
        return Err(Error::invalid("shape has no parts"));
    }
    let n = parts.len() as f64;
    let total: f64 = parts
        .map(|p| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in pred.iter().zip(truth) {
                let (x, y) = (a == p, b == p);
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    Ok(total / n)
}

/// Segmentation scores of a set of shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    /// Mean over shapes.
    pub instance: f64,
    /// Mean over categories present of the per-category shape mean.
    pub class: f64,
    /// Per-category mean, `None` for categories without shapes.
    pub per_category: Vec<Option<f64>>,
}

/// Aggregates `(category, shape IoU)` pairs.
pub fn iou_metrics(taxonomy: &PartTaxonomy, shapes: &[(usize, f64)]) -> Result<IouReport> {
    if shapes.is_empty() {
        return Err(Error::invalid("no shapes to score"));
    }
    let mut sums = vec![(0.0, 0usize); taxonomy.categories()];
    for &(cat, iou) in shapes {
        let slot = sums.get_mut(cat).ok_or(Error::IndexOutOfRange {
            index: cat,
            len: taxonomy.categories(),
        })?;
        slot.0 += iou;
        slot.1 += 1;
    }
    let per_category: Vec<Option<f64>> = sums.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    Ok(IouReport {
        instance: shapes.iter().map(|s| s.1).sum::<f64>() / shapes.len() as f64,
        class: mean(&present),
        per_category,
    })
}
