//! Per-class segmentation metrics and the optional connected-component
//! post-processing.

use std::collections::VecDeque;

use crate::labels::{LabelMap, BACKGROUND};

/// Pixel counts for one class against the rest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn pred_volume(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn gt_volume(&self) -> u64 {
        self.tp + self.fn_
    }

    fn both_empty(&self) -> bool {
        self.pred_volume() == 0 && self.gt_volume() == 0
    }
}

pub fn confusion_classes(pred: &[u8], gt: &[u8], class: u8) -> ConfusionCounts {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth differ in size");
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, class: u8) -> ConfusionCounts {
    assert!(pred.same_grid(gt), "prediction and ground truth grids differ");
    confusion_classes(pred.classes(), gt.classes(), class)
}

/// `2TP / (2TP + FP + FN)`, 1 when both masks are empty.
pub fn dice(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64
}

/// `TP / (TP + FP + FN)`, 1 when both masks are empty.
pub fn jaccard(c: &ConfusionCounts) -> f64 {
    if c.both_empty() {
        return 1.0;
    }
    c.tp as f64 / (c.tp + c.fp + c.fn_) as f64
}

/// `TP / (TP + FN)`. With an empty ground truth: 1 if the prediction is
/// empty too, else 0.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    if c.gt_volume() == 0 {
        return if c.pred_volume() == 0 { 1.0 } else { 0.0 };
    }
    c.tp as f64 / (c.tp + c.fn_) as f64
}

/// `TN / (TN + FP)`, 1 when every pixel belongs to the class.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    if c.tn + c.fp == 0 {
        return 1.0;
    }
    c.tn as f64 / (c.tn + c.fp) as f64
}

/// `|V_pred - V_gt| / V_gt`. An empty ground truth divides by one pixel so
/// the error stays finite and grows with the predicted volume.
pub fn rve(c: &ConfusionCounts) -> f64 {
    let (p, g) = (c.pred_volume() as f64, c.gt_volume() as f64);
    (p - g).abs() / g.max(1.0)
}

/// Foreground coordinates `(x, y)` of `class`.
pub fn class_coords(classes: &[u8], width: usize, class: u8) -> Vec<(usize, usize)> {
    classes
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == class)
        .map(|(i, _)| (i % width, i / width))
        .collect()
}

fn sq_dist(a: (usize, usize), b: (usize, usize)) -> u64 {
    let dx = a.0.abs_diff(b.0) as u64;
    let dy = a.1.abs_diff(b.1) as u64;
    dx * dx + dy * dy
}

/// Squared directed distance `max_a min_b |a - b|^2`.
fn directed_sq(a: &[(usize, usize)], b: &[(usize, usize)]) -> u64 {
    let mut worst = 0u64;
    for &p in a {
        let mut best = u64::MAX;
        for &q in b {
            let d = sq_dist(p, q);
            if d < best {
                best = d;
                // This point cannot raise the maximum any more.
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance in pixel units. Both empty gives 0; exactly
/// one empty gives `diagonal`.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)], diagonal: f64) -> f64 {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => 0.0,
        (true, false) | (false, true) => diagonal,
        (false, false) => (directed_sq(a, b).max(directed_sq(b, a)) as f64).sqrt(),
    }
}

pub fn grid_diagonal(width: usize, height: usize) -> f64 {
    ((width * width + height * height) as f64).sqrt()
}

/// Metrics of one class on one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub dice: f64,
    pub hd: f64,
    pub jc: f64,
    pub sen: f64,
    pub spe: f64,
    pub rve: f64,
}

pub fn class_metrics(pred: &[u8], gt: &[u8], width: usize, height: usize, class: u8) -> ClassMetrics {
    let c = confusion_classes(pred, gt, class);
    let hd = hausdorff(
        &class_coords(pred, width, class),
        &class_coords(gt, width, class),
        grid_diagonal(width, height),
    );
    ClassMetrics {
        dice: dice(&c),
        hd,
        jc: jaccard(&c),
        sen: sensitivity(&c),
        spe: specificity(&c),
        rve: rve(&c),
    }
}

/// 4-connected components of the pixels satisfying `member`, as index lists
/// in discovery order.
fn components(width: usize, height: usize, member: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let n = width * height;
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] || !member(start) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if !seen[j] && member(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        out.push(comp);
    }
    out
}

fn neighbours(i: usize, width: usize, height: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % width, i / width);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < width).then(|| i + 1),
        (y > 0).then(|| i - width),
        (y + 1 < height).then(|| i + width),
    ]
    .into_iter()
    .flatten()
}

/// For every foreground class: fill background regions that are enclosed by
/// that class alone, then remove 4-connected components smaller than a fifth
/// of the class's largest component.
pub fn postprocess(pred: &LabelMap) -> LabelMap {
    let (w, h) = (pred.width(), pred.height());
    let mut classes = pred.classes().to_vec();
    let mut present: Vec<u8> = classes.iter().copied().filter(|&c| c != BACKGROUND).collect();
    present.sort_unstable();
    present.dedup();
    for class in present {
        let holes = components(w, h, |i| classes[i] == BACKGROUND);
        for hole in holes {
            let touches_border = hole.iter().any(|&i| {
                let (x, y) = (i % w, i / w);
                x == 0 || y == 0 || x + 1 == w || y + 1 == h
            });
            if touches_border {
                continue;
            }
            let enclosed = hole.iter().all(|&i| {
                neighbours(i, w, h).all(|j| classes[j] == BACKGROUND || classes[j] == class)
            });
            if enclosed {
                for &i in &hole {
                    classes[i] = class;
                }
            }
        }
        let comps = components(w, h, |i| classes[i] == class);
        let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
        for comp in comps {
            if (comp.len() as f64) < 0.2 * largest as f64 {
                for i in comp {
                    classes[i] = BACKGROUND;
                }
            }
        }
    }
    let mut out = pred.clone();
    for (i, &c) in classes.iter().enumerate() {
        out.set(i, c, pred.provenance_at(i));
    }
    out
}
