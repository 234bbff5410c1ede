//! Pseudo labels over the unified class space built from class-specific
//! teachers, local ground truth, and (later in training) the global model.

use crate::error::{Result, UfpsError};
use crate::labels::{ClassSet, LabelMap, Provenance, BACKGROUND};
use crate::model::{self, argmax_over, ParamVector, PixelGrid, ProbMap};

/// A pretrained model together with the classes it was trained to segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub params: ParamVector,
    pub owned: ClassSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSet {
    teachers: Vec<Teacher>,
    ordering: Vec<u8>,
}

impl TeacherSet {
    /// `ordering` is the merge sequence: when several teachers claim a pixel
    /// the class appearing last wins.
    pub fn new(teachers: Vec<Teacher>, ordering: Vec<u8>) -> Result<Self> {
        let mut seen = ClassSet::empty();
        for t in &teachers {
            if t.owned.contains(BACKGROUND) || t.owned.is_empty() {
                return Err(UfpsError::Config(
                    "teachers must own a nonempty set of foreground classes".into(),
                ));
            }
            if !seen.is_disjoint(&t.owned) {
                return Err(UfpsError::Config("teacher class sets overlap".into()));
            }
            seen = seen.union(t.owned);
        }
        let order_set: ClassSet = ordering.iter().copied().collect();
        if order_set != seen || order_set.len() != ordering.len() {
            return Err(UfpsError::Config(
                "merge ordering must list every owned class exactly once".into(),
            ));
        }
        Ok(TeacherSet { teachers, ordering })
    }

    /// Merge sequence in ascending class id.
    pub fn ascending(teachers: Vec<Teacher>) -> Result<Self> {
        let ordering = teachers
            .iter()
            .fold(ClassSet::empty(), |acc, t| acc.union(t.owned))
            .iter()
            .collect();
        TeacherSet::new(teachers, ordering)
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn ordering(&self) -> &[u8] {
        &self.ordering
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }
}

/// One-hot prediction restricted to background plus the owned classes.
pub fn teacher_predict(teacher: &Teacher, grid: &PixelGrid) -> Result<(LabelMap, ProbMap)> {
    let probs = model::forward(&teacher.params, grid)?;
    let allowed = teacher.owned.with(BACKGROUND);
    let classes = (0..probs.pixels())
        .map(|i| argmax_over(probs.pixel(i), allowed.iter().map(usize::from)) as u8)
        .collect();
    let labels = LabelMap::uniform(grid.width(), grid.height(), classes, Provenance::Pseudo)?;
    Ok((labels, probs))
}

/// Background where every teacher says background; otherwise the claimed
/// class that comes last in `ordering`.
pub fn merge_pseudo(maps: &[LabelMap], ordering: &[u8]) -> LabelMap {
    let first = maps.first().expect("merge_pseudo needs at least one map");
    let mut rank = [0usize; 256];
    for (pos, &c) in ordering.iter().enumerate() {
        rank[c as usize] = pos + 1;
    }
    let classes = (0..first.len())
        .map(|i| {
            let mut best = BACKGROUND;
            let mut best_rank = 0;
            for m in maps {
                debug_assert!(m.same_grid(first));
                let c = m.class_at(i);
                if c != BACKGROUND && rank[c as usize] >= best_rank {
                    best = c;
                    best_rank = rank[c as usize];
                }
            }
            best
        })
        .collect();
    LabelMap::uniform(first.width(), first.height(), classes, Provenance::Pseudo)
        .expect("maps share one grid")
}

/// Stamps local ground truth for `annotated` classes onto `pseudo`. Pseudo
/// pixels of an annotated class that the ground truth does not confirm are
/// reset to background.
pub fn overwrite_ground_truth(pseudo: &LabelMap, gt: &LabelMap, annotated: ClassSet) -> LabelMap {
    assert!(pseudo.same_grid(gt), "pseudo and ground truth grids differ");
    let mut out = pseudo.clone();
    for i in 0..out.len() {
        let g = gt.class_at(i);
        if annotated.contains(g) && gt.provenance_at(i) != Provenance::Unknown {
            out.set(i, g, Provenance::GroundTruth);
        } else if annotated.contains(out.class_at(i)) {
            out.set(i, BACKGROUND, Provenance::Pseudo);
        }
    }
    out
}

/// Refines the global model's pseudo label with the teachers' merged label.
///
/// With `I` the number of pixels foreground in both maps and `G` the number
/// foreground in `global_pred`, returns `global_pred` when `G = 0` or
/// `I < threshold * G`, else the same-class intersection.
pub fn gmt_refine(global_pred: &LabelMap, teacher_merged: &LabelMap, threshold: f64) -> LabelMap {
    assert!(global_pred.same_grid(teacher_merged));
    let g = global_pred.classes();
    let t = teacher_merged.classes();
    let global_fg = g.iter().filter(|&&c| c != BACKGROUND).count();
    let both_fg = g
        .iter()
        .zip(t)
        .filter(|(&a, &b)| a != BACKGROUND && b != BACKGROUND)
        .count();
    if global_fg == 0 || (both_fg as f64) < threshold * global_fg as f64 {
        return global_pred.clone();
    }
    let classes = g
        .iter()
        .zip(t)
        .map(|(&a, &b)| if a == b { a } else { BACKGROUND })
        .collect();
    LabelMap::uniform(
        global_pred.width(),
        global_pred.height(),
        classes,
        Provenance::Pseudo,
    )
    .expect("same grid")
}

/// Teacher predictions and their merge for one image.
pub struct TeacherOutput {
    pub maps: Vec<LabelMap>,
    pub probs: Vec<ProbMap>,
    pub merged: LabelMap,
}

pub fn run_teachers(teachers: &TeacherSet, grid: &PixelGrid) -> Result<TeacherOutput> {
    let mut maps = Vec::with_capacity(teachers.len());
    let mut probs = Vec::with_capacity(teachers.len());
    for t in teachers.teachers() {
        let (m, p) = teacher_predict(t, grid)?;
        maps.push(m);
        probs.push(p);
    }
    let merged = merge_pseudo(&maps, teachers.ordering());
    Ok(TeacherOutput {
        maps,
        probs,
        merged,
    })
}
