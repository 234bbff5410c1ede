//! Label maps over the unified class space and small class-id sets.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};

pub const BACKGROUND: u8 = 0;

/// Set of class ids below 32, stored as a bitmask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u8>", into = "Vec<u8>")]
pub struct ClassSet(u32);

impl ClassSet {
    pub const fn empty() -> Self {
        ClassSet(0)
    }

    /// `{1, ..., n}`: every foreground class of an `n`-class problem.
    pub fn foreground(n: usize) -> Self {
        (1..=n as u8).collect()
    }

    /// `{0, ..., n}`.
    pub fn all(n: usize) -> Self {
        (0..=n as u8).collect()
    }

    pub fn contains(&self, class: u8) -> bool {
        class < 32 && self.0 & (1 << class) != 0
    }

    pub fn insert(&mut self, class: u8) {
        assert!(class < 32, "class id {class} out of range");
        self.0 |= 1 << class;
    }

    pub fn with(mut self, class: u8) -> Self {
        self.insert(class);
        self
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: ClassSet) -> ClassSet {
        ClassSet(self.0 | other.0)
    }

    pub fn intersection(self, other: ClassSet) -> ClassSet {
        ClassSet(self.0 & other.0)
    }

    pub fn is_disjoint(&self, other: &ClassSet) -> bool {
        self.0 & other.0 == 0
    }

    /// Ascending class ids.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        let bits = self.0;
        (0..32u8).filter(move |c| bits & (1 << c) != 0)
    }
}

impl FromIterator<u8> for ClassSet {
    fn from_iter<I: IntoIterator<Item = u8>>(iter: I) -> Self {
        let mut s = ClassSet::empty();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

impl From<Vec<u8>> for ClassSet {
    fn from(v: Vec<u8>) -> Self {
        v.into_iter().collect()
    }
}

impl From<ClassSet> for Vec<u8> {
    fn from(s: ClassSet) -> Self {
        s.iter().collect()
    }
}

impl fmt::Debug for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    /// Label withheld: the stored class is the true class but the client
    /// may not use it.
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    classes: Vec<u8>,
    provenance: Vec<Provenance>,
}

impl LabelMap {
    pub fn new(
        width: usize,
        height: usize,
        classes: Vec<u8>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let n = width * height;
        for len in [classes.len(), provenance.len()] {
            if len != n {
                return Err(UfpsError::LengthMismatch {
                    expected: n,
                    got: len,
                });
            }
        }
        Ok(LabelMap {
            width,
            height,
            classes,
            provenance,
        })
    }

    pub fn uniform(width: usize, height: usize, classes: Vec<u8>, provenance: Provenance) -> Result<Self> {
        let n = classes.len();
        LabelMap::new(width, height, classes, vec![provenance; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn class_at(&self, i: usize) -> u8 {
        self.classes[i]
    }

    pub fn provenance_at(&self, i: usize) -> Provenance {
        self.provenance[i]
    }

    pub fn set(&mut self, i: usize, class: u8, provenance: Provenance) {
        self.classes[i] = class;
        self.provenance[i] = provenance;
    }

    pub fn same_grid(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    pub fn count_provenance(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&q| q == p).count()
    }

    /// Same classes with every pixel marked as ground truth.
    pub fn unmasked(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            classes: self.classes.clone(),
            provenance: vec![Provenance::GroundTruth; self.classes.len()],
        }
    }

    /// Training target for a partially annotated client: usable ground-truth
    /// classes in `annotated` are kept, everything else becomes background.
    pub fn partial_target(&self, annotated: ClassSet) -> LabelMap {
        let classes = self
            .classes
            .iter()
            .zip(&self.provenance)
            .map(|(&c, &p)| {
                if p == Provenance::GroundTruth && annotated.contains(c) {
                    c
                } else {
                    BACKGROUND
                }
            })
            .collect();
        LabelMap {
            width: self.width,
            height: self.height,
            classes,
            provenance: self.provenance.clone(),
        }
    }
}
