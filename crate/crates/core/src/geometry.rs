//! Pixel-grid geometry: run-length masks, disease boxes and the
//! anatomy/disease relation mapping.
//!
//! All grids are row-major: pixel `(x, y)` lives at index `y * width + x`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight anatomical regions every scene carries.
pub const ANATOMIES: [&str; 8] = [
    "right upper lung",
    "right lower lung",
    "left upper lung",
    "left lower lung",
    "trachea",
    "mediastinum",
    "heart",
    "diaphragm",
];

/// Dense binary grid, the decoded form of a [`PixelMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Binary mask stored as sorted, non-overlapping `(start, length)` runs of
/// set pixels over row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelMask {
    pub width: usize,
    pub height: usize,
    pub runs: Vec<(usize, usize)>,
}

impl PixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            runs: Vec::new(),
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            runs: if n > 0 { vec![(0, n)] } else { Vec::new() },
        }
    }

    /// Mask covering the rectangle `[x0, x1) x [y0, y1)`.
    pub fn from_rect(width: usize, height: usize, rect: BoundingBox) -> Self {
        let runs = (rect.y0..rect.y1)
            .map(|y| (y * width + rect.x0, rect.width()))
            .collect();
        let mut mask = Self {
            width,
            height,
            runs,
        };
        mask.coalesce();
        mask
    }

    /// Checks ordering, overlap and bounds of the runs.
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        let mut prev_end = 0usize;
        for (i, &(start, len)) in self.runs.iter().enumerate() {
            if len == 0 {
                return Err(Error::InvalidRuns(format!("run {i} has zero length")));
            }
            if i > 0 && start < prev_end {
                return Err(Error::InvalidRuns(format!(
                    "run {i} starts at {start}, before previous end {prev_end}"
                )));
            }
            let end = start
                .checked_add(len)
                .ok_or_else(|| Error::InvalidRuns(format!("run {i} overflows")))?;
            if end > n {
                return Err(Error::InvalidRuns(format!(
                    "run {i} ends at {end}, past {n} pixels"
                )));
            }
            prev_end = end;
        }
        Ok(())
    }

    /// Merges runs that touch so the encoding is canonical.
    fn coalesce(&mut self) {
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(self.runs.len());
        for &(start, len) in &self.runs {
            if len == 0 {
                continue;
            }
            match merged.last_mut() {
                Some((s, l)) if *s + *l == start => *l += len,
                _ => merged.push((start, len)),
            }
        }
        self.runs = merged;
    }

    pub fn area(&self) -> usize {
        mask_area(self)
    }

    /// Tight bounding rectangle of the set pixels, `None` for an empty mask.
    pub fn bounding_rect(&self) -> Option<BoundingBox> {
        if self.runs.is_empty() {
            return None;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &(start, len) in &self.runs {
            let first_row = start / self.width;
            let last_row = (start + len - 1) / self.width;
            y0 = y0.min(first_row);
            y1 = y1.max(last_row + 1);
            if first_row == last_row {
                x0 = x0.min(start % self.width);
                x1 = x1.max((start + len - 1) % self.width + 1);
            } else {
                // a run spanning rows touches both the left and right edges
                x0 = 0;
                x1 = self.width;
            }
        }
        Some(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn contains(&self, index: usize) -> bool {
        // runs are sorted by start
        let pos = self.runs.partition_point(|&(s, _)| s <= index);
        pos > 0 && {
            let (s, l) = self.runs[pos - 1];
            index < s + l
        }
    }
}

/// Axis-aligned box with inclusive-exclusive pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidBox([x0, y0, x1, y1]));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }
}

/// A synthetic annotated image: intensity grid, one mask per anatomy and the
/// labelled disease boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub scene_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub anatomies: BTreeMap<String, PixelMask>,
    pub diseases: Vec<(String, BoundingBox)>,
}

impl SceneAnnotation {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidScene {
            scene_id: self.scene_id.clone(),
            reason,
        };
        if self.image.len() != self.width * self.height {
            return Err(bad(format!(
                "image has {} values for a {}x{} grid",
                self.image.len(),
                self.width,
                self.height
            )));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(bad(format!("intensity {v} outside [0, 1]")));
        }
        if self.anatomies.len() != ANATOMIES.len()
            || ANATOMIES.iter().any(|a| !self.anatomies.contains_key(*a))
        {
            return Err(bad("anatomy labels differ from the fixed set of 8".into()));
        }
        for (label, mask) in &self.anatomies {
            if mask.width != self.width || mask.height != self.height {
                return Err(bad(format!("mask `{label}` has the wrong grid size")));
            }
            mask.validate()
                .map_err(|e| bad(format!("mask `{label}`: {e}")))?;
        }
        for (label, bbox) in &self.diseases {
            if !bbox.fits(self.width, self.height) {
                return Err(bad(format!("box for `{label}` does not fit the grid")));
            }
        }
        Ok(())
    }

    pub fn disease_labels(&self) -> BTreeSet<&str> {
        self.diseases.iter().map(|(l, _)| l.as_str()).collect()
    }
}

/// The (anatomy, disease) pairs judged present in one scene.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationMap {
    pub scene_id: String,
    pub pairs: BTreeSet<(String, String)>,
}

impl RelationMap {
    pub fn contains(&self, anatomy: &str, disease: &str) -> bool {
        self.pairs
            .contains(&(anatomy.to_string(), disease.to_string()))
    }

    /// Diseases related to `anatomy`, in lexicographic order.
    pub fn diseases_of<'a>(&'a self, anatomy: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.pairs
            .iter()
            .filter(move |(a, _)| a == anatomy)
            .map(|(_, d)| d.as_str())
    }

    pub fn has_any(&self, anatomy: &str) -> bool {
        self.diseases_of(anatomy).next().is_some()
    }
}

pub fn mask_area(mask: &PixelMask) -> usize {
    mask.runs.iter().map(|&(_, len)| len).sum()
}

pub fn rle_encode(grid: &BitGrid) -> PixelMask {
    let mut runs = Vec::new();
    let mut start: Option<usize> = None;
    for (i, &bit) in grid.bits.iter().enumerate() {
        match (bit, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, grid.bits.len() - s));
    }
    PixelMask {
        width: grid.width,
        height: grid.height,
        runs,
    }
}

pub fn rle_decode(mask: &PixelMask) -> Result<BitGrid> {
    mask.validate()?;
    let mut grid = BitGrid::new(mask.width, mask.height);
    for &(start, len) in &mask.runs {
        grid.bits[start..start + len].fill(true);
    }
    Ok(grid)
}

/// Pixel count of `box ∩ mask` together with the box area.
pub fn overlap_counts(bbox: &BoundingBox, mask: &PixelMask) -> (usize, usize) {
    let w = mask.width;
    let mut inter = 0usize;
    for &(start, len) in &mask.runs {
        let end = start + len;
        let mut pos = start;
        while pos < end {
            let row = pos / w;
            let row_end = ((row + 1) * w).min(end);
            if row >= bbox.y1 {
                break;
            }
            if row >= bbox.y0 {
                let lo = (pos % w).max(bbox.x0);
                let hi = ((row_end - 1) % w + 1).min(bbox.x1);
                if hi > lo {
                    inter += hi - lo;
                }
            }
            pos = row_end;
        }
    }
    (inter, bbox.area())
}

/// Intersection of the box with the mask, normalised by the box area.
pub fn iou_over_disease(bbox: &BoundingBox, mask: &PixelMask, width: usize, height: usize) -> Result<f64> {
    if mask.width != width || mask.height != height {
        return Err(Error::DimensionMismatch {
            expected_w: width,
            expected_h: height,
            got_w: mask.width,
            got_h: mask.height,
        });
    }
    if !bbox.fits(width, height) {
        return Err(Error::InvalidBox([bbox.x0, bbox.y0, bbox.x1, bbox.y1]));
    }
    let (inter, area) = overlap_counts(bbox, mask);
    Ok(inter as f64 / area as f64)
}

/// Pairs `(anatomy, disease)` whose box/mask overlap is strictly over `delta`
/// for at least one box of the disease.
pub fn map_relations(scene: &SceneAnnotation, delta: f64) -> RelationMap {
    let mut pairs = BTreeSet::new();
    for (disease, bbox) in &scene.diseases {
        for (anatomy, mask) in &scene.anatomies {
            let (inter, area) = overlap_counts(bbox, mask);
            if area > 0 && inter as f64 / area as f64 > delta {
                pairs.insert((anatomy.clone(), disease.clone()));
            }
        }
    }
    RelationMap {
        scene_id: scene.scene_id.clone(),
        pairs,
    }
}
