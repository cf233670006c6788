//! Semantic class matching and cross-image attention masks.
//!
//! Source and style segmentations are matched by class name (plus explicit
//! user overrides), downsampled to the attention grid, and turned into a
//! boolean mask whose rows index output tokens and whose columns index style
//! tokens. A row is true exactly where the style token carries the class that
//! the source token's class is matched to.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SegmatchError {
    #[error("source class {0:?} is overridden more than once")]
    ConflictingOverride(String),
    #[error("label id {0} is not in the label table")]
    UnknownLabel(u16),
    #[error("invalid grid size {d} for a {width}x{height} map")]
    InvalidGrid { d: usize, width: usize, height: usize },
    #[error("maps are {a} and {b}; expected equal grids")]
    GridMismatch { a: String, b: String },
    #[error("source token {row} has no admissible style token and the policy keeps the source")]
    EmptyRowWithKeepSource { row: usize },
    #[error("label data has length {found}, expected {expected}")]
    LengthMismatch { found: usize, expected: usize },
}

/// Categorical label raster with its id → class-name table.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u16>,
    pub label_table: BTreeMap<u16, String>,
}

impl SemanticMap {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u16>,
        label_table: BTreeMap<u16, String>,
    ) -> Result<Self, SegmatchError> {
        let map = Self {
            width,
            height,
            labels,
            label_table,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), SegmatchError> {
        if self.labels.len() != self.width * self.height {
            return Err(SegmatchError::LengthMismatch {
                found: self.labels.len(),
                expected: self.width * self.height,
            });
        }
        match self.labels.iter().find(|id| !self.label_table.contains_key(id)) {
            Some(id) => Err(SegmatchError::UnknownLabel(*id)),
            None => Ok(()),
        }
    }

    pub fn class_of(&self, index: usize) -> &str {
        &self.label_table[&self.labels[index]]
    }

    /// Class names that actually occur in the raster.
    pub fn present_classes(&self) -> BTreeSet<&str> {
        let ids: BTreeSet<u16> = self.labels.iter().copied().collect();
        ids.iter().map(|id| self.label_table[id].as_str()).collect()
    }
}

/// What a source token with no matched style class attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnmatchedPolicy {
    /// Attend to the whole style image.
    #[default]
    GlobalAttend,
    /// Leave the row empty; the caller keeps the source appearance.
    KeepSource,
}

/// Source class → style class correspondences.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassMatch {
    pub pairs: BTreeMap<String, String>,
    pub policy_unmatched: UnmatchedPolicy,
}

impl ClassMatch {
    pub fn style_for(&self, source_class: &str) -> Option<&str> {
        self.pairs.get(source_class).map(String::as_str)
    }
}

/// Matches classes by exact name, then applies `overrides` (source → style).
pub fn match_classes(
    src: &SemanticMap,
    style: &SemanticMap,
    overrides: &[(String, String)],
    policy: UnmatchedPolicy,
) -> Result<ClassMatch, SegmatchError> {
    let style_classes = style.present_classes();
    let mut pairs: BTreeMap<String, String> = src
        .present_classes()
        .into_iter()
        .filter(|c| style_classes.contains(c))
        .map(|c| (c.to_string(), c.to_string()))
        .collect();
    let mut seen = BTreeSet::new();
    for (from, to) in overrides {
        if !seen.insert(from.as_str()) {
            return Err(SegmatchError::ConflictingOverride(from.clone()));
        }
        pairs.insert(from.clone(), to.clone());
    }
    Ok(ClassMatch {
        pairs,
        policy_unmatched: policy,
    })
}

/// Downsamples to a `d x d` grid; see [`downsample_map_to`].
pub fn downsample_map(map: &SemanticMap, d: usize) -> Result<SemanticMap, SegmatchError> {
    if d == 0 || d > map.width.min(map.height) {
        return Err(SegmatchError::InvalidGrid {
            d,
            width: map.width,
            height: map.height,
        });
    }
    downsample_map_to(map, d, d)
}

/// Bilinearly resamples every class indicator plane (half-pixel-centre
/// convention, edge clamped) and keeps the per-cell argmax; ties go to the
/// lower label id.
pub fn downsample_map_to(map: &SemanticMap, out_w: usize, out_h: usize) -> Result<SemanticMap, SegmatchError> {
    map.validate()?;
    if out_w == 0 || out_h == 0 || out_w > map.width || out_h > map.height {
        return Err(SegmatchError::InvalidGrid {
            d: out_w.max(out_h),
            width: map.width,
            height: map.height,
        });
    }
    let taps_x = bilinear_taps(map.width, out_w);
    let taps_y = bilinear_taps(map.height, out_h);
    let mut labels = Vec::with_capacity(out_w * out_h);
    let mut votes: BTreeMap<u16, f64> = BTreeMap::new();
    for &(y0, y1, wy) in &taps_y {
        for &(x0, x1, wx) in &taps_x {
            votes.clear();
            for (yy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                for (xx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    *votes.entry(map.labels[yy * map.width + xx]).or_default() += fy * fx;
                }
            }
            // BTreeMap iterates ids in ascending order, so a strict `>` keeps the lower id on ties.
            let mut best = (u16::MAX, f64::NEG_INFINITY);
            for (&id, &v) in &votes {
                if v > best.1 + 1e-12 {
                    best = (id, v);
                }
            }
            labels.push(best.0);
        }
    }
    Ok(SemanticMap {
        width: out_w,
        height: out_h,
        labels,
        label_table: map.label_table.clone(),
    })
}

/// `(lo, hi, weight_of_hi)` source taps for each output coordinate.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Boolean attention support; rows are output tokens, columns style tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

impl AttentionMask {
    pub fn all_true(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self { rows, cols, bits }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.bits[row * self.cols..(row + 1) * self.cols]
    }

    /// Index of the first row with no true entry.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.row(r).iter().any(|b| *b))
    }
}

/// Builds the token-level mask from two grid-resolution maps.
///
/// Source tokens whose class is unmatched, or whose matched style class does
/// not occur on the grid, get an all-true row under
/// [`UnmatchedPolicy::GlobalAttend`] and raise
/// [`SegmatchError::EmptyRowWithKeepSource`] under `KeepSource`.
pub fn build_attention_mask(
    src: &SemanticMap,
    style: &SemanticMap,
    matching: &ClassMatch,
) -> Result<AttentionMask, SegmatchError> {
    if src.width != style.width || src.height != style.height {
        return Err(SegmatchError::GridMismatch {
            a: format!("{}x{}", src.width, src.height),
            b: format!("{}x{}", style.width, style.height),
        });
    }
    src.validate()?;
    style.validate()?;
    let rows = src.labels.len();
    let cols = style.labels.len();
    // Column sets per style class, computed once.
    let mut columns_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for j in 0..cols {
        columns_of.entry(style.class_of(j)).or_default().push(j);
    }
    let mut bits = vec![false; rows * cols];
    for i in 0..rows {
        let row = &mut bits[i * cols..(i + 1) * cols];
        let targets = matching.style_for(src.class_of(i)).and_then(|c| columns_of.get(c));
        match (targets, matching.policy_unmatched) {
            (Some(cs), _) => cs.iter().for_each(|&j| row[j] = true),
            (None, UnmatchedPolicy::GlobalAttend) => row.fill(true),
            (None, UnmatchedPolicy::KeepSource) => return Err(SegmatchError::EmptyRowWithKeepSource { row: i }),
        }
    }
    Ok(AttentionMask { rows, cols, bits })
}
