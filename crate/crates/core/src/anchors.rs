//! Default boxes, groundtruth matching and regressor-bin assignment.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{decode, encode, iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Per-level anchor scales and the shared aspect-ratio set.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSpec {
    pub scales: Vec<Real>,
    pub aspect_ratios: Vec<Real>,
    /// `(rows, cols)` of each level's feature map.
    pub grids: Vec<(usize, usize)>,
}

/// Scale endpoints of the KITTI profile: finest level 0.066, coarsest 0.85.
pub const KITTI_SCALE_RANGE: (Real, Real) = (0.066, 0.85);

pub const DEFAULT_ASPECT_RATIOS: [Real; 3] = [1.0, 2.0, 0.5];

/// `levels` scales spaced evenly from `min` to `max`.
pub fn linear_scales(min: Real, max: Real, levels: usize) -> Vec<Real> {
    match levels {
        0 => Vec::new(),
        1 => vec![min],
        _ => (0..levels)
            .map(|k| {
                let t = k as Real / (levels - 1) as Real;
                min * (1.0 - t) + max * t
            })
            .collect(),
    }
}

impl AnchorSpec {
    pub fn linear(min: Real, max: Real, grids: &[(usize, usize)], aspect_ratios: &[Real]) -> Self {
        Self {
            scales: linear_scales(min, max, grids.len()),
            aspect_ratios: aspect_ratios.to_vec(),
            grids: grids.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != self.grids.len() || self.scales.is_empty() {
            return Err(Error::Config(format!(
                "{} anchor scales for {} pyramid levels",
                self.scales.len(),
                self.grids.len()
            )));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Config(format!("anchor scales {:?} must lie in (0, 1]", self.scales)));
        }
        if self.scales.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!("anchor scales {:?} must strictly increase", self.scales)));
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Config(format!("invalid aspect ratios {:?}", self.aspect_ratios)));
        }
        if self.grids.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::Config("empty anchor grid".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.scales.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// Scale range `[lo, hi)` served by `level`: bounded by the midpoints to
    /// the neighboring levels' scales, mirrored at the pyramid ends.
    pub fn scale_interval(&self, level: usize) -> (Real, Real) {
        let s = &self.scales;
        let n = s.len();
        if n == 1 {
            return (0.5 * s[0], 1.5 * s[0]);
        }
        let lo = if level == 0 {
            s[0] - 0.5 * (s[1] - s[0])
        } else {
            0.5 * (s[level - 1] + s[level])
        };
        let hi = if level + 1 == n {
            s[n - 1] + 0.5 * (s[n - 1] - s[n - 2])
        } else {
            0.5 * (s[level] + s[level + 1])
        };
        (lo, hi)
    }

    /// One box per (cell, aspect ratio), centered on the cell and clipped to
    /// the unit square.
    pub fn generate(&self) -> Vec<Vec<BBox>> {
        self.grids
            .iter()
            .zip(&self.scales)
            .map(|(&(rows, cols), &s)| {
                let mut level = Vec::with_capacity(rows * cols * self.aspect_ratios.len());
                for y in 0..rows {
                    for x in 0..cols {
                        let cx = (x as Real + 0.5) / cols as Real;
                        let cy = (y as Real + 0.5) / rows as Real;
                        for &ar in &self.aspect_ratios {
                            let r = libm::sqrt(ar);
                            level.push(BBox::from_center(cx, cy, s * r, s / r).clip_unit());
                        }
                    }
                }
                level
            })
            .collect()
    }
}

/// Position of one anchor inside the head maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorSlot {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub a: usize,
}

/// Flattened anchors in level, row, column, aspect-ratio order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub spec: AnchorSpec,
    pub boxes: Vec<BBox>,
    level_start: Vec<usize>,
}

impl AnchorSet {
    pub fn new(spec: AnchorSpec) -> Result<Self> {
        spec.validate()?;
        let mut boxes = Vec::new();
        let mut level_start = Vec::with_capacity(spec.levels() + 1);
        for level in spec.generate() {
            level_start.push(boxes.len());
            boxes.extend(level);
        }
        level_start.push(boxes.len());
        Ok(Self {
            spec,
            boxes,
            level_start,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn level_range(&self, level: usize) -> core::ops::Range<usize> {
        self.level_start[level]..self.level_start[level + 1]
    }

    pub fn slot(&self, index: usize) -> AnchorSlot {
        let level = self.level_start.partition_point(|&s| s <= index) - 1;
        let a_count = self.spec.anchors_per_cell();
        let local = index - self.level_start[level];
        let cols = self.spec.grids[level].1;
        AnchorSlot {
            level,
            y: local / a_count / cols,
            x: (local / a_count) % cols,
            a: local % a_count,
        }
    }
}

/// Regressor bin of a groundtruth box at `level`: the level's scale interval
/// is cut into `regressors` equal parts of `sqrt(w * h)`.
pub fn regressor_bin(gt: &BBox, spec: &AnchorSpec, level: usize, regressors: usize) -> usize {
    if regressors <= 1 {
        return 0;
    }
    let (lo, hi) = spec.scale_interval(level);
    let pos = (gt.scale() - lo) / (hi - lo) * regressors as Real;
    if pos.is_nan() || pos < 0.0 {
        0
    } else {
        (libm::floor(pos) as usize).min(regressors - 1)
    }
}

/// How inference chooses among an anchor's `R` regressor outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BinSelector {
    /// The bin containing the anchor's own scale.
    AnchorScale,
    /// The first bin whose decoded box falls back into that same bin;
    /// the anchor-scale bin when no bin is self-consistent.
    #[default]
    SelfConsistent,
}

impl BinSelector {
    /// `bins[r]` are the offsets predicted by regressor `r`.
    pub fn select(self, bins: &[[Real; 4]], anchor: &BBox, spec: &AnchorSpec, level: usize) -> usize {
        let r_count = bins.len();
        let anchor_bin = regressor_bin(
            &BBox::from_center(0.0, 0.0, spec.scales[level], spec.scales[level]),
            spec,
            level,
            r_count,
        );
        match self {
            BinSelector::AnchorScale => anchor_bin,
            BinSelector::SelfConsistent => (0..r_count)
                .find(|&r| regressor_bin(&decode(&bins[r], anchor), spec, level, r_count) == r)
                .unwrap_or(anchor_bin),
        }
    }
}

/// Per-anchor assignment produced by [`match_anchors`].
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Groundtruth index per anchor; `None` is background.
    pub assigned: Vec<Option<usize>>,
    /// Regressor bin per anchor (0 for background).
    pub bins: Vec<usize>,
    /// Encoded offsets per anchor (zeros for background).
    pub targets: Vec<[Real; 4]>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.assigned.iter().enumerate().filter_map(|(i, a)| a.map(|_| i))
    }

    pub fn num_positives(&self) -> usize {
        self.assigned.iter().filter(|a| a.is_some()).count()
    }
}

/// Greedy bipartite claim (each groundtruth takes its best remaining anchor,
/// highest IoU first) followed by threshold matching of the rest.
pub fn match_anchors(anchors: &AnchorSet, gts: &[BBox], threshold: Real, regressors: usize) -> Result<MatchResult> {
    let n = anchors.len();
    let mut assigned = vec![None; n];
    if !gts.is_empty() && n > 0 {
        let overlaps: Vec<Vec<Real>> = gts
            .iter()
            .map(|g| anchors.boxes.iter().map(|a| iou(g, a)).collect())
            .collect();
        let mut gt_done = vec![false; gts.len()];
        for _ in 0..gts.len().min(n) {
            let mut best: Option<(Real, usize, usize)> = None;
            for (gi, row) in overlaps.iter().enumerate() {
                if gt_done[gi] {
                    continue;
                }
                for (ai, &v) in row.iter().enumerate() {
                    if assigned[ai].is_none() && best.is_none_or(|(bv, _, _)| v > bv) {
                        best = Some((v, gi, ai));
                    }
                }
            }
            let Some((_, gi, ai)) = best else { break };
            assigned[ai] = Some(gi);
            gt_done[gi] = true;
        }
        for ai in 0..n {
            if assigned[ai].is_some() {
                continue;
            }
            let mut best: Option<(Real, usize)> = None;
            for (gi, row) in overlaps.iter().enumerate() {
                if best.is_none_or(|(bv, _)| row[ai] > bv) {
                    best = Some((row[ai], gi));
                }
            }
            if let Some((v, gi)) = best {
                if v >= threshold {
                    assigned[ai] = Some(gi);
                }
            }
        }
    }
    let mut bins = vec![0; n];
    let mut targets = vec![[0.0; 4]; n];
    for (ai, a) in assigned.iter().enumerate() {
        if let Some(gi) = *a {
            let level = anchors.slot(ai).level;
            bins[ai] = regressor_bin(&gts[gi], &anchors.spec, level, regressors);
            targets[ai] = encode(&gts[gi], &anchors.boxes[ai])?;
        }
    }
    Ok(MatchResult {
        assigned,
        bins,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_centered_anchor() {
        let spec = AnchorSpec {
            scales: vec![0.5],
            aspect_ratios: vec![1.0],
            grids: vec![(1, 1)],
        };
        let boxes = spec.generate();
        let b = boxes[0][0];
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (0.25, 0.25, 0.75, 0.75));
    }

    #[test]
    fn kitti_scales_interpolate_linearly() {
        let s = linear_scales(KITTI_SCALE_RANGE.0, KITTI_SCALE_RANGE.1, 5);
        let expected = [0.066, 0.262, 0.458, 0.654, 0.85];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{s:?}");
        }
        assert_eq!(s[0], 0.066);
        assert_eq!(s[4], 0.85);
    }

    #[test]
    fn anchors_clip_and_count() {
        let spec = AnchorSpec::linear(0.2, 0.9, &[(4, 4), (2, 2)], &DEFAULT_ASPECT_RATIOS);
        let set = AnchorSet::new(spec).unwrap();
        assert_eq!(set.len(), 3 * (16 + 4));
        assert!(set.boxes.iter().all(|b| b.is_valid() && b.x_min >= 0.0 && b.x_max <= 1.0));
        let s = set.slot(3 * 16 + 3 * 3 + 2);
        assert_eq!(s, AnchorSlot { level: 1, y: 1, x: 1, a: 2 });
        assert_eq!(set.level_range(1), 48..60);
    }

    #[test]
    fn spec_validation() {
        let mut spec = AnchorSpec::linear(0.2, 0.9, &[(4, 4), (2, 2)], &[1.0]);
        spec.scales = vec![0.5, 0.4];
        assert!(spec.validate().is_err());
        spec.scales = vec![0.5];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn bins() {
        let spec = AnchorSpec::linear(0.2, 0.6, &[(4, 4), (2, 2), (1, 1)], &[1.0]);
        let at = |s: Real| BBox::from_center(0.5, 0.5, s, s);
        assert_eq!(regressor_bin(&at(0.4), &spec, 1, 1), 0);
        let (lo, hi) = spec.scale_interval(1);
        assert!((lo - 0.3).abs() < 1e-12 && (hi - 0.5).abs() < 1e-12);
        assert_eq!(regressor_bin(&at(0.4), &spec, 1, 5), 2);
        assert_eq!(regressor_bin(&at(0.01), &spec, 1, 5), 0);
        assert_eq!(regressor_bin(&at(0.99), &spec, 1, 5), 4);
        let (lo, hi) = spec.scale_interval(0);
        assert!((lo - 0.1).abs() < 1e-12 && (hi - 0.3).abs() < 1e-12);
    }

    #[test]
    fn exact_anchor_match() {
        let spec = AnchorSpec::linear(0.25, 0.5, &[(4, 4), (2, 2)], &[1.0]);
        let set = AnchorSet::new(spec).unwrap();
        let gt = set.boxes[5];
        let m = match_anchors(&set, &[gt], 0.5, 5).unwrap();
        assert_eq!(m.assigned[5], Some(0));
        for (i, a) in m.assigned.iter().enumerate() {
            if i != 5 {
                assert_eq!(a.is_some(), iou(&set.boxes[i], &gt) >= 0.5);
            }
        }
        assert_eq!(m.targets[5], [0.0; 4]);
        let empty = match_anchors(&set, &[], 0.5, 5).unwrap();
        assert_eq!(empty.num_positives(), 0);
    }
}
