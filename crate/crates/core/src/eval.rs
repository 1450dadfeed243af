//! KITTI label parsing and IoU-thresholded average precision.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::boxes::{iou, BBox};
use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// One groundtruth object. Coordinates are in whatever frame the
/// detections use; AP only looks at overlaps.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthRecord {
    pub class: String,
    pub bbox: BBox,
    pub truncation: Real,
    pub occlusion: u8,
    pub ignore: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl GroundTruthRecord {
    /// Easiest KITTI difficulty the object qualifies for, from its pixel
    /// height, occlusion and truncation; `None` when too hard for any.
    pub fn difficulty(&self) -> Option<Difficulty> {
        let h = self.bbox.height();
        let levels = [
            (Difficulty::Easy, 40.0, 0, 0.15),
            (Difficulty::Moderate, 25.0, 1, 0.30),
            (Difficulty::Hard, 25.0, 2, 0.50),
        ];
        levels
            .into_iter()
            .find(|&(_, min_h, occ, trunc)| h >= min_h && self.occlusion <= occ && self.truncation <= trunc)
            .map(|l| l.0)
    }
}

fn field(parts: &[&str], i: usize, line: usize) -> Result<Real> {
    parts[i].parse::<Real>().map_err(|_| Error::Parse {
        line,
        message: format!("field {} is not a number: {:?}", i + 1, parts[i]),
    })
}

/// Parses KITTI label text. Lines are numbered from 1 in errors; blank
/// lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthRecord>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() < 15 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 15 fields, found {}", parts.len()),
            });
        }
        let class = parts[0].to_string();
        let ignore = class == "DontCare";
        let truncation = field(&parts, 1, line)?;
        let occlusion = parts[2].parse::<i32>().map_err(|_| Error::Parse {
            line,
            message: format!("occlusion is not an integer: {:?}", parts[2]),
        })?;
        let coords = [field(&parts, 4, line)?, field(&parts, 5, line)?, field(&parts, 6, line)?, field(&parts, 7, line)?];
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        // DontCare rows carry -1 here; they are never scored anyway.
        let occlusion = match (ignore, occlusion) {
            (_, 0..=3) => occlusion as u8,
            (true, _) => 3,
            (false, o) => {
                return Err(Error::Parse {
                    line,
                    message: format!("occlusion must be 0..=3, found {o}"),
                })
            }
        };
        out.push(GroundTruthRecord {
            class,
            bbox,
            truncation,
            occlusion,
            ignore,
        });
    }
    Ok(out)
}

/// KITTI label line; 3D fields are zero.
pub fn format_label(r: &GroundTruthRecord) -> String {
    let b = &r.bbox;
    format!(
        "{} {:.2} {} -10 {:.2} {:.2} {:.2} {:.2} 0 0 0 0 0 0 0",
        r.class,
        r.truncation,
        if r.ignore { -1 } else { r.occlusion as i32 },
        b.x_min,
        b.y_min,
        b.x_max,
        b.y_max
    )
}

/// KITTI result line: label fields with placeholders plus the score.
pub fn format_result(class: &str, bbox: &BBox, score: Real) -> String {
    format!(
        "{class} -1 -1 -10 {:.2} {:.2} {:.2} {:.2} -1 -1 -1 -1000 -1000 -1000 -10 {:.6}",
        bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max, score
    )
}

/// Parses KITTI result lines (label fields plus a 16th score) into
/// `(class, box, score)`.
pub fn parse_results(text: &str) -> Result<Vec<(String, BBox, Real)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let parts: Vec<&str> = raw.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts.len() != 16 {
            return Err(Error::Parse {
                line,
                message: format!("expected 16 fields, found {}", parts.len()),
            });
        }
        let c = [field(&parts, 4, line)?, field(&parts, 5, line)?, field(&parts, 6, line)?, field(&parts, 7, line)?];
        let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((parts[0].to_string(), bbox, field(&parts, 15, line)?));
    }
    Ok(out)
}

/// Detections and groundtruth of one image for a single class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassImage {
    pub detections: Vec<(BBox, Real)>,
    /// `(box, ignore)`.
    pub groundtruth: Vec<(BBox, bool)>,
}

impl ClassImage {
    /// Collects class `class_id` detections and the records named
    /// `class_name`; DontCare records join as ignored regions.
    pub fn select(dets: &[Detection], gts: &[GroundTruthRecord], class_id: usize, class_name: &str) -> Self {
        Self {
            detections: dets.iter().filter(|d| d.class == class_id).map(|d| (d.bbox, d.score)).collect(),
            groundtruth: gts
                .iter()
                .filter(|g| g.ignore || g.class == class_name)
                .map(|g| (g.bbox, g.ignore))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ApMode {
    /// Mean of the precision envelope at recall 1/40, 2/40, ..., 1.
    #[default]
    Recall40,
    /// Exact area under the precision envelope.
    Envelope,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each scored detection, recall non-decreasing.
    pub points: Vec<(Real, Real)>,
    pub ap: Real,
}

/// AP over all images at one IoU threshold; `None` without groundtruth.
pub fn average_precision(images: &[ClassImage], iou_threshold: Real, mode: ApMode) -> Option<PrCurve> {
    let npos: usize = images.iter().map(|im| im.groundtruth.iter().filter(|g| !g.1).count()).sum();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.detections.len()).map(move |d| (i, d)))
        .collect();
    order.sort_by(|&(ia, da), &(ib, db)| {
        let (a, b) = (&images[ia].detections[da], &images[ib].detections[db]);
        b.1.total_cmp(&a.1).then(ia.cmp(&ib)).then(a.0.lex_cmp(&b.0))
    });
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.groundtruth.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for (i, d) in order {
        let det = &images[i].detections[d].0;
        let mut best: Option<(Real, usize)> = None;
        let mut hits_ignored = false;
        for (j, (g, ignore)) in images[i].groundtruth.iter().enumerate() {
            let o = iou(det, g);
            if o < iou_threshold {
                continue;
            }
            if *ignore {
                hits_ignored = true;
            } else if !taken[i][j] && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, j));
            }
        }
        match best {
            Some((_, j)) => {
                taken[i][j] = true;
                tp += 1;
            }
            None if hits_ignored => continue,
            None => fp += 1,
        }
        points.push((tp as Real / npos as Real, tp as Real / (tp + fp) as Real));
    }
    let envelope = |r: Real| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, Real::max);
    let ap = match mode {
        ApMode::Recall40 => (1..=40).map(|k| envelope(k as Real / 40.0)).sum::<Real>() / 40.0,
        ApMode::Envelope => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for &(r, _) in &points {
                if r > prev {
                    area += (r - prev) * envelope(r);
                    prev = r;
                }
            }
            area
        }
    };
    Some(PrCurve { points, ap })
}

/// IoU thresholds of the standard high-overlap sweep.
pub const SWEEP_THRESHOLDS: [Real; 5] = [0.6, 0.65, 0.7, 0.75, 0.8];

/// AP per class (rows) and threshold (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub thresholds: Vec<Real>,
    pub classes: Vec<String>,
    pub ap: Vec<Vec<Option<Real>>>,
}

impl SweepTable {
    /// Mean over classes with groundtruth, per threshold.
    pub fn mean(&self) -> Vec<Option<Real>> {
        (0..self.thresholds.len())
            .map(|c| {
                let vals: Vec<Real> = self.ap.iter().filter_map(|row| row[c]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<Real>() / vals.len() as Real)
            })
            .collect()
    }
}

/// `dets[i]` and `gts[i]` belong to image `i`; `classes[k]` names class id `k`.
pub fn map_sweep(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthRecord>],
    classes: &[String],
    thresholds: &[Real],
    mode: ApMode,
) -> SweepTable {
    let ap = classes
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let images: Vec<ClassImage> =
                dets.iter().zip(gts).map(|(d, g)| ClassImage::select(d, g, k, name)).collect();
            thresholds
                .iter()
                .map(|&t| average_precision(&images, t, mode).map(|c| c.ap))
                .collect()
        })
        .collect();
    SweepTable {
        thresholds: thresholds.to_vec(),
        classes: classes.to_vec(),
        ap,
    }
}
