//! Per-output detection loss: softmax cross-entropy with hard negative
//! mining plus smooth-L1 box regression on each positive anchor's selected
//! regressor, both normalized by the positive count.

use alloc::vec;
use alloc::vec::Vec;

use crate::anchors::{match_anchors, AnchorSet, MatchResult};
use crate::boxes::BBox;
use crate::error::{contract, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::rrc::{HeadConfig, HeadOutput};
use crate::tensor::{Real, Tensor};

/// A labeled groundtruth box; `class` counts from 0 (background excluded).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Matching outcome of one image plus per-anchor class labels
/// (0 = background, `class + 1` otherwise).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTargets {
    pub matched: MatchResult,
    pub labels: Vec<usize>,
}

impl ImageTargets {
    pub fn new(anchors: &AnchorSet, gts: &[GroundTruth], threshold: Real, regressors: usize) -> Result<Self> {
        let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let matched = match_anchors(anchors, &boxes, threshold, regressors)?;
        let labels = matched
            .assigned
            .iter()
            .map(|a| a.map_or(0, |gi| gts[gi].class + 1))
            .collect();
        Ok(Self { matched, labels })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Mined negatives per positive.
    pub neg_ratio: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { neg_ratio: 3 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OutputLoss {
    pub classification: Real,
    pub regression: Real,
}

impl OutputLoss {
    pub fn total(&self) -> Real {
        self.classification + self.regression
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Indexed by output (position 0 is output 1).
    pub per_output: Vec<OutputLoss>,
    pub total: Real,
    pub positives: usize,
    /// Images without a single matched anchor; they contribute nothing.
    pub flagged_images: usize,
}

/// Flat offset of `(image, channel, y, x)` in an NCHW map.
fn flat(n: usize, ch: usize, y: usize, x: usize, channels: usize, h: usize, w: usize) -> usize {
    ((n * channels + ch) * h + y) * w + x
}

/// Anchors of image `n` contributing to classification: every positive
/// plus the `neg_ratio × positives` background anchors with the highest
/// background loss (ties to the lower index).
pub fn mine_anchors(
    g: &Graph,
    scores: &[Var],
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &ImageTargets,
    n: usize,
    neg_ratio: usize,
) -> Vec<usize> {
    let positives: Vec<usize> = targets.matched.positives().collect();
    let k1 = heads.num_classes + 1;
    let mut negatives: Vec<(Real, usize)> = Vec::new();
    let mut row = vec![0.0; k1];
    for (p, &sv) in scores.iter().enumerate() {
        let t = g.value(sv);
        let (_, ch, h, w) = t.dims4().expect("score maps are rank 4");
        for i in anchors.level_range(p) {
            if targets.labels[i] != 0 {
                continue;
            }
            let s = anchors.slot(i);
            for (c, r) in row.iter_mut().enumerate() {
                *r = t.data()[flat(n, s.a * k1 + c, s.y, s.x, ch, h, w)];
            }
            negatives.push((log_sum_exp(&row) - row[0], i));
        }
    }
    let keep = (neg_ratio * positives.len()).min(negatives.len());
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut selected = positives;
    selected.extend(negatives[..keep].iter().map(|&(_, i)| i));
    selected.sort_unstable();
    selected
}

/// Summed cross-entropy over the given `(image, anchor)` rows, unnormalized.
fn classification_sum(
    g: &mut Graph,
    scores: &[Var],
    anchors: &AnchorSet,
    heads: &HeadConfig,
    rows: &[(usize, usize)],
    targets: &[ImageTargets],
) -> Result<Option<Var>> {
    let k1 = heads.num_classes + 1;
    let mut terms = Vec::new();
    for (p, &sv) in scores.iter().enumerate() {
        let (_, ch, h, w) = g.value(sv).dims4()?;
        let range = anchors.level_range(p);
        let mut index = Vec::new();
        let mut labels = Vec::new();
        for &(n, i) in rows.iter().filter(|(_, i)| range.contains(i)) {
            let s = anchors.slot(i);
            index.extend((0..k1).map(|c| flat(n, s.a * k1 + c, s.y, s.x, ch, h, w)));
            labels.push(targets[n].labels[i]);
        }
        if labels.is_empty() {
            continue;
        }
        let m = labels.len();
        let logits = g.gather(sv, index, &[m, k1])?;
        terms.push(g.cross_entropy_sum(logits, labels)?);
    }
    if terms.is_empty() {
        Ok(None)
    } else {
        g.add_all(&terms).map(Some)
    }
}

/// Summed smooth-L1 over positives, unnormalized; only the matched bin's
/// four offsets of each positive enter the loss.
fn regression_sum(
    g: &mut Graph,
    offsets: &[Var],
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &[ImageTargets],
) -> Result<Option<Var>> {
    let r_count = heads.regressors;
    let mut terms = Vec::new();
    for (p, &ov) in offsets.iter().enumerate() {
        let (_, ch, h, w) = g.value(ov).dims4()?;
        let range = anchors.level_range(p);
        let mut index = Vec::new();
        let mut goal = Vec::new();
        for (n, t) in targets.iter().enumerate() {
            for i in range.clone() {
                if t.matched.assigned[i].is_none() {
                    continue;
                }
                let s = anchors.slot(i);
                let r = t.matched.bins[i];
                index.extend((0..4).map(|j| flat(n, (s.a * r_count + r) * 4 + j, s.y, s.x, ch, h, w)));
                goal.extend_from_slice(&t.matched.targets[i]);
            }
        }
        if goal.is_empty() {
            continue;
        }
        let len = goal.len();
        let picked = g.gather(ov, index, &[len / 4, 4])?;
        terms.push(g.smooth_l1_sum(picked, goal)?);
    }
    if terms.is_empty() {
        Ok(None)
    } else {
        g.add_all(&terms).map(Some)
    }
}

fn check_batch(g: &Graph, output: &HeadOutput, anchors: &AnchorSet, targets: &[ImageTargets]) -> Result<()> {
    if output.scores.len() != anchors.spec.levels() || output.offsets.len() != anchors.spec.levels() {
        return Err(contract!(
            "head output has {} levels, anchors have {}",
            output.scores.len(),
            anchors.spec.levels()
        ));
    }
    let n = g.value(output.scores[0]).dims4()?.0;
    if n != targets.len() {
        return Err(contract!("{} targets for a batch of {n}", targets.len()));
    }
    if let Some(t) = targets.iter().find(|t| t.labels.len() != anchors.len()) {
        return Err(contract!("targets cover {} anchors, expected {}", t.labels.len(), anchors.len()));
    }
    Ok(())
}

/// Classification loss of one output, normalized by the batch's positives.
/// Returns `None` when the batch has no positives.
pub fn classification_loss(
    g: &mut Graph,
    output: &HeadOutput,
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<Option<Var>> {
    check_batch(g, output, anchors, targets)?;
    let positives: usize = targets.iter().map(|t| t.matched.num_positives()).sum();
    if positives == 0 {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for (n, t) in targets.iter().enumerate() {
        let picked = mine_anchors(g, &output.scores, anchors, heads, t, n, cfg.neg_ratio);
        rows.extend(picked.into_iter().map(|i| (n, i)));
    }
    let sum = classification_sum(g, &output.scores, anchors, heads, &rows, targets)?;
    Ok(sum.map(|s| g.scale(s, 1.0 / positives as Real)))
}

/// Regression loss of one output, normalized by the batch's positives.
pub fn regression_loss(
    g: &mut Graph,
    output: &HeadOutput,
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &[ImageTargets],
) -> Result<Option<Var>> {
    check_batch(g, output, anchors, targets)?;
    let positives: usize = targets.iter().map(|t| t.matched.num_positives()).sum();
    if positives == 0 {
        return Ok(None);
    }
    let sum = regression_sum(g, &output.offsets, anchors, heads, targets)?;
    Ok(sum.map(|s| g.scale(s, 1.0 / positives as Real)))
}

/// Unweighted sum of classification and regression losses over all outputs.
/// The returned variable is `None` only when the batch has no positives.
pub fn total_loss(
    g: &mut Graph,
    outputs: &[HeadOutput],
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<(Option<Var>, LossReport)> {
    let mut report = LossReport {
        positives: targets.iter().map(|t| t.matched.num_positives()).sum(),
        flagged_images: targets.iter().filter(|t| t.matched.num_positives() == 0).count(),
        ..LossReport::default()
    };
    let mut terms = Vec::new();
    for out in outputs {
        let cls = classification_loss(g, out, anchors, heads, targets, cfg)?;
        let reg = regression_loss(g, out, anchors, heads, targets)?;
        let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0]);
        report.per_output.push(OutputLoss {
            classification: value(g, cls),
            regression: value(g, reg),
        });
        terms.extend(cls);
        terms.extend(reg);
    }
    report.total = report.per_output.iter().map(OutputLoss::total).sum();
    let loss = if terms.is_empty() { None } else { Some(g.add_all(&terms)?) };
    Ok((loss, report))
}

/// Convenience used by evaluation: the report alone, on frozen maps.
pub fn loss_report(
    g: &mut Graph,
    outputs: &[HeadOutput],
    anchors: &AnchorSet,
    heads: &HeadConfig,
    targets: &[ImageTargets],
    cfg: &LossConfig,
) -> Result<LossReport> {
    total_loss(g, outputs, anchors, heads, targets, cfg).map(|(_, r)| r)
}

/// Zero-valued score maps matching `anchors` for a batch of `n`, handy for
/// building fixtures.
pub fn zero_maps(anchors: &AnchorSet, heads: &HeadConfig, n: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    anchors
        .spec
        .grids
        .iter()
        .map(|&(h, w)| {
            (
                Tensor::zeros(&[n, heads.class_channels(), h, w]),
                Tensor::zeros(&[n, heads.box_channels(), h, w]),
            )
        })
        .unzip()
}
