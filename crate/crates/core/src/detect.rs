//! Turning head maps into scored boxes, greedy NMS and cross-output fusion.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::anchors::{AnchorSet, BinSelector};
use crate::boxes::{decode, iou, BBox};
use crate::error::{contract, dim, Result};
use crate::graph::{softmax_in_place, Graph};
use crate::rrc::{HeadConfig, HeadOutput};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Object class counted from 0; background never appears here.
    pub class: usize,
    pub score: Real,
    /// 1-based output index the detection was decoded from.
    pub source: usize,
}

/// Head maps of one output, detached from the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMaps {
    pub t: usize,
    pub scores: Vec<Tensor>,
    pub offsets: Vec<Tensor>,
}

impl OutputMaps {
    pub fn from_graph(g: &Graph, out: &HeadOutput) -> Self {
        Self {
            t: out.t,
            scores: out.scores.iter().map(|&v| g.value(v).clone()).collect(),
            offsets: out.offsets.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    /// Maps of image `n` only.
    pub fn image(&self, n: usize) -> Result<Self> {
        Ok(Self {
            t: self.t,
            scores: self.scores.iter().map(|s| s.batch_item(n)).collect::<Result<_>>()?,
            offsets: self.offsets.iter().map(|s| s.batch_item(n)).collect::<Result<_>>()?,
        })
    }

    pub fn batch(&self) -> usize {
        self.scores.first().map_or(0, |s| s.shape()[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_threshold: Real,
    pub selector: BinSelector,
}

impl Default for DecodeConfig {
    /// Evaluation threshold; demo output uses 0.3.
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            selector: BinSelector::default(),
        }
    }
}

fn check_maps(maps: &OutputMaps, anchors: &AnchorSet, heads: &HeadConfig, n: usize) -> Result<()> {
    if maps.scores.len() != anchors.spec.levels() || maps.offsets.len() != anchors.spec.levels() {
        return Err(dim("decode", "levels", anchors.spec.levels(), maps.scores.len()));
    }
    for (p, &(rows, cols)) in anchors.spec.grids.iter().enumerate() {
        for (t, ch) in [(&maps.scores[p], heads.class_channels()), (&maps.offsets[p], heads.box_channels())] {
            let (batch, c, h, w) = t.dims4()?;
            if n >= batch {
                return Err(dim("decode", "batch", n + 1, batch));
            }
            if c != ch {
                return Err(dim("decode", "channels", ch, c));
            }
            if (h, w) != (rows, cols) {
                return Err(dim("decode", if h != rows { "height" } else { "width" }, rows, h));
            }
        }
    }
    Ok(())
}

/// Detections of image `n`: softmax class scores per anchor, each
/// non-background class at or above the threshold yields the anchor's
/// decoded box, clipped to the unit square. Degenerate boxes are dropped.
pub fn decode_output(
    maps: &OutputMaps,
    n: usize,
    anchors: &AnchorSet,
    heads: &HeadConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    check_maps(maps, anchors, heads, n)?;
    let k1 = heads.num_classes + 1;
    let r_count = heads.regressors;
    let mut dets = Vec::new();
    let mut probs = vec![0.0; k1];
    let mut bins = vec![[0.0; 4]; r_count];
    for p in 0..anchors.spec.levels() {
        let (s, o) = (&maps.scores[p], &maps.offsets[p]);
        let (_, sc, h, w) = s.dims4()?;
        let oc = o.shape()[1];
        let plane = h * w;
        for i in anchors.level_range(p) {
            let slot = anchors.slot(i);
            let at = slot.y * w + slot.x;
            for (c, v) in probs.iter_mut().enumerate() {
                *v = s.data()[(n * sc + slot.a * k1 + c) * plane + at];
            }
            softmax_in_place(&mut probs);
            if probs[1..].iter().all(|&v| v < cfg.score_threshold) {
                continue;
            }
            for (r, bin) in bins.iter_mut().enumerate() {
                for (j, v) in bin.iter_mut().enumerate() {
                    *v = o.data()[(n * oc + (slot.a * r_count + r) * 4 + j) * plane + at];
                }
            }
            let anchor = &anchors.boxes[i];
            let r = cfg.selector.select(&bins, anchor, &anchors.spec, p);
            let bbox = decode(&bins[r], anchor).clip_unit();
            if !bbox.is_valid() {
                continue;
            }
            for (c, &score) in probs.iter().enumerate().skip(1) {
                if score >= cfg.score_threshold {
                    dets.push(Detection {
                        bbox,
                        class: c - 1,
                        score,
                        source: maps.t,
                    });
                }
            }
        }
    }
    Ok(dets)
}

/// Score descending, then box lexicographic, then class.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.lex_cmp(&b.bbox))
        .then(a.class.cmp(&b.class))
}

/// Greedy per-class NMS; the result is sorted by [`detection_order`].
pub fn nms(dets: &[Detection], iou_threshold: Real) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if !kept.iter().any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) >= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

/// Union of the selected outputs' detections (1-based indices) followed by
/// a single NMS pass.
pub fn fuse(
    outputs: &[OutputMaps],
    select: &[usize],
    n: usize,
    anchors: &AnchorSet,
    heads: &HeadConfig,
    cfg: &DecodeConfig,
    nms_threshold: Real,
) -> Result<Vec<Detection>> {
    if select.is_empty() {
        return Err(contract!("fusion needs at least one output"));
    }
    let mut union = Vec::new();
    for &t in select {
        if t == 0 || t > outputs.len() {
            return Err(contract!("output {t} not in 1..={}", outputs.len()));
        }
        union.extend(decode_output(&outputs[t - 1], n, anchors, heads, cfg)?);
    }
    Ok(nms(&union, nms_threshold))
}
