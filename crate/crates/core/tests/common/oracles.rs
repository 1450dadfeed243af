// Independent reference implementations shared by the core tests and the
// acceptance suite. Each one trades speed for an obviously correct loop.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrc_core::anchors::{AnchorSet, AnchorSpec, BinSelector};
use rrc_core::boxes::{decode, iou, BBox};
use rrc_core::detect::{DecodeConfig, Detection, OutputMaps};
use rrc_core::eval::{ApMode, ClassImage};
use rrc_core::rrc::HeadConfig;
use rrc_core::{Real, Tensor};

pub fn bx(x0: Real, y0: Real, x1: Real, y1: Real) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn setup() -> (AnchorSet, HeadConfig) {
    let anchors = AnchorSet::new(AnchorSpec::linear(0.2, 0.6, &[(4, 4), (2, 3)], &[1.0, 2.0, 0.5])).unwrap();
    let heads = HeadConfig {
        num_classes: 2,
        anchors_per_cell: 3,
        regressors: 3,
        kernel: 1,
    };
    (anchors, heads)
}

pub fn maps(anchors: &AnchorSet, heads: &HeadConfig, batch: usize, t: usize, spread: Real, rng: &mut ChaCha8Rng) -> OutputMaps {
    let mut scores = Vec::new();
    let mut offsets = Vec::new();
    for &(h, w) in &anchors.spec.grids {
        scores.push(Tensor::uniform(&[batch, heads.class_channels(), h, w], -3.0, 3.0, rng));
        offsets.push(Tensor::uniform(&[batch, heads.box_channels(), h, w], -spread, spread, rng));
    }
    OutputMaps { t, scores, offsets }
}

pub fn cfg(threshold: Real) -> DecodeConfig {
    DecodeConfig {
        score_threshold: threshold,
        selector: BinSelector::default(),
    }
}

/// Nested loops over level, row, column, anchor shape and class.
pub fn reference_decode(m: &OutputMaps, n: usize, anchors: &AnchorSet, heads: &HeadConfig, c: &DecodeConfig) -> Vec<Detection> {
    let k1 = heads.num_classes + 1;
    let r = heads.regressors;
    let a_count = heads.anchors_per_cell;
    let mut out = Vec::new();
    let mut base = 0;
    for (p, &(rows, cols)) in anchors.spec.grids.iter().enumerate() {
        let s = &m.scores[p];
        let o = &m.offsets[p];
        let sv = |ch: usize, y: usize, x: usize| s.data()[((n * a_count * k1 + ch) * rows + y) * cols + x];
        let ov = |ch: usize, y: usize, x: usize| o.data()[((n * a_count * r * 4 + ch) * rows + y) * cols + x];
        for y in 0..rows {
            for x in 0..cols {
                for a in 0..a_count {
                    let anchor = anchors.boxes[base + (y * cols + x) * a_count + a];
                    let logits: Vec<Real> = (0..k1).map(|c| sv(a * k1 + c, y, x)).collect();
                    let mx = logits.iter().cloned().fold(Real::MIN, Real::max);
                    let z: Real = logits.iter().map(|l| (l - mx).exp()).sum();
                    let bins: Vec<[Real; 4]> = (0..r)
                        .map(|b| std::array::from_fn(|j| ov((a * r + b) * 4 + j, y, x)))
                        .collect();
                    let b = c.selector.select(&bins, &anchor, &anchors.spec, p);
                    let bbox = decode(&bins[b], &anchor).clip_unit();
                    for cls in 1..k1 {
                        let score = (logits[cls] - mx).exp() / z;
                        if score >= c.score_threshold && bbox.is_valid() {
                            out.push(Detection { bbox, class: cls - 1, score, source: m.t });
                        }
                    }
                }
            }
        }
        base += rows * cols * a_count;
    }
    out
}

pub fn same_set(mut a: Vec<Detection>, mut b: Vec<Detection>) {
    assert_eq!(a.len(), b.len());
    let key = |d: &Detection, e: &Detection| d.bbox.lex_cmp(&e.bbox).then(d.class.cmp(&e.class));
    a.sort_by(key);
    b.sort_by(key);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.class, x.source), (y.class, y.source));
        assert!((x.score - y.score).abs() < 1e-12);
        for (u, v) in [(x.bbox.x_min, y.bbox.x_min), (x.bbox.y_min, y.bbox.y_min), (x.bbox.x_max, y.bbox.x_max), (x.bbox.y_max, y.bbox.y_max)] {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

/// Repeatedly scans for the best remaining detection, keeps it and strikes
/// its same-class overlaps; no sorting involved.
pub fn reference_nms(dets: &[Detection], thr: Real) -> Vec<Detection> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (d, e) = (&dets[i], &dets[b]);
                    let better = d.score > e.score
                        || (d.score == e.score && d.bbox.lex_cmp(&e.bbox).then(d.class.cmp(&e.class)).is_lt());
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && dets[i].class == dets[b].class && iou(&dets[i].bbox, &dets[b].bbox) >= thr {
                alive[i] = false;
            }
        }
        kept.push(dets[b]);
    }
    kept
}

pub fn random_dets(rng: &mut ChaCha8Rng, count: usize) -> Vec<Detection> {
    (0..count)
        .map(|_| {
            let (x, y) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
            let (w, h) = (rng.random_range(0.05..0.4), rng.random_range(0.05..0.4));
            Detection {
                bbox: BBox::new(x, y, x + w, y + h).unwrap(),
                class: rng.random_range(0..2),
                // Coarse scores so ties actually occur.
                score: rng.random_range(1..10) as Real / 10.0,
                source: 1,
            }
        })
        .collect()
}

pub fn image(dets: &[(BBox, Real)], gts: &[(BBox, bool)]) -> ClassImage {
    ClassImage {
        detections: dets.to_vec(),
        groundtruth: gts.to_vec(),
    }
}

/// Brute-force evaluator: detections ranked by repeated maximum search,
/// matched by scanning every groundtruth, AP from the per-TP envelope.
pub fn reference_ap(images: &[ClassImage], thr: Real, mode: ApMode) -> Option<Real> {
    let npos = images.iter().flat_map(|im| &im.groundtruth).filter(|g| !g.1).count();
    if npos == 0 {
        return None;
    }
    let mut pending: Vec<(usize, usize)> =
        images.iter().enumerate().flat_map(|(i, im)| (0..im.detections.len()).map(move |d| (i, d))).collect();
    let mut taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.groundtruth.len()]).collect();
    let mut outcome = Vec::new();
    while !pending.is_empty() {
        let mut pick = 0;
        for k in 1..pending.len() {
            let (a, b) = (pending[k], pending[pick]);
            let (da, db) = (images[a.0].detections[a.1], images[b.0].detections[b.1]);
            if da.1 > db.1 || (da.1 == db.1 && (a.0 < b.0 || (a.0 == b.0 && da.0.lex_cmp(&db.0).is_lt()))) {
                pick = k;
            }
        }
        let (i, d) = pending.remove(pick);
        let det = images[i].detections[d].0;
        let cands: Vec<usize> = (0..images[i].groundtruth.len())
            .filter(|&j| !images[i].groundtruth[j].1 && !taken[i][j] && iou(&det, &images[i].groundtruth[j].0) >= thr)
            .collect();
        if let Some(&j) = cands.iter().max_by(|&&a, &&b| {
            iou(&det, &images[i].groundtruth[a].0)
                .partial_cmp(&iou(&det, &images[i].groundtruth[b].0))
                .unwrap()
                .then(b.cmp(&a))
        }) {
            taken[i][j] = true;
            outcome.push(true);
        } else if !images[i].groundtruth.iter().any(|g| g.1 && iou(&det, &g.0) >= thr) {
            outcome.push(false);
        }
    }
    // Precision after each prefix, with its TP count.
    let mut prefixes = Vec::new();
    let mut tp = 0;
    for (n, &hit) in outcome.iter().enumerate() {
        tp += usize::from(hit);
        prefixes.push((tp, tp as Real / (n + 1) as Real));
    }
    let env = |need: Real| {
        prefixes
            .iter()
            .filter(|p| p.0 as Real / npos as Real >= need)
            .map(|p| p.1)
            .fold(0.0, Real::max)
    };
    Some(match mode {
        ApMode::Envelope => (1..=npos).map(|k| env(k as Real / npos as Real)).sum::<Real>() / npos as Real,
        ApMode::Recall40 => (1..=40).map(|k| env(k as Real / 40.0)).sum::<Real>() / 40.0,
    })
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let (x, y) = (rng.random_range(0.0..0.7), rng.random_range(0.0..0.7));
    bx(x, y, x + rng.random_range(0.05..0.3), y + rng.random_range(0.05..0.3))
}

pub fn jitter(b: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let mut d = || rng.random_range(-0.03..0.03);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    bx(x0, y0, (b.x_max + d()).max(x0 + 0.01), (b.y_max + d()).max(y0 + 0.01))
}

pub fn random_images(rng: &mut ChaCha8Rng) -> Vec<ClassImage> {
    (0..rng.random_range(1..4))
        .map(|_| {
            let gts: Vec<(BBox, bool)> =
                (0..rng.random_range(0..5)).map(|_| (random_box(rng), rng.random_bool(0.15))).collect();
            let mut dets = Vec::new();
            for _ in 0..rng.random_range(0..6) {
                let b = if !gts.is_empty() && rng.random_bool(0.7) {
                    jitter(&gts[rng.random_range(0..gts.len())].0, rng)
                } else {
                    random_box(rng)
                };
                dets.push((b, rng.random_range(1..8) as Real / 8.0));
            }
            image(&dets, &gts)
        })
        .collect()
}
