use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrc_core::anchors::{AnchorSet, AnchorSpec, MatchResult};
use rrc_core::loss::{
    classification_loss, mine_anchors, regression_loss, total_loss, zero_maps, ImageTargets, LossConfig,
};
use rrc_core::rrc::{HeadConfig, HeadOutput};
use rrc_core::{Graph, ParamStore, Real, Tensor};

fn one_level(rows: usize, cols: usize, ratios: &[Real]) -> AnchorSet {
    AnchorSet::new(AnchorSpec {
        scales: vec![0.3],
        aspect_ratios: ratios.to_vec(),
        grids: vec![(rows, cols)],
    })
    .unwrap()
}

fn heads(anchors: &AnchorSet, classes: usize, regressors: usize) -> HeadConfig {
    HeadConfig {
        num_classes: classes,
        anchors_per_cell: anchors.spec.anchors_per_cell(),
        regressors,
        kernel: 1,
    }
}

/// Targets with the given `(anchor, label, bin, offsets)` positives.
fn targets(n: usize, positives: &[(usize, usize, usize, [Real; 4])]) -> ImageTargets {
    let mut t = ImageTargets {
        matched: MatchResult {
            assigned: vec![None; n],
            bins: vec![0; n],
            targets: vec![[0.0; 4]; n],
        },
        labels: vec![0; n],
    };
    for (gi, &(i, label, bin, off)) in positives.iter().enumerate() {
        t.matched.assigned[i] = Some(gi);
        t.matched.bins[i] = bin;
        t.matched.targets[i] = off;
        t.labels[i] = label;
    }
    t
}

fn random_maps(anchors: &AnchorSet, h: &HeadConfig, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Vec<Tensor>) {
    let (s, o) = zero_maps(anchors, h, n);
    let fill = |t: Tensor, rng: &mut ChaCha8Rng| Tensor::uniform(t.shape(), -2.0, 2.0, rng);
    (
        s.into_iter().map(|t| fill(t, rng)).collect(),
        o.into_iter().map(|t| fill(t, rng)).collect(),
    )
}

fn output(g: &mut Graph, scores: Vec<Tensor>, offsets: Vec<Tensor>) -> HeadOutput {
    HeadOutput {
        t: 1,
        scores: scores.into_iter().map(|t| g.variable(t)).collect(),
        offsets: offsets.into_iter().map(|t| g.variable(t)).collect(),
    }
}

fn scalar(g: &Graph, v: rrc_core::Var) -> Real {
    g.value(v).data()[0]
}

#[test]
fn mining_keeps_three_negatives_per_positive() {
    let anchors = one_level(4, 13, &[1.0]);
    assert_eq!(anchors.len(), 52);
    let h = heads(&anchors, 1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (s, o) = random_maps(&anchors, &h, 1, &mut rng);
    let t = targets(52, &[(7, 1, 0, [0.0; 4]), (30, 1, 0, [0.0; 4])]);

    // Oracle: background loss log(e^l0 + e^l1) - l0 read straight off the map.
    let mut bg: Vec<(Real, usize)> = (0..52)
        .filter(|&i| i != 7 && i != 30)
        .map(|i| {
            let (y, x) = (i / 13, i % 13);
            let l0 = s[0].data()[y * 13 + x];
            let l1 = s[0].data()[52 + y * 13 + x];
            ((l0.exp() + l1.exp()).ln() - l0, i)
        })
        .collect();
    bg.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut expected: Vec<usize> = bg[..6].iter().map(|p| p.1).chain([7, 30]).collect();
    expected.sort_unstable();

    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let picked = mine_anchors(&g, &out.scores, &anchors, &h, &t, 0, 3);
    assert_eq!(picked.len(), 8);
    assert_eq!(picked, expected);
}

#[test]
fn uniform_logits_give_ln2_per_row() {
    let anchors = one_level(2, 2, &[1.0]);
    let h = heads(&anchors, 1, 1);
    let (s, o) = zero_maps(&anchors, &h, 1);
    let t = targets(4, &[(0, 1, 0, [0.0; 4])]);
    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let cls = classification_loss(&mut g, &out, &anchors, &h, &[t], &LossConfig::default()).unwrap().unwrap();
    // One positive and all three negatives, divided by one positive.
    assert!((scalar(&g, cls) - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn smooth_l1_branches_through_the_loss() {
    let anchors = one_level(1, 2, &[1.0]);
    let h = heads(&anchors, 1, 1);
    for (d, want) in [(0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)] {
        let (s, o) = zero_maps(&anchors, &h, 1);
        let t = targets(2, &[(1, 1, 0, [d, 0.0, 0.0, 0.0])]);
        let mut g = Graph::new();
        let out = output(&mut g, s, o);
        let reg = regression_loss(&mut g, &out, &anchors, &h, &[t]).unwrap().unwrap();
        assert!((scalar(&g, reg) - want).abs() < 1e-12, "d={d}");
    }
}

#[test]
fn unselected_bins_get_exactly_zero_gradient() {
    let anchors = one_level(3, 3, &[1.0, 2.0]);
    let h = heads(&anchors, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, o) = random_maps(&anchors, &h, 2, &mut rng);
    let ts = vec![
        targets(18, &[(3, 1, 2, [0.1, -0.2, 0.3, 0.4]), (10, 2, 0, [1.5, 0.0, -1.0, 0.2])]),
        targets(18, &[(17, 2, 1, [0.0, 0.5, 0.5, -3.0])]),
    ];
    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let (loss, _) = total_loss(&mut g, &[out.clone()], &anchors, &h, &ts, &LossConfig::default()).unwrap();
    g.backward(loss.unwrap(), &mut ParamStore::new()).unwrap();
    let grad = g.grad(out.offsets[0]).unwrap();
    let (_, ch, hh, ww) = grad.dims4().unwrap();
    let mut selected = std::collections::HashSet::new();
    for (n, t) in ts.iter().enumerate() {
        for i in t.matched.positives() {
            let s = anchors.slot(i);
            for j in 0..4 {
                selected.insert((n, (s.a * 3 + t.matched.bins[i]) * 4 + j, s.y, s.x));
            }
        }
    }
    let mut nonzero = 0;
    for n in 0..2 {
        for c in 0..ch {
            for y in 0..hh {
                for x in 0..ww {
                    let v = grad.data()[((n * ch + c) * hh + y) * ww + x];
                    if selected.contains(&(n, c, y, x)) {
                        nonzero += usize::from(v != 0.0);
                    } else {
                        assert_eq!(v, 0.0, "image {n} channel {c} at {y},{x}");
                    }
                }
            }
        }
    }
    assert_eq!(nonzero, selected.len());
}

#[test]
fn duplicated_output_doubles_the_loss() {
    let anchors = one_level(3, 4, &[1.0, 0.5]);
    let h = heads(&anchors, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (s, o) = random_maps(&anchors, &h, 1, &mut rng);
    let ts = vec![targets(24, &[(5, 1, 1, [0.2, 0.1, -0.3, 0.0])])];
    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let cfg = LossConfig::default();
    let (one, r1) = total_loss(&mut g, &[out.clone()], &anchors, &h, &ts, &cfg).unwrap();
    let (two, r2) = total_loss(&mut g, &[out.clone(), out], &anchors, &h, &ts, &cfg).unwrap();
    let (one, two) = (scalar(&g, one.unwrap()), scalar(&g, two.unwrap()));
    assert!((two - 2.0 * one).abs() < 1e-12);
    assert!((r2.total - 2.0 * r1.total).abs() < 1e-12);
    assert_eq!(r2.per_output[0], r2.per_output[1]);
}

#[test]
fn batch_without_positives_contributes_nothing() {
    let anchors = one_level(2, 2, &[1.0]);
    let h = heads(&anchors, 1, 1);
    let (s, o) = zero_maps(&anchors, &h, 2);
    let ts = vec![targets(4, &[]), targets(4, &[])];
    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let (loss, report) = total_loss(&mut g, &[out], &anchors, &h, &ts, &LossConfig::default()).unwrap();
    assert!(loss.is_none());
    assert_eq!(report.flagged_images, 2);
    assert_eq!(report.total, 0.0);
}

/// Per-anchor oracle: visits anchors in reverse order, so agreement shows the
/// loss does not depend on the anchor enumeration.
fn oracle(anchors: &AnchorSet, h: &HeadConfig, s: &[Tensor], o: &[Tensor], ts: &[ImageTargets], picked: &[Vec<usize>]) -> Real {
    let k1 = h.num_classes + 1;
    let pos: usize = ts.iter().map(|t| t.matched.num_positives()).sum();
    let mut total = 0.0;
    for (n, t) in ts.iter().enumerate() {
        for &i in picked[n].iter().rev() {
            let sl = anchors.slot(i);
            let (_, ch, hh, ww) = s[sl.level].dims4().unwrap();
            let at = |c: usize| s[sl.level].data()[((n * ch + sl.a * k1 + c) * hh + sl.y) * ww + sl.x];
            let z: Real = (0..k1).map(|c| at(c).exp()).sum();
            total += z.ln() - at(t.labels[i]);
        }
        for i in (0..anchors.len()).rev().filter(|&i| t.matched.assigned[i].is_some()) {
            let sl = anchors.slot(i);
            let (_, ch, hh, ww) = o[sl.level].dims4().unwrap();
            for j in 0..4 {
                let c = (sl.a * h.regressors + t.matched.bins[i]) * 4 + j;
                let d = o[sl.level].data()[((n * ch + c) * hh + sl.y) * ww + sl.x] - t.matched.targets[i][j];
                total += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
    }
    total / pos as Real
}

#[test]
fn loss_matches_reverse_order_oracle() {
    let anchors = AnchorSet::new(AnchorSpec::linear(0.2, 0.6, &[(4, 5), (2, 3)], &[1.0, 2.0, 0.5])).unwrap();
    let h = heads(&anchors, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n_anchors = anchors.len();
    for _ in 0..5 {
        let (s, o) = random_maps(&anchors, &h, 3, &mut rng);
        let ts: Vec<ImageTargets> = (0..3)
            .map(|_| {
                let mut idx: Vec<usize> = (0..rng.random_range(0..5)).map(|_| rng.random_range(0..n_anchors)).collect();
                idx.sort_unstable();
                idx.dedup();
                let pos: Vec<_> = idx
                    .into_iter()
                    .map(|i| (i, rng.random_range(1..4), rng.random_range(0..2), [rng.random_range(-2.0..2.0); 4]))
                    .collect();
                targets(n_anchors, &pos)
            })
            .collect();
        if ts.iter().all(|t| t.matched.num_positives() == 0) {
            continue;
        }
        let mut g = Graph::new();
        let out = output(&mut g, s.clone(), o.clone());
        let picked: Vec<Vec<usize>> =
            (0..3).map(|n| mine_anchors(&g, &out.scores, &anchors, &h, &ts[n], n, 3)).collect();
        let (loss, report) = total_loss(&mut g, &[out], &anchors, &h, &ts, &LossConfig::default()).unwrap();
        let want = oracle(&anchors, &h, &s, &o, &ts, &picked);
        assert!((scalar(&g, loss.unwrap()) - want).abs() < 1e-12);
        assert!((report.total - want).abs() < 1e-12);
    }
}

#[test]
fn confident_correct_scores_give_near_zero_loss() {
    let anchors = one_level(2, 2, &[1.0]);
    let h = heads(&anchors, 1, 1);
    let (mut s, o) = zero_maps(&anchors, &h, 1);
    // Anchor 1 is the positive (class 1); the rest are background.
    let d = s[0].data_mut();
    for i in 0..4 {
        let c = if i == 1 { 1 } else { 0 };
        d[c * 4 + i] = 30.0;
    }
    let t = targets(4, &[(1, 1, 0, [0.0; 4])]);
    let mut g = Graph::new();
    let out = output(&mut g, s, o);
    let cls = classification_loss(&mut g, &out, &anchors, &h, &[t.clone()], &LossConfig::default()).unwrap().unwrap();
    let reg = regression_loss(&mut g, &out, &anchors, &h, &[t]).unwrap().unwrap();
    assert!(scalar(&g, cls) < 1e-12, "{}", scalar(&g, cls));
    assert_eq!(scalar(&g, reg), 0.0);
}

#[test]
fn regression_loss_is_continuous_at_the_branch_point() {
    let anchors = one_level(1, 1, &[1.0]);
    let h = heads(&anchors, 1, 1);
    let at = |d: Real| {
        let (s, o) = zero_maps(&anchors, &h, 1);
        let t = targets(1, &[(0, 1, 0, [d, 0.0, 0.0, 0.0])]);
        let mut g = Graph::new();
        let out = output(&mut g, s, o);
        let reg = regression_loss(&mut g, &out, &anchors, &h, &[t]).unwrap().unwrap();
        g.backward(reg, &mut ParamStore::new()).unwrap();
        (scalar(&g, reg), g.grad(out.offsets[0]).unwrap().data()[0])
    };
    let eps = 1e-9;
    let (lo, glo) = at(1.0 - eps);
    let (mid, gmid) = at(1.0);
    let (hi, ghi) = at(1.0 + eps);
    assert!((mid - 0.5).abs() < 1e-15);
    assert!((lo - mid).abs() < 2e-9 && (hi - mid).abs() < 2e-9);
    // Prediction 0 against target d: the slope is -1 on both sides.
    for gr in [glo, gmid, ghi] {
        assert!((gr + 1.0).abs() < 1e-8, "{gr}");
    }
}

#[test]
fn permuting_anchor_positions_leaves_the_loss_unchanged() {
    // Transposing a square grid permutes anchors; losses must follow.
    let anchors = one_level(3, 3, &[1.0]);
    let h = heads(&anchors, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (s, o) = random_maps(&anchors, &h, 1, &mut rng);
    let pos = [(1usize, 1usize, [0.2, -0.4, 0.1, 0.3]), (5, 2, [-1.5, 0.7, 0.0, 2.0])];
    let t = targets(9, &pos.iter().map(|&(i, l, off)| (i, l, 0, off)).collect::<Vec<_>>());

    let transpose = |m: &Tensor| {
        let c = m.shape()[1];
        let mut out = m.clone();
        for ch in 0..c {
            for y in 0..3 {
                for x in 0..3 {
                    out.data_mut()[ch * 9 + x * 3 + y] = m.data()[ch * 9 + y * 3 + x];
                }
            }
        }
        out
    };
    let tr = |i: usize| (i % 3) * 3 + i / 3;
    let tt = targets(9, &pos.iter().map(|&(i, l, off)| (tr(i), l, 0, off)).collect::<Vec<_>>());
    let (s2, o2) = (vec![transpose(&s[0])], vec![transpose(&o[0])]);

    let eval = |s: Vec<Tensor>, o: Vec<Tensor>, t: ImageTargets| {
        let mut g = Graph::new();
        let out = output(&mut g, s, o);
        let c = classification_loss(&mut g, &out, &anchors, &h, &[t.clone()], &LossConfig::default()).unwrap().unwrap();
        let r = regression_loss(&mut g, &out, &anchors, &h, &[t]).unwrap().unwrap();
        (scalar(&g, c), scalar(&g, r))
    };
    let (c1, r1) = eval(s, o, t);
    let (c2, r2) = eval(s2, o2, tt);
    assert!((c1 - c2).abs() < 1e-12, "{c1} vs {c2}");
    assert!((r1 - r2).abs() < 1e-12, "{r1} vs {r2}");
}
