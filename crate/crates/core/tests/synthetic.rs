use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rrc_core::boxes::BBox;
use rrc_core::loss::GroundTruth;
use rrc_core::synth::{
    crop, flip_horizontal, hsv_jitter, hsv_to_rgb, rgb_to_hsv, split, ssd_augment, synth_scene, AugmentConfig, SceneSpec,
};
use rrc_core::{Real, Tensor};

#[test]
fn empty_count_range_gives_background_only() {
    let spec = SceneSpec { count: (0, 0), ..SceneSpec::desk(3, 32, 48) };
    let s = synth_scene(&spec, 0).unwrap();
    assert!(s.objects.is_empty());
    assert_eq!(s.image.shape(), &[3, 32, 48]);
}

#[test]
fn scenes_are_deterministic_and_distinct() {
    let spec = SceneSpec::desk(7, 64, 64);
    assert_eq!(synth_scene(&spec, 12).unwrap(), synth_scene(&spec, 12).unwrap());
    assert_ne!(synth_scene(&spec, 12).unwrap(), synth_scene(&spec, 13).unwrap());
    let other = SceneSpec::desk(8, 64, 64);
    assert_ne!(synth_scene(&spec, 12).unwrap(), synth_scene(&other, 12).unwrap());
}

#[test]
fn box_sizes_follow_the_scale_range() {
    let spec = SceneSpec { scale: (0.05, 0.1), count: (3, 6), ..SceneSpec::desk(1, 96, 96) };
    let mut seen = 0;
    for i in 0..50 {
        for o in synth_scene(&spec, i).unwrap().objects {
            // sqrt(w h) of the drawn shape is 4.8..9.6 px; pixel hulls add at most one.
            let side = (o.bbox.width() * 96.0 * o.bbox.height() * 96.0).sqrt();
            assert!((3.0..=11.0).contains(&side), "side {side}");
            seen += 1;
        }
    }
    assert!(seen > 100);
}

#[test]
fn boxes_lie_on_the_pixel_grid() {
    let spec = SceneSpec { count: (1, 1), ..SceneSpec::desk(5, 40, 40) };
    for i in 0..20 {
        let s = synth_scene(&spec, i).unwrap();
        let b = s.objects[0].bbox;
        assert!(b.is_valid() && b.x_min >= 0.0 && b.y_max <= 1.0);
        let (x0, y0) = ((b.x_min * 40.0).round() as usize, (b.y_min * 40.0).round() as usize);
        let (x1, y1) = ((b.x_max * 40.0).round() as usize, (b.y_max * 40.0).round() as usize);
        assert!((b.x_min * 40.0 - x0 as Real).abs() < 1e-9 && (b.y_max * 40.0 - y1 as Real).abs() < 1e-9);
        assert!(x1 > x0 && y1 > y0);
    }
}

#[test]
fn hsv_round_trip_and_gray_hue() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let same = hsv_jitter(&img, 1.0, &mut rng).unwrap();
    assert!(same.max_abs_diff(&img) < 1e-6);
    for i in 0..256 {
        let d = img.data();
        let rgb = [d[i], d[256 + i], d[512 + i]];
        let back = hsv_to_rgb(rgb_to_hsv(rgb));
        for c in 0..3 {
            assert!((back[c] - rgb[c]).abs() < 1e-12);
        }
    }
    let gray = Tensor::full(&[3, 4, 4], 0.4);
    for _ in 0..20 {
        let j = hsv_jitter(&gray, 1.3, &mut rng).unwrap();
        let px = [j.data()[0], j.data()[16], j.data()[32]];
        assert_eq!(rgb_to_hsv(px)[1], 0.0);
        assert!(px[0] == px[1] && px[1] == px[2]);
        assert!((0.4 / 1.3 - 1e-12..=0.4 * 1.3 + 1e-12).contains(&px[0]));
    }
    assert!(hsv_jitter(&img, 0.9, &mut rng).is_err());
}

#[test]
fn flip_is_an_involution() {
    let s = synth_scene(&SceneSpec::desk(2, 24, 36), 3).unwrap();
    let twice = flip_horizontal(&flip_horizontal(&s));
    assert_eq!(twice.image, s.image);
    for (a, b) in twice.objects.iter().zip(&s.objects) {
        assert!((a.bbox.x_min - b.bbox.x_min).abs() < 1e-15 && (a.bbox.x_max - b.bbox.x_max).abs() < 1e-15);
    }
}

#[test]
fn full_window_crop_is_identity() {
    let s = synth_scene(&SceneSpec::desk(2, 24, 36), 4).unwrap();
    let full = crop(&s, &BBox::new(0.0, 0.0, 1.0, 1.0).unwrap());
    assert!(full.image.max_abs_diff(&s.image) < 1e-12);
    assert_eq!(full.objects, s.objects);
}

#[test]
fn half_window_crop_remaps_boxes() {
    let sample = rrc_core::synth::Sample {
        image: Tensor::zeros(&[3, 8, 8]),
        objects: vec![
            GroundTruth { bbox: BBox::new(0.6, 0.2, 0.8, 0.4).unwrap(), class: 1 },
            GroundTruth { bbox: BBox::new(0.1, 0.1, 0.2, 0.2).unwrap(), class: 0 },
        ],
    };
    // Right half: x' = (x - 0.5) / 0.5; the second box's center falls outside.
    let out = crop(&sample, &BBox::new(0.5, 0.0, 1.0, 1.0).unwrap());
    assert_eq!(out.objects.len(), 1);
    let b = out.objects[0].bbox;
    for (got, want) in [(b.x_min, 0.2), (b.y_min, 0.2), (b.x_max, 0.6), (b.y_max, 0.4)] {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(out.objects[0].class, 1);
}

proptest! {
    #[test]
    fn augmentation_keeps_boxes_valid(seed in 0u64..2000, index in 0u64..50) {
        let s = synth_scene(&SceneSpec::desk(9, 32, 32), index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = ssd_augment(&s, &AugmentConfig::default(), &mut rng);
        prop_assert_eq!(out.image.shape(), s.image.shape());
        for o in &out.objects {
            prop_assert!(o.bbox.is_valid());
            prop_assert!(o.bbox.x_min >= 0.0 && o.bbox.y_min >= 0.0 && o.bbox.x_max <= 1.0 && o.bbox.y_max <= 1.0);
        }
        prop_assert!(!out.objects.is_empty() || s.objects.is_empty());
    }
}

#[test]
fn splits() {
    let (t, v) = split(10, 0.5, 1).unwrap();
    assert_eq!((t.len(), v.len()), (5, 5));
    assert!(t.iter().all(|i| !v.contains(i)));
    assert_eq!(split(10, 0.5, 1).unwrap(), (t, v));
    let (a, _) = split(1000, 0.2, 1).unwrap();
    let (b, _) = split(1000, 0.2, 2).unwrap();
    assert_ne!(a, b);
    let (t, v) = split(1000, 0.2, 3).unwrap();
    let mut all: Vec<usize> = t.into_iter().chain(v).collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert!(split(10, 1.0, 1).is_err());
}
