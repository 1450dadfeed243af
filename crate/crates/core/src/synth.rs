//! Synthetic detection scenes and the training-time augmentations.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::loss::GroundTruth;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// How one class is drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub color: [Real; 3],
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive object count range.
    pub count: (usize, usize),
    /// Object size `sqrt(w * h)` as a fraction of the image side.
    pub scale: (Real, Real),
    /// Largest IoU allowed between two objects of a scene.
    pub max_overlap: Real,
    pub palette: Vec<ClassStyle>,
}

impl SceneSpec {
    /// Three classes: red rectangles, green ellipses, blue rectangles.
    pub fn desk(seed: u64, height: usize, width: usize) -> Self {
        Self {
            seed,
            height,
            width,
            count: (1, 5),
            scale: (0.12, 0.5),
            max_overlap: 0.3,
            palette: vec![
                ClassStyle {
                    color: [0.85, 0.2, 0.15],
                    shape: Shape::Rectangle,
                },
                ClassStyle {
                    color: [0.2, 0.75, 0.25],
                    shape: Shape::Ellipse,
                },
                ClassStyle {
                    color: [0.2, 0.3, 0.9],
                    shape: Shape::Rectangle,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::Config(alloc::format!("scale range {lo}..{hi} must lie in (0, 1)")));
        }
        if self.count.0 > self.count.1 {
            return Err(Error::Config("object count range is reversed".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image extent must be positive".into()));
        }
        if self.palette.is_empty() && self.count.1 > 0 {
            return Err(Error::Config("palette is empty".into()));
        }
        Ok(())
    }
}

/// Image `3 × H × W` in `[0, 1]` with unit-square groundtruth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn covers(shape: Shape, cx: Real, cy: Real, rw: Real, rh: Real, px: Real, py: Real) -> bool {
    let (dx, dy) = ((px - cx) / rw, (py - cy) / rh);
    match shape {
        Shape::Rectangle => libm::fabs(dx) <= 1.0 && libm::fabs(dy) <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
    }
}

/// Renders scene `index`. Later objects occlude earlier ones; every box is
/// the tight pixel hull of its full (unoccluded) shape.
pub fn synth_scene(spec: &SceneSpec, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = scene_rng(spec.seed, index);
    let plane = h * w;
    let mut img = vec![0.0; 3 * plane];

    // Background: a tinted gradient, two low-frequency waves and pixel noise.
    let base: [Real; 3] = core::array::from_fn(|_| rng.random_range(0.25..0.65));
    let tilt: [Real; 2] = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let waves: Vec<(Real, Real, Real, Real)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..core::f64::consts::TAU),
                rng.random_range(0.0..core::f64::consts::PI),
                rng.random_range(0.03..0.1),
            )
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as Real + 0.5) / w as Real, (y as Real + 0.5) / h as Real);
            let mut shade = tilt[0] * (u - 0.5) + tilt[1] * (v - 0.5);
            for &(freq, phase, angle, amp) in &waves {
                let t = u * libm::cos(angle) + v * libm::sin(angle);
                shade += amp * libm::sin(core::f64::consts::TAU * freq * t + phase);
            }
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                img[c * plane + y * w + x] = base[c] + shade + noise;
            }
        }
    }

    let count = rng.random_range(spec.count.0..=spec.count.1);
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..20 {
            let class = rng.random_range(0..spec.palette.len());
            let style = spec.palette[class];
            let side = rng.random_range(spec.scale.0..=spec.scale.1);
            let aspect = libm::exp(rng.random_range(libm::log(0.5)..=libm::log(2.0)));
            let (bw, bh) = (side * libm::sqrt(aspect) * w as Real, side / libm::sqrt(aspect) * h as Real);
            let (bw, bh) = (bw.min(w as Real - 1.0), bh.min(h as Real - 1.0));
            let cx = rng.random_range(0.5 * bw..=w as Real - 0.5 * bw);
            let cy = rng.random_range(0.5 * bh..=h as Real - 0.5 * bh);
            let (rw, rh) = (0.5 * bw, 0.5 * bh);

            let mut hull: Option<(usize, usize, usize, usize)> = None;
            for y in 0..h {
                for x in 0..w {
                    if covers(style.shape, cx, cy, rw, rh, x as Real + 0.5, y as Real + 0.5) {
                        hull = Some(hull.map_or((x, y, x, y), |(a, b, c, d)| (a.min(x), b.min(y), c.max(x), d.max(y))));
                    }
                }
            }
            let Some((x0, y0, x1, y1)) = hull else { continue };
            let bbox = BBox {
                x_min: x0 as Real / w as Real,
                y_min: y0 as Real / h as Real,
                x_max: (x1 + 1) as Real / w as Real,
                y_max: (y1 + 1) as Real / h as Real,
            };
            if objects.iter().any(|o| iou(&o.bbox, &bbox) > spec.max_overlap) {
                continue;
            }
            let tint: [Real; 3] = core::array::from_fn(|c| (style.color[c] + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0));
            let stripe = rng.random_range(0.0..0.12);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (px, py) = (x as Real + 0.5, y as Real + 0.5);
                    if !covers(style.shape, cx, cy, rw, rh, px, py) {
                        continue;
                    }
                    let band = if (x + y) / 3 % 2 == 0 { stripe } else { 0.0 };
                    for c in 0..3 {
                        img[c * plane + y * w + x] = tint[c] - band;
                    }
                }
            }
            objects.push(GroundTruth { bbox, class });
            break;
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], img)?,
        objects,
    })
}

/// `(h, s, v)` with hue in `[0, 6)`.
pub fn rgb_to_hsv([r, g, b]: [Real; 3]) -> [Real; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        let h = (g - b) / delta;
        if h < 0.0 {
            h + 6.0
        } else {
            h
        }
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [Real; 3]) -> [Real; 3] {
    let c = v * s;
    let sector = libm::floor(h);
    let f = h - sector;
    let (p, q, t) = (v - c, v - c * f, v - c * (1.0 - f));
    match sector as i64 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Scales saturation and value of a `3 × H × W` image by independent
/// factors drawn log-uniformly from `[1/factor, factor]`.
pub fn hsv_jitter<R: Rng + ?Sized>(image: &Tensor, factor: Real, rng: &mut R) -> Result<Tensor> {
    if !(factor >= 1.0) {
        return Err(Error::Config(alloc::format!("jitter factor must be at least 1, got {factor}")));
    }
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(crate::error::dim("hsv_jitter", "channels", 3, shape[0]));
    }
    let span = libm::log(factor);
    let mut draw = || if span > 0.0 { libm::exp(rng.random_range(-span..=span)) } else { 1.0 };
    let (ks, kv) = (draw(), draw());
    let plane = shape[1] * shape[2];
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..plane {
        let [h, s, v] = rgb_to_hsv([src[i], src[plane + i], src[2 * plane + i]]);
        let rgb = hsv_to_rgb([h, (s * ks).clamp(0.0, 1.0), (v * kv).clamp(0.0, 1.0)]);
        for c in 0..3 {
            out[c * plane + i] = rgb[c];
        }
    }
    Tensor::new(shape, out)
}

/// Mirrors image and boxes left to right.
pub fn flip_horizontal(sample: &Sample) -> Sample {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let src = sample.image.data();
    let image = Tensor::from_fn(sample.image.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        src[(c * h + y) * w + (w - 1 - x)]
    });
    let objects = sample
        .objects
        .iter()
        .map(|o| GroundTruth {
            bbox: BBox {
                x_min: 1.0 - o.bbox.x_max,
                y_min: o.bbox.y_min,
                x_max: 1.0 - o.bbox.x_min,
                y_max: o.bbox.y_max,
            },
            class: o.class,
        })
        .collect();
    Sample { image, objects }
}

/// Cuts `window` (unit coordinates) out of the sample and resizes it back
/// to the original extent bilinearly. Objects whose center lies outside the
/// window are dropped; the rest are clipped and remapped.
pub fn crop(sample: &Sample, window: &BBox) -> Sample {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let src = sample.image.data();
    let sy = |i: usize| window.y_min * h as Real + (i as Real + 0.5) * window.height() - 0.5;
    let sx = |j: usize| window.x_min * w as Real + (j as Real + 0.5) * window.width() - 0.5;
    let image = Tensor::from_fn(sample.image.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (fy, fx) = (sy(y).clamp(0.0, (h - 1) as Real), sx(x).clamp(0.0, (w - 1) as Real));
        let (y0, x0) = (libm::floor(fy) as usize, libm::floor(fx) as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as Real, fx - x0 as Real);
        let at = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    });
    let objects = sample
        .objects
        .iter()
        .filter(|o| {
            let (cx, cy) = o.bbox.center();
            cx > window.x_min && cx < window.x_max && cy > window.y_min && cy < window.y_max
        })
        .filter_map(|o| {
            let b = BBox {
                x_min: ((o.bbox.x_min - window.x_min) / window.width()).clamp(0.0, 1.0),
                y_min: ((o.bbox.y_min - window.y_min) / window.height()).clamp(0.0, 1.0),
                x_max: ((o.bbox.x_max - window.x_min) / window.width()).clamp(0.0, 1.0),
                y_max: ((o.bbox.y_max - window.y_min) / window.height()).clamp(0.0, 1.0),
            };
            b.is_valid().then_some(GroundTruth { bbox: b, class: o.class })
        })
        .collect();
    Sample { image, objects }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: Real,
    /// Crop side as a fraction of the image side.
    pub crop_scale: (Real, Real),
    pub crop_aspect: (Real, Real),
    pub max_trials: usize,
    pub hsv_factor: Real,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            crop_scale: (0.3, 1.0),
            crop_aspect: (0.5, 2.0),
            max_trials: 50,
            hsv_factor: 1.3,
        }
    }
}

/// Minimum-IoU choices for the random crop; `None` keeps the whole image.
const CROP_MIN_IOU: [Option<Real>; 6] = [None, Some(0.1), Some(0.3), Some(0.5), Some(0.7), Some(0.9)];

/// Random flip followed by a random crop whose IoU with at least one object
/// reaches a randomly chosen minimum. Crops keeping no object are redrawn;
/// after `max_trials` the uncropped sample is returned.
pub fn ssd_augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let flipped = if rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0)) {
        flip_horizontal(sample)
    } else {
        sample.clone()
    };
    let Some(min_iou) = CROP_MIN_IOU[rng.random_range(0..CROP_MIN_IOU.len())] else {
        return flipped;
    };
    if flipped.objects.is_empty() {
        return flipped;
    }
    for _ in 0..cfg.max_trials {
        let side = rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let aspect = libm::exp(rng.random_range(libm::log(cfg.crop_aspect.0)..=libm::log(cfg.crop_aspect.1)));
        let (cw, ch) = ((side * libm::sqrt(aspect)).min(1.0), (side / libm::sqrt(aspect)).min(1.0));
        let x0 = rng.random_range(0.0..=1.0 - cw);
        let y0 = rng.random_range(0.0..=1.0 - ch);
        let window = BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + cw,
            y_max: y0 + ch,
        };
        if !flipped.objects.iter().any(|o| iou(&o.bbox, &window) >= min_iou) {
            continue;
        }
        let out = crop(&flipped, &window);
        if !out.objects.is_empty() {
            return out;
        }
    }
    flipped
}

/// Seeded shuffle split into sorted `(train, val)` index lists.
pub fn split(n: usize, val_fraction: Real, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(alloc::format!("validation fraction {val_fraction} not in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = libm::round(n as Real * val_fraction) as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
