//! Feed-forward VGG-style backbone producing the multi-scale feature
//! pyramid, with every tap adapted to a common channel width.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim, Error, Result};
use crate::graph::{Graph, PoolMode, Var};
use crate::init::{conv_params, ConvParams};
use crate::kernels::conv_extent;
use crate::params::ParamStore;

/// One block of `convs` 3×3 convolutions (each followed by ReLU) and an
/// optional trailing 2×2/2 max pool. `stride` and `pad` apply to the last
/// convolution of the block; the others keep the spatial extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub convs: usize,
    pub channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool: Option<PoolMode>,
}

impl StageSpec {
    pub fn new(convs: usize, channels: usize) -> Self {
        Self {
            convs,
            channels,
            stride: 1,
            pad: 1,
            pool: None,
        }
    }

    pub fn pooled(mut self, mode: PoolMode) -> Self {
        self.pool = Some(mode);
        self
    }

    pub fn strided(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// `(channels, height, width)` of the input image.
    pub input: [usize; 3],
    pub stages: Vec<StageSpec>,
    /// Stage indices whose outputs become pyramid levels, lowest first.
    pub taps: Vec<usize>,
    pub common_channels: usize,
}

impl BackboneConfig {
    /// 3×96×96 input, five pooled stages of widths 32/64/96/128/128,
    /// taps after the last four pools (24, 12, 6 and 3 cells wide).
    pub fn desk() -> Self {
        let pooled = |c| StageSpec::new(2, c).pooled(PoolMode::Floor);
        Self {
            input: [3, 96, 96],
            stages: alloc::vec![pooled(32), pooled(64), pooled(96), pooled(128), pooled(128)],
            taps: alloc::vec![1, 2, 3, 4],
            common_channels: 64,
        }
    }

    /// Shape-level stand-in for the reduced VGG-16 on 1272×375 KITTI input:
    /// conv4_3, FC7, conv8_2, conv9_2 and conv10_2 taps.
    pub fn kitti_vgg() -> Self {
        let s = StageSpec::new;
        Self {
            input: [3, 375, 1272],
            stages: alloc::vec![
                s(2, 64).pooled(PoolMode::Ceil),
                s(2, 128).pooled(PoolMode::Ceil),
                s(3, 256).pooled(PoolMode::Ceil),
                s(3, 512),
                s(0, 512).pooled(PoolMode::Ceil),
                s(3, 512),
                s(2, 1024),
                s(2, 256).strided(2, 1),
                s(2, 256).strided(2, 1),
                s(2, 256).strided(1, 0),
            ],
            taps: alloc::vec![3, 6, 7, 8, 9],
            common_channels: 256,
        }
    }

    /// `(channels, height, width)` after every stage.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("empty input shape {:?}", self.input)));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, st) in self.stages.iter().enumerate() {
            if st.convs > 0 {
                if st.channels == 0 || st.stride == 0 {
                    return Err(Error::Config(format!("stage {i}: channels and stride must be positive")));
                }
                let (ih, iw) = (h, w);
                let too_small = || Error::Config(format!("stage {i}: input {ih}x{iw} too small for its convolution"));
                h = conv_extent(ih, 3, st.stride, st.pad).ok_or_else(too_small)?;
                w = conv_extent(iw, 3, st.stride, st.pad).ok_or_else(too_small)?;
                c = st.channels;
            }
            if let Some(mode) = st.pool {
                let (ih, iw) = (h, w);
                let too_small = || Error::Config(format!("stage {i}: {ih}x{iw} too small to pool"));
                h = mode.extent(ih, 2, 2).ok_or_else(too_small)?;
                w = mode.extent(iw, 2, 2).ok_or_else(too_small)?;
            }
            out.push([c, h, w]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.common_channels == 0 {
            return Err(Error::Config("common_channels must be positive".into()));
        }
        if self.taps.len() < 2 {
            return Err(Error::Config(format!("need at least 2 taps, got {}", self.taps.len())));
        }
        let shapes = self.stage_shapes()?;
        let mut convs_so_far = 0;
        let mut next_tap = 0;
        for (i, st) in self.stages.iter().enumerate() {
            convs_so_far += st.convs;
            if self.taps.get(next_tap) == Some(&i) {
                if convs_so_far == 0 {
                    return Err(Error::Config(format!("tap at stage {i} follows no convolution")));
                }
                next_tap += 1;
            }
        }
        if next_tap != self.taps.len() {
            return Err(Error::Config(format!(
                "taps {:?} must be strictly increasing stage indices below {}",
                self.taps,
                self.stages.len()
            )));
        }
        for pair in self.taps.windows(2) {
            let [_, h0, w0] = shapes[pair[0]];
            let [_, h1, w1] = shapes[pair[1]];
            if h1 >= h0 || w1 >= w0 {
                return Err(Error::Config(format!(
                    "tap spatial extents must strictly decrease: stage {} is {h0}x{w0}, stage {} is {h1}x{w1}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(())
    }

    /// Raw (pre-adaptation) `(channels, height, width)` of each tap.
    pub fn tap_shapes(&self) -> Result<Vec<[usize; 3]>> {
        self.validate()?;
        let shapes = self.stage_shapes()?;
        Ok(self.taps.iter().map(|&t| shapes[t]).collect())
    }

    /// Pyramid level shapes after channel adaptation.
    pub fn level_shapes(&self) -> Result<Vec<[usize; 3]>> {
        Ok(self
            .tap_shapes()?
            .into_iter()
            .map(|[_, h, w]| [self.common_channels, h, w])
            .collect())
    }

    /// Number of convolution and pooling ops between the image and each tap.
    pub fn tap_depths(&self) -> Vec<usize> {
        let mut depth = 0;
        let mut per_stage = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            depth += st.convs + usize::from(st.pool.is_some());
            per_stage.push(depth);
        }
        self.taps.iter().map(|&t| per_stage[t]).collect()
    }
}

/// Pyramid levels on a graph, level 0 being the finest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    /// `(channels, height, width)` per level.
    pub shapes: Vec<[usize; 3]>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Vec<ConvParams>>,
    adapt: Vec<ConvParams>,
    adapt_kernels: Vec<usize>,
}

impl Backbone {
    /// Registers `backbone.*` parameters, initialized deterministically from `seed`.
    pub fn build(config: BackboneConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut in_c = config.input[0];
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, st) in config.stages.iter().enumerate() {
            let mut convs = Vec::with_capacity(st.convs);
            for j in 0..st.convs {
                let p = conv_params(store, &format!("backbone.stage{i}.conv{j}"), st.channels, in_c, 3, &mut rng)?;
                convs.push(p);
                in_c = st.channels;
            }
            stages.push(convs);
        }
        let shapes = config.tap_shapes()?;
        let mut adapt = Vec::with_capacity(shapes.len());
        let mut adapt_kernels = Vec::with_capacity(shapes.len());
        for (level, [c, _, _]) in shapes.iter().enumerate() {
            let k = if level < 2 { 3 } else { 1 };
            adapt.push(conv_params(
                store,
                &format!("backbone.adapt{level}"),
                config.common_channels,
                *c,
                k,
                &mut rng,
            )?);
            adapt_kernels.push(k);
        }
        Ok(Self {
            config,
            stages,
            adapt,
            adapt_kernels,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the image batch through the stages and adapts each tap.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var, trainable: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = g.value(image).dims4()?;
        let [ec, eh, ew] = self.config.input;
        if c != ec {
            return Err(dim("backbone", "channels", ec, c));
        }
        if h != eh {
            return Err(dim("backbone", "height", eh, h));
        }
        if w != ew {
            return Err(dim("backbone", "width", ew, w));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.adapt.len());
        let mut shapes = Vec::with_capacity(self.adapt.len());
        for (i, (st, convs)) in self.config.stages.iter().zip(&self.stages).enumerate() {
            for (j, p) in convs.iter().enumerate() {
                let last = j + 1 == convs.len();
                let (stride, pad) = if last { (st.stride, st.pad) } else { (1, 1) };
                let k = g.bind(store, p.weight, trainable);
                let b = g.bind(store, p.bias, trainable);
                let y = g.conv2d(x, k, Some(b), stride, pad)?;
                x = g.relu(y);
            }
            if let Some(mode) = st.pool {
                x = g.maxpool2d_mode(x, 2, 2, mode)?;
            }
            if let Some(level) = self.config.taps.iter().position(|&t| t == i) {
                let p = self.adapt[level];
                let k = self.adapt_kernels[level];
                let wv = g.bind(store, p.weight, trainable);
                let bv = g.bind(store, p.bias, trainable);
                let y = g.conv2d(x, wv, Some(bv), 1, k / 2)?;
                let y = g.relu(y);
                let (_, c, h, w) = g.value(y).dims4()?;
                levels.push(y);
                shapes.push([c, h, w]);
            }
        }
        Ok(FeaturePyramid { levels, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn kitti_tap_shapes() {
        let cfg = BackboneConfig::kitti_vgg();
        let taps = cfg.tap_shapes().unwrap();
        let hw: Vec<_> = taps.iter().map(|s| (s[1], s[2])).collect();
        assert_eq!(&hw[..4], &[(47, 159), (24, 80), (12, 40), (6, 20)]);
        assert!(hw[4].0 < 6 && hw[4].1 < 20);
        assert_eq!(taps[0][0], 512);
        assert_eq!(taps[1][0], 1024);
    }

    #[test]
    fn desk_tap_shapes() {
        let cfg = BackboneConfig::desk();
        let hw: Vec<_> = cfg.tap_shapes().unwrap().iter().map(|s| (s[1], s[2])).collect();
        assert_eq!(hw, [(24, 24), (12, 12), (6, 6), (3, 3)]);
        for s in cfg.level_shapes().unwrap() {
            assert_eq!(s[0], 64);
        }
    }

    #[test]
    fn single_conv_without_pooling() {
        let cfg = BackboneConfig {
            input: [3, 8, 8],
            stages: alloc::vec![StageSpec::new(1, 4), StageSpec::new(1, 4).strided(2, 1)],
            taps: alloc::vec![0, 1],
            common_channels: 4,
        };
        assert_eq!(cfg.tap_shapes().unwrap(), [[4, 8, 8], [4, 4, 4]]);
    }

    #[test]
    fn config_errors() {
        let mut cfg = BackboneConfig::desk();
        cfg.taps = alloc::vec![1];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::desk();
        cfg.taps = alloc::vec![2, 1];
        assert!(cfg.validate().is_err());
        let cfg = BackboneConfig {
            input: [3, 8, 8],
            stages: alloc::vec![StageSpec::new(0, 4).pooled(PoolMode::Floor), StageSpec::new(1, 4).pooled(PoolMode::Floor)],
            taps: alloc::vec![0, 1],
            common_channels: 4,
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("no convolution")));
        let mut cfg = BackboneConfig::desk();
        cfg.stages[1] = StageSpec::new(2, 64);
        cfg.taps = alloc::vec![0, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("strictly decrease")));
    }

    #[test]
    fn depth_increases_with_level() {
        for cfg in [BackboneConfig::desk(), BackboneConfig::kitti_vgg()] {
            let d = cfg.tap_depths();
            assert!(d.windows(2).all(|p| p[0] < p[1]), "{d:?}");
        }
    }

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            input: [3, 16, 16],
            stages: alloc::vec![
                StageSpec::new(1, 4).pooled(PoolMode::Floor),
                StageSpec::new(1, 6).pooled(PoolMode::Floor),
                StageSpec::new(1, 8).pooled(PoolMode::Floor),
            ],
            taps: alloc::vec![0, 1, 2],
            common_channels: 5,
        }
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_pyramid() {
        let mut store = ParamStore::new();
        let bb = Backbone::build(tiny(), 3, &mut store).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        let pyr = bb.forward(&mut g, &store, img, false).unwrap();
        for &l in &pyr.levels {
            assert!(g.value(l).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_items_are_independent_and_deterministic() {
        let mut store = ParamStore::new();
        let bb = Backbone::build(tiny(), 3, &mut store).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let two = Tensor::stack_batch(&[one.clone(), one.clone()]).unwrap();
        let mut g = Graph::new();
        let img = g.constant(two);
        let pyr = bb.forward(&mut g, &store, img, false).unwrap();
        assert_eq!(pyr.shapes, [[5, 8, 8], [5, 4, 4], [5, 2, 2]]);
        for &l in &pyr.levels {
            let t = g.value(l);
            assert_eq!(t.shape()[1], 5);
            assert_eq!(t.batch_item(0).unwrap(), t.batch_item(1).unwrap());
        }
        let mut store2 = ParamStore::new();
        Backbone::build(tiny(), 3, &mut store2).unwrap();
        assert_eq!(store.snapshot(), store2.snapshot());
    }

    #[test]
    fn wrong_image_shape() {
        let mut store = ParamStore::new();
        let bb = Backbone::build(tiny(), 3, &mut store).unwrap();
        let mut g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 3, 16, 15]));
        assert!(matches!(
            bb.forward(&mut g, &store, img, false),
            Err(Error::Dimension { axis: "width", .. })
        ));
    }
}
