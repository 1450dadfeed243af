//! The recurrent rolling step and the detection heads it feeds.
//!
//! One roll lets every pyramid level exchange features with its direct
//! neighbors: the coarser neighbor arrives through 1×1 conv, ReLU and a
//! stride-2 deconvolution, the finer neighbor through 1×1 conv, ReLU and
//! 2×2 max pooling. The level concatenates both with itself and a 1×1
//! reduction conv (plus ReLU) restores the common width, so every state has
//! the shapes of the initial pyramid and the same cell can be applied again.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeaturePyramid;
use crate::error::{contract, dim, Error, Result};
use crate::graph::{Graph, Var};
use crate::init::{conv_params, fan_in_uniform, scaled_conv_params, ConvParams};
use crate::params::{ParamId, ParamStore};

/// Aggregation width used when none is configured: the 19-of-256 ratio,
/// rounded up.
pub fn default_agg_channels(common_channels: usize) -> usize {
    (common_channels * 19).div_ceil(256)
}

/// Pyramid features after `t - 1` rolls (`t = 1` is the backbone output).
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidState {
    pub t: usize,
    pub levels: Vec<Var>,
}

impl PyramidState {
    pub fn initial(pyramid: &FeaturePyramid) -> Self {
        Self {
            t: 1,
            levels: pyramid.levels.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DownPath {
    conv: ConvParams,
    deconv: ParamId,
}

/// Rolling weights, registered once and shared by every iteration.
#[derive(Clone, Debug)]
pub struct RollingCell {
    shapes: Vec<[usize; 3]>,
    agg_channels: usize,
    /// `down[p]` carries level `p + 1` into level `p`.
    down: Vec<DownPath>,
    /// `up[p]` carries level `p` into level `p + 1`.
    up: Vec<ConvParams>,
    reduce: Vec<ConvParams>,
}

impl RollingCell {
    /// `shapes` are the `(channels, height, width)` of the pyramid levels;
    /// all levels must share one channel count.
    pub fn build(shapes: &[[usize; 3]], agg_channels: usize, seed: u64, store: &mut ParamStore) -> Result<Self> {
        if shapes.len() < 2 {
            return Err(Error::Config(format!("rolling needs at least 2 levels, got {}", shapes.len())));
        }
        if agg_channels == 0 {
            return Err(Error::Config("aggregation channels must be positive".into()));
        }
        let c = shapes[0][0];
        if let Some(bad) = shapes.iter().find(|s| s[0] != c) {
            return Err(Error::Config(format!("pyramid levels disagree on channels: {c} vs {}", bad[0])));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let levels = shapes.len();
        let mut down = Vec::with_capacity(levels - 1);
        let mut up = Vec::with_capacity(levels - 1);
        for p in 0..levels - 1 {
            let conv = conv_params(store, &format!("rrc.down{p}.conv"), agg_channels, c, 1, &mut rng)?;
            let deconv = store.register(
                format!("rrc.down{p}.deconv.w"),
                fan_in_uniform(&[agg_channels, agg_channels, 2, 2], agg_channels, &mut rng),
            )?;
            down.push(DownPath { conv, deconv });
            up.push(conv_params(store, &format!("rrc.up{p}.conv"), agg_channels, c, 1, &mut rng)?);
        }
        let mut reduce = Vec::with_capacity(levels);
        for p in 0..levels {
            let neighbors = usize::from(p > 0) + usize::from(p + 1 < levels);
            let in_c = c + agg_channels * neighbors;
            reduce.push(conv_params(store, &format!("rrc.reduce{p}"), c, in_c, 1, &mut rng)?);
        }
        Ok(Self {
            shapes: shapes.to_vec(),
            agg_channels,
            down,
            up,
            reduce,
        })
    }

    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn agg_channels(&self) -> usize {
        self.agg_channels
    }

    /// Input width of level `p`'s reduction conv.
    pub fn reduce_in_channels(&self, p: usize) -> usize {
        let neighbors = usize::from(p > 0) + usize::from(p + 1 < self.shapes.len());
        self.shapes[p][0] + self.agg_channels * neighbors
    }

    /// Parameter ids of the reduction conv at level `p`.
    pub fn reduce_params(&self, p: usize) -> ConvParams {
        self.reduce[p]
    }

    /// Ids of every aggregation (non-reduction) parameter.
    pub fn aggregation_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for d in &self.down {
            ids.extend([d.conv.weight, d.conv.bias, d.deconv]);
        }
        for u in &self.up {
            ids.extend([u.weight, u.bias]);
        }
        ids
    }

    fn check_shapes(&self, g: &Graph, levels: &[Var], when: &str) -> Result<()> {
        if levels.len() != self.shapes.len() {
            return Err(contract!("{when}: {} levels, cell expects {}", levels.len(), self.shapes.len()));
        }
        for (p, (&v, s)) in levels.iter().zip(&self.shapes).enumerate() {
            let (_, c, h, w) = g.value(v).dims4()?;
            if [c, h, w] != *s {
                return Err(contract!("{when}: level {p} has shape {:?}, expected {:?}", [c, h, w], s));
            }
        }
        Ok(())
    }

    /// One rolling iteration.
    pub fn roll(&self, g: &mut Graph, store: &ParamStore, state: &PyramidState, trainable: bool) -> Result<PyramidState> {
        self.check_shapes(g, &state.levels, "roll input")?;
        let levels = self.shapes.len();
        let bind = |g: &mut Graph, id| g.bind(store, id, trainable);

        // Neighbor features, computed once per source level.
        let mut from_below = Vec::with_capacity(levels - 1);
        let mut from_above = Vec::with_capacity(levels - 1);
        for p in 0..levels - 1 {
            let [_, h_up, w_up] = self.shapes[p + 1];
            let u = self.up[p];
            let (wv, bv) = (bind(g, u.weight), bind(g, u.bias));
            let y = g.conv2d(state.levels[p], wv, Some(bv), 1, 0)?;
            let y = g.relu(y);
            let y = g.maxpool2d(y, 2, 2)?;
            from_below.push(g.fit_spatial(y, h_up, w_up)?);

            let [_, h_dn, w_dn] = self.shapes[p];
            let d = self.down[p];
            let (wv, bv) = (bind(g, d.conv.weight), bind(g, d.conv.bias));
            let y = g.conv2d(state.levels[p + 1], wv, Some(bv), 1, 0)?;
            let y = g.relu(y);
            let kv = bind(g, d.deconv);
            let y = g.deconv2d(y, kv, 2, 0)?;
            from_above.push(g.fit_spatial(y, h_dn, w_dn)?);
        }

        let mut next = Vec::with_capacity(levels);
        for p in 0..levels {
            let mut parts = Vec::with_capacity(3);
            if p > 0 {
                parts.push(from_below[p - 1]);
            }
            parts.push(state.levels[p]);
            if p + 1 < levels {
                parts.push(from_above[p]);
            }
            let cat = g.concat_channels(&parts)?;
            let r = self.reduce[p];
            let (wv, bv) = (bind(g, r.weight), bind(g, r.bias));
            let y = g.conv2d(cat, wv, Some(bv), 1, 0)?;
            next.push(g.relu(y));
        }
        self.check_shapes(g, &next, "roll output")?;
        Ok(PyramidState {
            t: state.t + 1,
            levels: next,
        })
    }
}

/// Channel contract of the detection heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Object classes, not counting background.
    pub num_classes: usize,
    pub anchors_per_cell: usize,
    pub regressors: usize,
    /// 1 or 3.
    pub kernel: usize,
}

impl HeadConfig {
    pub fn class_channels(&self) -> usize {
        self.anchors_per_cell * (self.num_classes + 1)
    }

    pub fn box_channels(&self) -> usize {
        self.anchors_per_cell * self.regressors * 4
    }
}

/// Output convs start small so initial scores sit near uniform.
const HEAD_GAIN: crate::tensor::Real = 0.1;

/// Per-level classification and regression convs, shared by every iteration.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    config: HeadConfig,
    shapes: Vec<[usize; 3]>,
    cls: Vec<ConvParams>,
    reg: Vec<ConvParams>,
}

/// Head maps of one output index. `scores[p]` has `A·(K+1)` channels with
/// anchor-major layout (`a·(K+1) + class`); `offsets[p]` has `A·R·4`
/// channels laid out `(a·R + r)·4 + coordinate`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// 1-based output index; output 1 precedes any roll.
    pub t: usize,
    pub scores: Vec<Var>,
    pub offsets: Vec<Var>,
}

impl DetectionHead {
    pub fn build(shapes: &[[usize; 3]], config: HeadConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        if config.kernel != 1 && config.kernel != 3 {
            return Err(Error::Config(format!("head kernel must be 1 or 3, got {}", config.kernel)));
        }
        if config.num_classes == 0 || config.anchors_per_cell == 0 || config.regressors == 0 {
            return Err(Error::Config("classes, anchors per cell and regressors must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut cls = Vec::with_capacity(shapes.len());
        let mut reg = Vec::with_capacity(shapes.len());
        for (p, s) in shapes.iter().enumerate() {
            let (k, c) = (config.kernel, s[0]);
            cls.push(scaled_conv_params(store, &format!("head{p}.cls"), config.class_channels(), c, k, HEAD_GAIN, &mut rng)?);
            reg.push(scaled_conv_params(store, &format!("head{p}.box"), config.box_channels(), c, k, HEAD_GAIN, &mut rng)?);
        }
        Ok(Self {
            config,
            shapes: shapes.to_vec(),
            cls,
            reg,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, state: &PyramidState, trainable: bool) -> Result<HeadOutput> {
        if state.levels.len() != self.shapes.len() {
            return Err(dim("heads", "levels", self.shapes.len(), state.levels.len()));
        }
        let pad = self.config.kernel / 2;
        let mut scores = Vec::with_capacity(self.shapes.len());
        let mut offsets = Vec::with_capacity(self.shapes.len());
        for (p, &x) in state.levels.iter().enumerate() {
            let c = self.cls[p];
            let (wv, bv) = (g.bind(store, c.weight, trainable), g.bind(store, c.bias, trainable));
            scores.push(g.conv2d(x, wv, Some(bv), 1, pad)?);
            let r = self.reg[p];
            let (wv, bv) = (g.bind(store, r.weight, trainable), g.bind(store, r.bias, trainable));
            offsets.push(g.conv2d(x, wv, Some(bv), 1, pad)?);
        }
        Ok(HeadOutput {
            t: state.t,
            scores,
            offsets,
        })
    }
}

/// Applies the heads to the backbone pyramid and after each of `iterations`
/// rolls, returning `iterations + 1` outputs.
pub fn unroll(
    cell: &RollingCell,
    heads: &DetectionHead,
    g: &mut Graph,
    store: &ParamStore,
    pyramid: &FeaturePyramid,
    iterations: usize,
    trainable: bool,
) -> Result<Vec<HeadOutput>> {
    if iterations == 0 {
        return Err(contract!("at least one rolling iteration is required"));
    }
    let mut state = PyramidState::initial(pyramid);
    let mut outputs = Vec::with_capacity(iterations + 1);
    outputs.push(heads.apply(g, store, &state, trainable)?);
    for _ in 0..iterations {
        state = cell.roll(g, store, &state, trainable)?;
        outputs.push(heads.apply(g, store, &state, trainable)?);
    }
    Ok(outputs)
}
