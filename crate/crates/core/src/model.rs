//! The assembled detector and its training step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{AnchorSet, AnchorSpec};
use crate::backbone::{Backbone, BackboneConfig};
use crate::detect::{fuse, DecodeConfig, Detection, OutputMaps};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, GroundTruth, ImageTargets, LossConfig, LossReport};
use crate::params::{ParamStore, SgdConfig};
use crate::rrc::{unroll, DetectionHead, HeadConfig, HeadOutput, RollingCell};
use crate::synth::{hsv_jitter, ssd_augment, AugmentConfig, Sample};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub agg_channels: usize,
    /// Rolling iterations `T`; the model emits `T + 1` outputs.
    pub iterations: usize,
    pub num_classes: usize,
    pub regressors: usize,
    pub head_kernel: usize,
    pub anchor_scales: (Real, Real),
    pub aspect_ratios: Vec<Real>,
    pub match_threshold: Real,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.iterations == 0 || self.regressors == 0 || self.num_classes == 0 || self.agg_channels == 0 {
            return Err(Error::Config(
                "iterations, regressors, classes and aggregation width must be positive".into(),
            ));
        }
        let (lo, hi) = self.anchor_scales;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("anchor scales {lo}..{hi} are not increasing and positive")));
        }
        Ok(())
    }

    pub fn anchor_spec(&self) -> Result<AnchorSpec> {
        let grids: Vec<(usize, usize)> = self.backbone.level_shapes()?.iter().map(|s| (s[1], s[2])).collect();
        Ok(AnchorSpec::linear(self.anchor_scales.0, self.anchor_scales.1, &grids, &self.aspect_ratios))
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            num_classes: self.num_classes,
            anchors_per_cell: self.aspect_ratios.len(),
            regressors: self.regressors,
            kernel: self.head_kernel,
        }
    }

    pub fn outputs(&self) -> usize {
        self.iterations + 1
    }
}

/// `N × 3 × H × W` batch of the samples' images.
pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let items = samples
        .iter()
        .map(|s| {
            let sh = s.image.shape();
            let shape: Vec<usize> = core::iter::once(1).chain(sh.iter().copied()).collect();
            s.image.clone().reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub cell: RollingCell,
    pub heads: DetectionHead,
    pub anchors: AnchorSet,
}

impl Detector {
    pub fn build(config: ModelConfig, seed: u64, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.backbone.level_shapes()?;
        let backbone = Backbone::build(config.backbone.clone(), seed, store)?;
        let cell = RollingCell::build(&shapes, config.agg_channels, seed, store)?;
        let heads = DetectionHead::build(&shapes, config.head_config(), seed, store)?;
        let anchors = AnchorSet::new(config.anchor_spec()?)?;
        Ok(Self {
            config,
            backbone,
            cell,
            heads,
            anchors,
        })
    }

    /// All `T + 1` head outputs for a `N × 3 × H × W` batch with values in
    /// `[0, 1]`; the network sees them centered on zero.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Tensor, trainable: bool) -> Result<Vec<HeadOutput>> {
        let x = g.constant(images.map(|v| v - 0.5));
        let pyramid = self.backbone.forward(g, store, x, trainable)?;
        unroll(&self.cell, &self.heads, g, store, &pyramid, self.config.iterations, trainable)
    }

    /// Detached output maps of a batch, no tape kept.
    pub fn predict(&self, store: &ParamStore, images: Tensor) -> Result<Vec<OutputMaps>> {
        let mut g = Graph::new();
        let outs = self.forward(&mut g, store, images, false)?;
        Ok(outs.iter().map(|o| OutputMaps::from_graph(&g, o)).collect())
    }

    pub fn targets(&self, objects: &[GroundTruth]) -> Result<ImageTargets> {
        ImageTargets::new(&self.anchors, objects, self.config.match_threshold, self.config.regressors)
    }

    /// Fused detections of every image in the batch.
    pub fn detect(
        &self,
        store: &ParamStore,
        images: Tensor,
        select: &[usize],
        decode: &DecodeConfig,
        nms_threshold: Real,
    ) -> Result<Vec<Vec<Detection>>> {
        let maps = self.predict(store, images)?;
        let n = maps.first().map_or(0, OutputMaps::batch);
        (0..n)
            .map(|i| fuse(&maps, select, i, &self.anchors, self.heads.config(), decode, nms_threshold))
            .collect()
    }

    /// Loss report of a batch without building gradients.
    pub fn evaluate_loss(&self, store: &ParamStore, samples: &[Sample], loss: &LossConfig) -> Result<LossReport> {
        let images = stack_images(samples)?;
        let targets = samples.iter().map(|s| self.targets(&s.objects)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let outs = self.forward(&mut g, store, images, false)?;
        total_loss(&mut g, &outs, &self.anchors, self.heads.config(), &targets, loss).map(|r| r.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub sgd: SgdConfig,
    pub decay_every: u64,
    pub decay_factor: Real,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// `lr₀ · factor^⌊step / decay_every⌋`.
    pub fn learning_rate(&self, step: u64) -> Real {
        let k = if self.decay_every == 0 { 0 } else { step / self.decay_every };
        self.sgd.lr * libm::pow(self.decay_factor, k as Real)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.sgd.lr)));
        }
        Ok(())
    }
}

/// The augmented batch of step `step`: a pure function of the seed, the
/// step and the sample source.
pub fn training_batch(
    cfg: &TrainConfig,
    step: u64,
    pool: &[usize],
    source: &dyn Fn(usize) -> Result<Sample>,
) -> Result<Vec<Sample>> {
    if pool.is_empty() {
        return Err(Error::Config("training pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    (0..cfg.batch)
        .map(|_| {
            let raw = source(pool[rng.random_range(0..pool.len())])?;
            let mut s = ssd_augment(&raw, &cfg.augment, &mut rng);
            s.image = hsv_jitter(&s.image, cfg.augment.hsv_factor, &mut rng)?;
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: Real,
    pub report: LossReport,
}

fn breakdown(report: &LossReport) -> String {
    let parts: Vec<String> = report
        .per_output
        .iter()
        .enumerate()
        .map(|(i, o)| format!("out{}: cls {} reg {}", i + 1, o.classification, o.regression))
        .collect();
    parts.join(", ")
}

/// Forward, loss, backward and one SGD update on `batch`.
pub fn train_step(
    detector: &Detector,
    store: &mut ParamStore,
    batch: &[Sample],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepRecord> {
    let images = stack_images(batch)?;
    let targets = batch.iter().map(|s| detector.targets(&s.objects)).collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let outs = detector.forward(&mut g, store, images, true)?;
    let (loss, report) = total_loss(&mut g, &outs, &detector.anchors, detector.heads.config(), &targets, &cfg.loss)?;
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            step,
            breakdown: breakdown(&report),
        });
    }
    let lr = cfg.learning_rate(step);
    if let Some(loss) = loss {
        g.backward(loss, store)?;
    }
    store.sgd_momentum_step(&SgdConfig { lr, ..cfg.sgd });
    Ok(StepRecord { step, lr, report })
}
