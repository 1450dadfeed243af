//! Flat `key=value` run configuration.
//!
//! Keys carry dotted section prefixes (`optimizer.lr=0.0005`). Blank lines
//! and lines starting with `#` are ignored; unknown or repeated keys are
//! errors and every key has a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rrc_core::anchors::BinSelector;
use rrc_core::backbone::{BackboneConfig, StageSpec};
use rrc_core::detect::DecodeConfig;
use rrc_core::eval::ApMode;
use rrc_core::loss::LossConfig;
use rrc_core::model::{ModelConfig, TrainConfig};
use rrc_core::synth::{AugmentConfig, ClassStyle, SceneSpec, Shape};
use rrc_core::{PoolMode, Real, SgdConfig};
use sha2::{Digest, Sha256};

use crate::error::{io, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub size: usize,
    pub val_fraction: Real,
    pub split_seed: u64,
    pub count: (usize, usize),
    pub scale: (Real, Real),
    pub max_overlap: Real,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub select: Vec<usize>,
    pub star_select: Vec<usize>,
    pub thresholds: Vec<Real>,
    pub decode: DecodeConfig,
    pub nms_threshold: Real,
    pub ap_mode: ApMode,
    pub infer_score_threshold: Real,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub out_dir: String,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

const KEYS: &[(&str, &str)] = &[
    ("run.dir", "runs/desk"),
    ("run.seed", "1"),
    ("model.input", "3,64,64"),
    ("model.stage_widths", "16,32,48,64,64"),
    ("model.stage_convs", "2"),
    ("model.pool", "floor"),
    ("model.taps", "1,2,3,4"),
    ("model.channels", "32"),
    ("model.agg_channels", "8"),
    ("model.iterations", "5"),
    ("model.classes", "3"),
    ("model.regressors", "3"),
    ("model.head_kernel", "3"),
    ("model.anchor_scales", "0.12,0.5"),
    ("model.aspect_ratios", "1,2,0.5"),
    ("model.match_threshold", "0.5"),
    ("loss.neg_ratio", "3"),
    ("optimizer.lr", "0.003"),
    ("optimizer.momentum", "0.9"),
    ("optimizer.weight_decay", "0.0005"),
    ("optimizer.decay_every", "3000"),
    ("optimizer.decay_factor", "0.1"),
    ("train.batch", "8"),
    ("train.steps", "6000"),
    ("train.checkpoint_every", "1000"),
    ("augment.flip", "0.5"),
    ("augment.crop_scale", "0.3,1"),
    ("augment.crop_aspect", "0.5,2"),
    ("augment.max_trials", "50"),
    ("augment.hsv_factor", "1.3"),
    ("data.seed", "11"),
    ("data.size", "2500"),
    ("data.val_fraction", "0.2"),
    ("data.split_seed", "5"),
    ("data.count", "1,5"),
    ("data.scale", "0.12,0.5"),
    ("data.max_overlap", "0.3"),
    ("data.class_names", "RedBox,GreenDisc,BlueBox"),
    ("eval.select", "3,4,5"),
    ("eval.star_select", "2,3,4,5,6"),
    ("eval.thresholds", "0.6,0.65,0.7,0.75,0.8"),
    ("eval.score_threshold", "0.01"),
    ("eval.selector", "self_consistent"),
    ("eval.nms_threshold", "0.45"),
    ("eval.ap_mode", "recall40"),
    ("eval.batch", "8"),
    ("infer.score_threshold", "0.3"),
];

/// Raw key/value pairs with every default filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    origin: String,
}

impl RawConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            origin: "<defaults>".into(),
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::defaults();
        cfg.origin = origin.to_string();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config {
                path: origin.to_string(),
                line,
                message,
            };
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found {trimmed:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !cfg.values.contains_key(key) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(err(format!("{key:?} already set on line {first}")));
            }
            cfg.values.insert(key.to_string(), value.to_string());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(self.error(key, "unknown key".into()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    /// Canonical text: every key, sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Hash of the `model.*` keys; checkpoints refuse to load across
    /// architectures.
    pub fn model_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.starts_with("model.")) {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn error(&self, key: &str, message: String) -> Error {
        Error::Config {
            path: self.origin.clone(),
            line: 0,
            message: format!("{key}: {message}"),
        }
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, text: &str) -> Result<T> {
        text.trim()
            .parse()
            .map_err(|_| self.error(key, format!("cannot parse {text:?}")))
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.parse_as(key, self.get(key))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        if v.trim().is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|s| self.parse_as(key, s)).collect()
    }

    fn pair<T: std::str::FromStr + Copy>(&self, key: &str) -> Result<(T, T)> {
        match self.list::<T>(key)?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(self.error(key, "expected two comma-separated values".into())),
        }
    }

    pub fn build(&self) -> Result<RunConfig> {
        let input: Vec<usize> = self.list("model.input")?;
        let input: [usize; 3] = input
            .try_into()
            .map_err(|_| self.error("model.input", "expected channels,height,width".into()))?;
        let pool = match self.get("model.pool") {
            "floor" => Some(PoolMode::Floor),
            "ceil" => Some(PoolMode::Ceil),
            "none" => None,
            other => return Err(self.error("model.pool", format!("expected floor, ceil or none, got {other:?}"))),
        };
        let convs: usize = self.scalar("model.stage_convs")?;
        let stages = self
            .list::<usize>("model.stage_widths")?
            .into_iter()
            .map(|c| StageSpec {
                pool,
                ..StageSpec::new(convs, c)
            })
            .collect();
        let model = ModelConfig {
            backbone: BackboneConfig {
                input,
                stages,
                taps: self.list("model.taps")?,
                common_channels: self.scalar("model.channels")?,
            },
            agg_channels: self.scalar("model.agg_channels")?,
            iterations: self.scalar("model.iterations")?,
            num_classes: self.scalar("model.classes")?,
            regressors: self.scalar("model.regressors")?,
            head_kernel: self.scalar("model.head_kernel")?,
            anchor_scales: self.pair("model.anchor_scales")?,
            aspect_ratios: self.list("model.aspect_ratios")?,
            match_threshold: self.scalar("model.match_threshold")?,
        };
        model.validate()?;
        let train = TrainConfig {
            batch: self.scalar("train.batch")?,
            steps: self.scalar("train.steps")?,
            sgd: SgdConfig {
                lr: self.scalar("optimizer.lr")?,
                momentum: self.scalar("optimizer.momentum")?,
                weight_decay: self.scalar("optimizer.weight_decay")?,
            },
            decay_every: self.scalar("optimizer.decay_every")?,
            decay_factor: self.scalar("optimizer.decay_factor")?,
            augment: AugmentConfig {
                flip_probability: self.scalar("augment.flip")?,
                crop_scale: self.pair("augment.crop_scale")?,
                crop_aspect: self.pair("augment.crop_aspect")?,
                max_trials: self.scalar("augment.max_trials")?,
                hsv_factor: self.scalar("augment.hsv_factor")?,
            },
            loss: LossConfig {
                neg_ratio: self.scalar("loss.neg_ratio")?,
            },
            seed: self.scalar("run.seed")?,
        };
        train.validate()?;
        let data = DataConfig {
            seed: self.scalar("data.seed")?,
            size: self.scalar("data.size")?,
            val_fraction: self.scalar("data.val_fraction")?,
            split_seed: self.scalar("data.split_seed")?,
            count: self.pair("data.count")?,
            scale: self.pair("data.scale")?,
            max_overlap: self.scalar("data.max_overlap")?,
            class_names: self.get("data.class_names").split(',').map(|s| s.trim().to_string()).collect(),
        };
        if data.class_names.len() != model.num_classes {
            return Err(self.error(
                "data.class_names",
                format!("{} names for {} classes", data.class_names.len(), model.num_classes),
            ));
        }
        let selector = match self.get("eval.selector") {
            "self_consistent" => BinSelector::SelfConsistent,
            "anchor_scale" => BinSelector::AnchorScale,
            other => return Err(self.error("eval.selector", format!("unknown selector {other:?}"))),
        };
        let ap_mode = match self.get("eval.ap_mode") {
            "recall40" => ApMode::Recall40,
            "envelope" => ApMode::Envelope,
            other => return Err(self.error("eval.ap_mode", format!("unknown mode {other:?}"))),
        };
        let eval = EvalConfig {
            select: self.list("eval.select")?,
            star_select: self.list("eval.star_select")?,
            thresholds: self.list("eval.thresholds")?,
            decode: DecodeConfig {
                score_threshold: self.scalar("eval.score_threshold")?,
                selector,
            },
            nms_threshold: self.scalar("eval.nms_threshold")?,
            ap_mode,
            infer_score_threshold: self.scalar("infer.score_threshold")?,
            batch: self.scalar("eval.batch")?,
        };
        for key in ["eval.select", "eval.star_select"] {
            let sel: Vec<usize> = self.list(key)?;
            if sel.is_empty() || sel.iter().any(|&t| t == 0 || t > model.outputs()) {
                return Err(self.error(key, format!("outputs must lie in 1..={}", model.outputs())));
            }
        }
        if eval.batch == 0 {
            return Err(self.error("eval.batch", "must be positive".into()));
        }
        Ok(RunConfig {
            model,
            train,
            checkpoint_every: self.scalar("train.checkpoint_every")?,
            out_dir: self.get("run.dir").to_string(),
            data,
            eval,
        })
    }
}

/// Distinct colors and shapes for up to six classes.
const PALETTE: [ClassStyle; 6] = [
    ClassStyle { color: [0.85, 0.2, 0.15], shape: Shape::Rectangle },
    ClassStyle { color: [0.2, 0.75, 0.25], shape: Shape::Ellipse },
    ClassStyle { color: [0.2, 0.3, 0.9], shape: Shape::Rectangle },
    ClassStyle { color: [0.9, 0.85, 0.2], shape: Shape::Ellipse },
    ClassStyle { color: [0.8, 0.3, 0.8], shape: Shape::Rectangle },
    ClassStyle { color: [0.95, 0.95, 0.95], shape: Shape::Ellipse },
];

impl RunConfig {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let [_, h, w] = self.model.backbone.input;
        if self.model.num_classes > PALETTE.len() {
            return Err(Error::Core(rrc_core::Error::Config(format!(
                "the scene generator draws at most {} classes",
                PALETTE.len()
            ))));
        }
        let spec = SceneSpec {
            seed: self.data.seed,
            height: h,
            width: w,
            count: self.data.count,
            scale: self.data.scale,
            max_overlap: self.data.max_overlap,
            palette: PALETTE[..self.model.num_classes].to_vec(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `(train, val)` scene indices.
    pub fn split(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        Ok(rrc_core::synth::split(self.data.size, self.data.val_fraction, self.data.split_seed)?)
    }
}
