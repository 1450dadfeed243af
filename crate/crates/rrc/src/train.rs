//! Training driver: schedule, loss log and periodic checkpoints.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rrc_core::model::{train_step, training_batch, Detector, StepRecord};
use rrc_core::synth::{synth_scene, Sample};
use rrc_core::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::{RawConfig, RunConfig};
use crate::error::{io, Result};
use crate::report::{log_header, log_line, read_log, LogRow};

pub const LOG_FILE: &str = "loss_log.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.ckpt")
}

/// Builds the model and its parameters from the config seed.
pub fn build_model(cfg: &RunConfig) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let det = Detector::build(cfg.model.clone(), cfg.train.seed, &mut store)?;
    Ok((det, store))
}

/// Model with a checkpoint's parameters loaded.
pub fn load_model(cfg: &RunConfig, raw: &RawConfig, ckpt: &Path) -> Result<(Detector, ParamStore, u64)> {
    let (det, mut store) = build_model(cfg)?;
    let c = Checkpoint::load(ckpt)?;
    c.restore(&mut store, raw.model_hash())?;
    Ok((det, store, c.step))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub steps: u64,
    pub final_checkpoint: PathBuf,
}

/// Runs the configured schedule into `cfg.out_dir`, optionally resuming from
/// a checkpoint. Batches depend only on the seed and the step, so a resumed
/// run logs exactly what an uninterrupted one would.
pub fn train(
    cfg: &RunConfig,
    raw: &RawConfig,
    resume: Option<&Path>,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainSummary> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(io(&dir))?;
    let cfg_path = dir.join(CONFIG_FILE);
    std::fs::write(&cfg_path, raw.to_text()).map_err(io(&cfg_path))?;

    let (det, mut store) = build_model(cfg)?;
    let hash = raw.model_hash();
    let log_path = dir.join(LOG_FILE);
    let mut start = 0;
    let mut kept: Vec<LogRow> = Vec::new();
    if let Some(path) = resume {
        let c = Checkpoint::load(path)?;
        c.restore(&mut store, hash)?;
        start = c.step;
        if log_path.exists() {
            kept = read_log(&log_path)?.into_iter().filter(|r| r.step < start).collect();
        }
    }
    let mut log = String::new();
    log.push_str(&log_header(cfg.model.outputs()));
    log.push('\n');
    for r in &kept {
        log.push_str(&log_line(r));
        log.push('\n');
    }
    std::fs::write(&log_path, log).map_err(io(&log_path))?;
    let mut log_file = OpenOptions::new().append(true).open(&log_path).map_err(io(&log_path))?;

    let scene = cfg.scene_spec()?;
    let (train_idx, _) = cfg.split()?;
    let source = |i: usize| -> rrc_core::Result<Sample> { synth_scene(&scene, i as u64) };
    for step in start..cfg.train.steps {
        let batch = training_batch(&cfg.train, step, &train_idx, &source)?;
        let rec = train_step(&det, &mut store, &batch, &cfg.train, step)?;
        let row = LogRow {
            step,
            lr: rec.lr,
            outputs: rec.report.per_output.iter().map(|o| o.total()).collect(),
            total: rec.report.total,
        };
        writeln!(log_file, "{}", log_line(&row)).map_err(io(&log_path))?;
        progress(&rec);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train.steps {
            Checkpoint::capture(&store, hash, done).save(&dir.join(checkpoint_name(done)))?;
        }
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    Checkpoint::capture(&store, hash, cfg.train.steps.max(start)).save(&final_checkpoint)?;
    Ok(TrainSummary {
        dir,
        steps: cfg.train.steps,
        final_checkpoint,
    })
}
