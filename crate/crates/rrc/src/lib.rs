//! Files, configuration, training driver and reports around `rrc-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod kitti;
pub mod ppm;
pub mod report;
pub mod train;

pub use error::{Error, Result};
pub use rrc_core;

use std::path::PathBuf;

use rrc_core::model::Detector;
use rrc_core::ParamStore;

/// KITTI result text for each image file, using the fused output set and
/// the demo score threshold. Files fail independently.
pub fn detect_files(
    cfg: &config::RunConfig,
    det: &Detector,
    store: &ParamStore,
    files: &[PathBuf],
) -> Vec<Result<String>> {
    let [c, h, w] = cfg.model.backbone.input;
    let decode = rrc_core::detect::DecodeConfig {
        score_threshold: cfg.eval.infer_score_threshold,
        ..cfg.eval.decode
    };
    files
        .iter()
        .map(|f| {
            let image = ppm::read(f)?;
            if image.shape() != [c, h, w] {
                return Err(Error::Format {
                    path: f.clone(),
                    message: format!("image is {:?}, the model expects {:?}", image.shape(), [c, h, w]),
                });
            }
            let batch = image.reshape(&[1, c, h, w])?;
            let dets = det.detect(store, batch, &cfg.eval.select, &decode, cfg.eval.nms_threshold)?;
            Ok(kitti::results_text(&dets[0], &cfg.data.class_names, h, w))
        })
        .collect()
}
