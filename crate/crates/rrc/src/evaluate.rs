//! Validation losses per output and the IoU-swept AP comparison of single
//! outputs against fused output sets.

use std::path::Path;

use rrc_core::detect::{decode_output, nms, Detection, OutputMaps};
use rrc_core::eval::{average_precision, map_sweep, ClassImage, GroundTruthRecord, SweepTable};
use rrc_core::loss::{total_loss, GroundTruth, OutputLoss};
use rrc_core::model::{stack_images, Detector};
use rrc_core::synth::{synth_scene, Sample};
use rrc_core::{Graph, ParamStore, Real, Tensor};

use crate::config::RunConfig;
use crate::error::{io, Result};
use crate::kitti::{detection_to_pixels, to_objects, to_records, DiskSample};
use crate::report::{loss_table_csv, loss_table_text, pr_csv, sweep_csv, sweep_text, SweepRow};

/// One evaluation image: unit-space training targets plus pixel-space
/// records for AP.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
    pub records: Vec<GroundTruthRecord>,
}

pub fn synthetic_validation(cfg: &RunConfig) -> Result<Vec<EvalSample>> {
    let scene = cfg.scene_spec()?;
    let (_, val) = cfg.split()?;
    val.into_iter()
        .map(|i| {
            let s = synth_scene(&scene, i as u64)?;
            Ok(from_sample(cfg, s))
        })
        .collect()
}

pub fn from_sample(cfg: &RunConfig, s: Sample) -> EvalSample {
    let [_, h, w] = cfg.model.backbone.input;
    EvalSample {
        records: to_records(&s.objects, &cfg.data.class_names, h, w),
        objects: s.objects,
        image: s.image,
    }
}

pub fn from_disk(cfg: &RunConfig, samples: Vec<DiskSample>) -> Result<Vec<EvalSample>> {
    let [c, h, w] = cfg.model.backbone.input;
    samples
        .into_iter()
        .map(|d| {
            if d.image.shape() != [c, h, w] {
                return Err(rrc_core::Error::Contract(format!(
                    "image {} is {:?}, the model expects {:?}",
                    d.name,
                    d.image.shape(),
                    [c, h, w]
                ))
                .into());
            }
            Ok(EvalSample {
                objects: to_objects(&d.records, &cfg.data.class_names, h, w),
                records: d.records,
                image: d.image,
            })
        })
        .collect()
}

/// Per-image, per-output NMS-free detections and the batch loss reports.
struct ChunkResult {
    losses: Vec<Vec<OutputLoss>>,
    decoded: Vec<Vec<Vec<Detection>>>,
}

fn run_chunk(cfg: &RunConfig, det: &Detector, store: &ParamStore, chunk: &[EvalSample]) -> Result<ChunkResult> {
    let samples: Vec<Sample> = chunk
        .iter()
        .map(|s| Sample {
            image: s.image.clone(),
            objects: s.objects.clone(),
        })
        .collect();
    let targets = samples.iter().map(|s| det.targets(&s.objects)).collect::<rrc_core::Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let outs = det.forward(&mut g, store, stack_images(&samples)?, false)?;
    let (_, report) = total_loss(&mut g, &outs, &det.anchors, det.heads.config(), &targets, &cfg.train.loss)?;
    let maps: Vec<OutputMaps> = outs.iter().map(|o| OutputMaps::from_graph(&g, o)).collect();
    let decoded = (0..chunk.len())
        .map(|n| {
            maps.iter()
                .map(|m| decode_output(m, n, &det.anchors, det.heads.config(), &cfg.eval.decode))
                .collect::<rrc_core::Result<Vec<_>>>()
        })
        .collect::<rrc_core::Result<Vec<_>>>()?;
    let losses = if report.positives > 0 { vec![report.per_output] } else { Vec::new() };
    Ok(ChunkResult { losses, decoded })
}

/// Worker count from `RRC_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("RRC_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean over validation batches, per output.
    pub losses: Vec<OutputLoss>,
    pub rows: Vec<SweepRow>,
    /// `(row label, class, threshold, curve)` for the headline rows.
    pub curves: Vec<(String, String, Real, rrc_core::eval::PrCurve)>,
}

impl EvalReport {
    pub fn row(&self, label_prefix: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label.starts_with(label_prefix))
    }
}

pub fn select_label(prefix: &str, select: &[usize]) -> String {
    let s: Vec<String> = select.iter().map(|t| t.to_string()).collect();
    format!("{prefix} {{{}}}", s.join(","))
}

/// Evaluates `samples` in `cfg.eval.batch` chunks over `threads` workers;
/// results do not depend on the worker count.
pub fn evaluate(
    cfg: &RunConfig,
    det: &Detector,
    store: &ParamStore,
    samples: &[EvalSample],
    thresholds: &[Real],
    selects: &[(String, Vec<usize>)],
    threads: usize,
) -> Result<EvalReport> {
    let chunks: Vec<&[EvalSample]> = samples.chunks(cfg.eval.batch).collect();
    let per_worker = chunks.len().div_ceil(threads.max(1)).max(1);
    let results: Vec<Result<Vec<ChunkResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_worker)
            .map(|group| s.spawn(move || group.iter().map(|c| run_chunk(cfg, det, store, c)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut batch_losses = Vec::new();
    let mut decoded = Vec::new();
    for group in results {
        for r in group? {
            batch_losses.extend(r.losses);
            decoded.extend(r.decoded);
        }
    }
    let outputs = cfg.model.outputs();
    let losses = (0..outputs)
        .map(|t| {
            let n = batch_losses.len().max(1) as Real;
            OutputLoss {
                classification: batch_losses.iter().map(|b| b[t].classification).sum::<Real>() / n,
                regression: batch_losses.iter().map(|b| b[t].regression).sum::<Real>() / n,
            }
        })
        .collect();

    let [_, h, w] = cfg.model.backbone.input;
    let gts: Vec<Vec<GroundTruthRecord>> = samples.iter().map(|s| s.records.clone()).collect();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (label, select) in selects {
        let dets: Vec<Vec<Detection>> = decoded
            .iter()
            .map(|per_output| {
                let union: Vec<Detection> = select.iter().flat_map(|&t| per_output[t - 1].iter().copied()).collect();
                nms(&union, cfg.eval.nms_threshold)
                    .iter()
                    .map(|d| detection_to_pixels(d, h, w))
                    .collect()
            })
            .collect();
        let table: SweepTable = map_sweep(&dets, &gts, &cfg.data.class_names, thresholds, cfg.eval.ap_mode);
        for (k, class) in cfg.data.class_names.iter().enumerate() {
            let images: Vec<ClassImage> = dets.iter().zip(&gts).map(|(d, g)| ClassImage::select(d, g, k, class)).collect();
            for &t in thresholds {
                if let Some(c) = average_precision(&images, t, cfg.eval.ap_mode) {
                    curves.push((label.clone(), class.clone(), t, c));
                }
            }
        }
        rows.push(SweepRow {
            label: label.clone(),
            select: select.clone(),
            table,
        });
    }
    Ok(EvalReport { losses, rows, curves })
}

/// Baseline, every single output, then RRC* and RRC.
pub fn standard_selects(cfg: &RunConfig, select: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut out = vec![("output 1 (baseline)".to_string(), vec![1])];
    for t in 2..=cfg.model.outputs() {
        out.push((format!("output {t}"), vec![t]));
    }
    out.push((select_label("RRC*", &cfg.eval.star_select), cfg.eval.star_select.clone()));
    out.push((select_label("RRC", select), select.to_vec()));
    out
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let pr = dir.join("pr");
    std::fs::create_dir_all(&pr).map_err(io(&pr))?;
    let put = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(io(&p))
    };
    put(
        "output_losses.txt",
        loss_table_text("Mean validation loss per output", &report.losses),
    )?;
    put("output_losses.csv", loss_table_csv(&report.losses))?;
    put("iou_sweep.txt", sweep_text(&report.rows))?;
    put("iou_sweep.csv", sweep_csv(&report.rows))?;
    for (label, class, t, curve) in &report.curves {
        if label.starts_with("output") && !label.starts_with("output 1 ") {
            continue;
        }
        let slug: String = label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '*' { c } else { '_' })
            .collect::<String>()
            .replace('*', "star");
        let p = pr.join(format!("{slug}_{class}_{t}.csv"));
        std::fs::write(&p, pr_csv(curve)).map_err(io(&p))?;
    }
    Ok(())
}
