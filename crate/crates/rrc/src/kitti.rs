//! KITTI-format label and result files, and on-disk corpora of PPM images
//! with KITTI labels.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rrc_core::boxes::BBox;
use rrc_core::detect::Detection;
use rrc_core::eval::{format_label, format_result, parse_labels, GroundTruthRecord};
use rrc_core::loss::GroundTruth;
use rrc_core::{Real, Tensor};

use crate::error::{io, Error, Result};
use crate::ppm;

fn to_pixels(b: &BBox, h: usize, w: usize) -> BBox {
    BBox {
        x_min: b.x_min * w as Real,
        y_min: b.y_min * h as Real,
        x_max: b.x_max * w as Real,
        y_max: b.y_max * h as Real,
    }
}

fn to_unit(b: &BBox, h: usize, w: usize) -> BBox {
    BBox {
        x_min: b.x_min / w as Real,
        y_min: b.y_min / h as Real,
        x_max: b.x_max / w as Real,
        y_max: b.y_max / h as Real,
    }
}

/// Unit-square groundtruth as pixel-space KITTI records.
pub fn to_records(objects: &[GroundTruth], names: &[String], h: usize, w: usize) -> Vec<GroundTruthRecord> {
    objects
        .iter()
        .map(|o| GroundTruthRecord {
            class: names[o.class].clone(),
            bbox: to_pixels(&o.bbox, h, w),
            truncation: 0.0,
            occlusion: 0,
            ignore: false,
        })
        .collect()
}

/// Records of known classes back in unit coordinates; ignored regions and
/// unknown classes are dropped.
pub fn to_objects(records: &[GroundTruthRecord], names: &[String], h: usize, w: usize) -> Vec<GroundTruth> {
    records
        .iter()
        .filter(|r| !r.ignore)
        .filter_map(|r| {
            let class = names.iter().position(|n| *n == r.class)?;
            Some(GroundTruth {
                bbox: to_unit(&r.bbox, h, w),
                class,
            })
        })
        .collect()
}

pub fn detection_to_pixels(d: &Detection, h: usize, w: usize) -> Detection {
    Detection {
        bbox: to_pixels(&d.bbox, h, w),
        ..*d
    }
}

pub fn results_text(dets: &[Detection], names: &[String], h: usize, w: usize) -> String {
    let mut out = String::new();
    for d in dets {
        let _ = writeln!(out, "{}", format_result(&names[d.class], &to_pixels(&d.bbox, h, w), d.score));
    }
    out
}

pub fn labels_text(records: &[GroundTruthRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", format_label(r));
    }
    out
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    let text = std::fs::read_to_string(path).map_err(io(path))?;
    parse_labels(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One image of an on-disk corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DiskSample {
    pub name: String,
    pub image: Tensor,
    pub records: Vec<GroundTruthRecord>,
}

/// Writes `images/<name>.ppm` and `labels/<name>.txt` under `dir`.
pub fn write_corpus(dir: &Path, samples: &[DiskSample]) -> Result<()> {
    let (images, labels) = (dir.join("images"), dir.join("labels"));
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(io(d))?;
    }
    for s in samples {
        ppm::write(&images.join(format!("{}.ppm", s.name)), &s.image)?;
        let path = labels.join(format!("{}.txt", s.name));
        std::fs::write(&path, labels_text(&s.records)).map_err(io(&path))?;
    }
    Ok(())
}

/// Reads every `images/*.ppm` with its `labels/*.txt`, sorted by name.
pub fn read_corpus(dir: &Path) -> Result<Vec<DiskSample>> {
    let images = dir.join("images");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(io(&images))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let label = dir.join("labels").join(format!("{name}.txt"));
            Ok(DiskSample {
                image: ppm::read(&p)?,
                records: read_labels(&label)?,
                name,
            })
        })
        .collect()
}
