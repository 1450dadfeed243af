use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rrc::config::{RawConfig, RunConfig};
use rrc::detect_files;
use rrc::evaluate::{evaluate, from_disk, standard_selects, synthetic_validation, thread_count, write_report};
use rrc::kitti::{read_corpus, to_records, write_corpus, DiskSample};
use rrc::report::{read_log, smoothed_csv, tail_means};
use rrc::train::{load_model, train, CONFIG_FILE};
use rrc::{Error, Result};
use rrc_core::synth::synth_scene;
use rrc_core::Real;

#[derive(Parser)]
#[command(name = "rrc", version, about = "Recurrent rolling convolution detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a config key, `key=value`; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Per-output validation losses and the IoU-swept AP tables.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<Real>>,
        #[arg(long, value_delimiter = ',')]
        select: Option<Vec<usize>>,
        /// Corpus directory with `images/*.ppm` and `labels/*.txt`
        /// instead of the synthetic validation split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Report directory, default `<run.dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write KITTI result files for PPM images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Summaries of a training loss log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        window: usize,
    },
    /// Export synthetic scenes as PPM images with KITTI labels.
    Export {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<(RawConfig, RunConfig)> {
    let mut raw = RawConfig::load(path)?;
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            path: "--set".into(),
            line: 0,
            message: format!("expected key=value, got {o:?}"),
        })?;
        raw.set(k.trim(), v.trim())?;
    }
    let cfg = raw.build()?;
    Ok((raw, cfg))
}

fn write(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// `Ok(false)` when some inputs failed but the command still ran to the end.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            resume,
            overrides,
        } => {
            let (raw, cfg) = load_config(&config, &overrides)?;
            let outputs = cfg.model.outputs();
            let mut window = vec![0.0; outputs];
            let mut count = 0;
            let summary = train(&cfg, &raw, resume.as_deref(), |rec| {
                for (w, o) in window.iter_mut().zip(&rec.report.per_output) {
                    *w += o.total();
                }
                count += 1;
                if (rec.step + 1) % 50 == 0 {
                    let means: Vec<String> = window.iter().map(|v| format!("{:.4}", v / count as Real)).collect();
                    eprintln!("step {:>6} lr {:.2e} loss {}", rec.step + 1, rec.lr, means.join(" "));
                    window.iter_mut().for_each(|w| *w = 0.0);
                    count = 0;
                }
            })?;
            eprintln!("wrote {}", summary.final_checkpoint.display());
        }
        Command::Eval {
            config,
            ckpt,
            thresholds,
            select,
            data,
            out,
        } => {
            let (raw, cfg) = load_config(&config, &[])?;
            let (det, store, step) = load_model(&cfg, &raw, &ckpt)?;
            let samples = match &data {
                Some(dir) => from_disk(&cfg, read_corpus(dir)?)?,
                None => synthetic_validation(&cfg)?,
            };
            let thresholds = thresholds.unwrap_or_else(|| cfg.eval.thresholds.clone());
            let select = select.unwrap_or_else(|| cfg.eval.select.clone());
            if select.is_empty() || select.iter().any(|&t| t == 0 || t > cfg.model.outputs()) {
                return Err(rrc_core::Error::Contract(format!("--select must lie in 1..={}", cfg.model.outputs())).into());
            }
            let selects = standard_selects(&cfg, &select);
            let report = evaluate(&cfg, &det, &store, &samples, &thresholds, &selects, thread_count())?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("eval"));
            write_report(&dir, &report)?;
            eprintln!("evaluated step {step} on {} images into {}", samples.len(), dir.display());
            print!("{}", std::fs::read_to_string(dir.join("output_losses.txt")).unwrap_or_default());
            print!("\n{}", std::fs::read_to_string(dir.join("iou_sweep.txt")).unwrap_or_default());
        }
        Command::Infer {
            ckpt,
            out,
            config,
            files,
        } => {
            let config = config.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE));
            let (raw, cfg) = load_config(&config, &[])?;
            let (det, store, _) = load_model(&cfg, &raw, &ckpt)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            let mut failures = 0;
            for (file, result) in files.iter().zip(detect_files(&cfg, &det, &store, &files)) {
                match result {
                    Ok(text) => {
                        let stem = file.file_stem().unwrap_or_default().to_string_lossy();
                        write(&out.join(format!("{stem}.txt")), text)?;
                    }
                    Err(e) => {
                        failures += 1;
                        eprintln!("{}: {e}", file.display());
                    }
                }
            }
            if failures > 0 {
                eprintln!("{failures} of {} images failed", files.len());
                return Ok(false);
            }
        }
        Command::Report { log, out, window } => {
            let rows = read_log(&log)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            let means = tail_means(&rows, window);
            let mut text = format!("Mean training loss per output over the last {} steps\n", window.min(rows.len()));
            for (i, m) in means.iter().enumerate() {
                text.push_str(&format!("output {:<3} {m:.4}\n", i + 1));
            }
            write(&out.join("loss_summary.txt"), text)?;
            write(&out.join("loss_curve.csv"), smoothed_csv(&rows, 50))?;
        }
        Command::Export {
            config,
            out,
            split,
            limit,
        } => {
            let (_, cfg) = load_config(&config, &[])?;
            let scene = cfg.scene_spec()?;
            let (train_idx, val_idx) = cfg.split()?;
            let idx = match split.as_str() {
                "train" => train_idx,
                "val" => val_idx,
                other => {
                    return Err(rrc_core::Error::Config(format!("--split must be train or val, got {other:?}")).into())
                }
            };
            let [_, h, w] = cfg.model.backbone.input;
            let samples = idx
                .into_iter()
                .take(limit.unwrap_or(usize::MAX))
                .map(|i| {
                    let s = synth_scene(&scene, i as u64)?;
                    Ok(DiskSample {
                        name: format!("{i:06}"),
                        records: to_records(&s.objects, &cfg.data.class_names, h, w),
                        image: s.image,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_corpus(&out, &samples)?;
            eprintln!("exported {} scenes to {}", samples.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
