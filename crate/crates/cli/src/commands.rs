//! The train, infer, eval, visualize and make-fixture commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::RgbImage;
use lane3d::data::tusimple::parse_record;
use lane3d::data::{generate_fixture, label_files, load_clip_frames, make_clip_tensor, read_annotations, ClipAnnotation, FixtureSpec};
use lane3d::losses::LOSS_LOG_HEADER;
use lane3d::metrics::{compare_experiments, evaluate, scaled_x_tol, TUSIMPLE_PIXEL_THRESH};
use lane3d::network::checkpoint::{load_matching, restore_into, save_checkpoint};
use lane3d::network::Model;
use lane3d::optim::Adam;
use lane3d::train::{augment_seed, load_training_set, predict_clip, stack_batch, train_step, PreparedClip};
use lane3d::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::RunConfig;
use crate::draw::{overlay_lanes, parse_loss_log, plot_loss_curves, side_by_side};
use crate::CliError;

pub const LOSS_LOG: &str = "loss_log.tsv";
pub const CHECKPOINT: &str = "checkpoint.l3d";
pub const PREDICTIONS: &str = "predictions.json";
pub const INFER_LOG: &str = "infer_log.tsv";
pub const REPORT_TSV: &str = "report.tsv";
pub const REPORT_JSON: &str = "report.json";
pub const PREDICTION_OVERLAY: &str = "prediction_overlay.png";
pub const LABEL_OVERLAY: &str = "label_overlay.png";
pub const SIDE_BY_SIDE: &str = "side_by_side.png";
pub const LOSS_CURVE: &str = "loss_curve.png";

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn prepare_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    cfg.write_to(&cfg.out)?;
    Ok(())
}

fn checkpoint_meta(cfg: &RunConfig, steps: usize, epochs: usize) -> serde_json::Value {
    json!({ "preset": cfg.preset.name(), "seed": cfg.seed, "steps": steps, "epochs": epochs })
}

/// Epoch order of the training clips, fixed by the seed.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains from the seeded initialization. Every dataset and configuration
/// error surfaces before the first step; an epoch budget of 0 writes the
/// initialized checkpoint only.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    let root = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| CliError::usage("train needs a dataset (--dataset or `dataset = ...`)"))?;
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
    let clips = load_training_set(root, &model)?;
    if clips.is_empty() {
        return Err(CliError::data(format!("{}: no annotated clips", root.display())));
    }
    let mut adam = Adam::new(&store, cfg.adam)?;
    prepare_out(cfg)?;
    let log_path = cfg.out.join(LOSS_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{LOSS_LOG_HEADER}").map_err(io_err(&log_path))?;

    let mut step = 0usize;
    let (mut first, mut last) = (None, None);
    for epoch in 0..cfg.epochs {
        for batch in epoch_order(clips.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let augmented: Vec<PreparedClip>;
            let members: Vec<&PreparedClip> = if cfg.augment {
                augmented = batch
                    .iter()
                    .map(|&i| {
                        let aug = lane3d::data::AugmentConfig {
                            seed: augment_seed(cfg.seed, step, i),
                            ..cfg.aug.clone()
                        };
                        clips[i].augmented(&model, &aug)
                    })
                    .collect::<Result<_, _>>()?;
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &clips[i]).collect()
            };
            let (x, targets) = stack_batch(&members)?;
            step += 1;
            let dropout_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step as u64);
            let b = train_step(&model, &mut store, &mut adam, &x, &targets, &cfg.loss, dropout_seed)?;
            writeln!(log, "{}", b.log_line(step)).map_err(io_err(&log_path))?;
            first.get_or_insert(b.total);
            last = Some(b.total);
        }
        log.flush().map_err(io_err(&log_path))?;
        eprintln!("epoch {}/{} step {step} total {:.6}", epoch + 1, cfg.epochs, last.unwrap_or(f64::NAN));
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.epochs {
            let p = cfg.out.join(format!("checkpoint_epoch{done:04}.l3d"));
            save_checkpoint(&p, &cfg.model, &store, checkpoint_meta(cfg, step, done))?;
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let checkpoint = cfg.out.join(CHECKPOINT);
    save_checkpoint(&checkpoint, &cfg.model, &store, checkpoint_meta(cfg, step, cfg.epochs))?;
    Ok(TrainSummary {
        steps: step,
        first_loss: first,
        last_loss: last,
        checkpoint,
    })
}

/// TuSimple sample rows (160..=710 every 10 px at 720 high) scaled to `height`.
pub fn default_h_samples(height: usize) -> Vec<f64> {
    (160..=710).step_by(10).map(|y| y as f64 * height as f64 / 720.0).collect()
}

/// One clip to run: its last-frame path and optional sample rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InferItem {
    pub raw_file: String,
    pub h_samples: Option<Vec<f64>>,
}

/// Reads an input list: each non-empty line is either a TuSimple label record
/// (its rows are reused) or a bare frame path.
pub fn read_input_list(path: &Path) -> Result<Vec<InferItem>, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("missing file {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let ann = parse_record(line, i + 1)?;
            items.push(InferItem {
                raw_file: ann.raw_file,
                h_samples: Some(ann.h_samples),
            });
        } else {
            items.push(InferItem {
                raw_file: line.to_string(),
                h_samples: None,
            });
        }
    }
    Ok(items)
}

fn data_root(cfg: &RunConfig, fallback: &Path) -> PathBuf {
    cfg.dataset.clone().unwrap_or_else(|| {
        let parent = if fallback.is_dir() { Some(fallback) } else { fallback.parent() };
        parent.map(Path::to_path_buf).unwrap_or_default()
    })
}

/// Loads a checkpoint whose architecture equals the configured one.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, ParamStore<f32>), CliError> {
    let (_, loaded) = load_matching(checkpoint, &cfg.model)?;
    let (model, mut store) = Model::new(cfg.model.clone(), cfg.seed)?;
    restore_into(&mut store, &loaded)?;
    Ok((model, store))
}

/// Writes one prediction line per input clip. Frames are read relative to the
/// dataset root, or the input list's directory when none is configured.
pub fn infer(cfg: &RunConfig, checkpoint: &Path, input: &Path) -> Result<Vec<ClipAnnotation>, CliError> {
    let (model, store) = load_model(cfg, checkpoint)?;
    let items = read_input_list(input)?;
    let root = data_root(cfg, input);
    prepare_out(cfg)?;
    let enc = &cfg.model.encoder;
    let mut preds = Vec::with_capacity(items.len());
    let mut lines = String::new();
    let mut log = String::from("raw_file\tlanes\n");
    for item in &items {
        let frames = load_clip_frames(&root, &item.raw_file, enc.temporal_depth)?;
        let size = (frames[0].width() as usize, frames[0].height() as usize);
        let clip = make_clip_tensor(&frames, enc.temporal_depth, enc.input_resolution)?;
        let rows = item.h_samples.clone().unwrap_or_else(|| default_h_samples(size.1));
        let start = Instant::now();
        let pred = predict_clip(&model, &store, &clip, size, &rows, &item.raw_file, &cfg.post)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        eprintln!("{}: {} lanes in {ms:.1} ms", item.raw_file, pred.lanes.len());
        lines.push_str(&pred.to_prediction_line(if cfg.record_runtime { ms } else { 0.0 }));
        lines.push('\n');
        log.push_str(&format!("{}\t{}\n", item.raw_file, pred.lanes.len()));
        preds.push(pred);
    }
    let p = cfg.out.join(PREDICTIONS);
    fs::write(&p, lines).map_err(io_err(&p))?;
    let p = cfg.out.join(INFER_LOG);
    fs::write(&p, log).map_err(io_err(&p))?;
    eprintln!("{} clips -> {}", items.len(), cfg.out.join(PREDICTIONS).display());
    Ok(preds)
}

/// Label records from a file or from every `*.json` file of a directory.
pub fn read_labels(path: &Path) -> Result<Vec<ClipAnnotation>, CliError> {
    if path.is_dir() {
        let mut out = Vec::new();
        for f in label_files(path)? {
            out.extend(read_annotations(&f)?);
        }
        Ok(out)
    } else {
        Ok(read_annotations(path)?)
    }
}

/// Tolerance in frame pixels: the configured value, or 20 px at 1280 wide
/// scaled to the first labelled frame found on disk.
pub fn resolve_x_tol(cfg: &RunConfig, labels: &Path, gts: &[ClipAnnotation]) -> f64 {
    if let Some(t) = cfg.x_tol {
        return t;
    }
    let root = data_root(cfg, labels);
    for gt in gts {
        if let Ok((w, _)) = image::image_dimensions(root.join(&gt.raw_file)) {
            return scaled_x_tol(w as usize);
        }
    }
    eprintln!("no labelled frame found under {}; using {TUSIMPLE_PIXEL_THRESH} px", root.display());
    TUSIMPLE_PIXEL_THRESH
}

/// Scores predictions against labels and writes the comparison table (local
/// row plus the published reference rows) and a JSON summary.
pub fn eval(cfg: &RunConfig, predictions: &Path, labels: &Path) -> Result<lane3d::metrics::MetricReport, CliError> {
    let preds = read_annotations(predictions)?;
    let gts = read_labels(labels)?;
    let x_tol = resolve_x_tol(cfg, labels, &gts);
    let mut report = evaluate(&preds, &gts, x_tol)?;
    report.label = cfg.preset.name().to_string();
    prepare_out(cfg)?;
    let table = compare_experiments(std::slice::from_ref(&report), true);
    let rendered = table.render();
    let p = cfg.out.join(REPORT_TSV);
    fs::write(&p, &rendered).map_err(io_err(&p))?;
    let summary = json!({ "x_tol": x_tol, "report": report, "table": table });
    let p = cfg.out.join(REPORT_JSON);
    fs::write(&p, serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").map_err(io_err(&p))?;
    print!("{rendered}");
    let c = &report.counts;
    println!("counts\ttp={}\tfp={}\tfn={}\ttn={}\tx_tol={x_tol}", c.tp, c.fp, c.fn_, c.tn);
    Ok(report)
}

/// The record whose `raw_file` is a suffix of `image`, or the only record.
pub fn find_record<'a>(records: &'a [ClipAnnotation], image: &Path) -> Option<&'a ClipAnnotation> {
    records
        .iter()
        .find(|r| image.ends_with(&r.raw_file))
        .or_else(|| (records.len() == 1).then(|| &records[0]))
}

fn load_rgb(path: &Path) -> Result<RgbImage, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("missing file {}", path.display())));
    }
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| CliError::data(format!("image {}: {e}", path.display())))
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Default)]
pub struct VisualizeInputs {
    pub image: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Writes overlays for an image and/or a loss-curve plot; returns the files written.
pub fn visualize(cfg: &RunConfig, inputs: &VisualizeInputs) -> Result<Vec<PathBuf>, CliError> {
    if inputs.image.is_none() && inputs.log.is_none() {
        return Err(CliError::usage("visualize needs --image or --log"));
    }
    let mut jobs: Vec<(PathBuf, RgbImage)> = Vec::new();
    if let Some(image) = &inputs.image {
        if inputs.predictions.is_none() && inputs.labels.is_none() {
            return Err(CliError::usage("--image needs --predictions and/or --labels"));
        }
        let img = load_rgb(image)?;
        let size = img.dimensions();
        let overlay = |records: &Path| -> Result<RgbImage, CliError> {
            let all = read_annotations(records)?;
            let rec = find_record(&all, image).ok_or_else(|| {
                CliError::data(format!("{}: no record for {}", records.display(), image.display()))
            })?;
            Ok(overlay_lanes(&img, rec, size))
        };
        let pred = inputs.predictions.as_deref().map(overlay).transpose()?;
        let gt = inputs.labels.as_deref().map(overlay).transpose()?;
        if let (Some(g), Some(p)) = (&gt, &pred) {
            jobs.push((cfg.out.join(SIDE_BY_SIDE), side_by_side(g, p)));
        }
        if let Some(p) = pred {
            jobs.push((cfg.out.join(PREDICTION_OVERLAY), p));
        }
        if let Some(g) = gt {
            jobs.push((cfg.out.join(LABEL_OVERLAY), g));
        }
    }
    if let Some(log) = &inputs.log {
        if !log.exists() {
            return Err(CliError::data(format!("missing file {}", log.display())));
        }
        let text = fs::read_to_string(log).map_err(io_err(log))?;
        let series = parse_loss_log(&text).map_err(|m| CliError::data(format!("{}: {m}", log.display())))?;
        jobs.push((cfg.out.join(LOSS_CURVE), plot_loss_curves(&series, 800, 400)));
    }
    prepare_out(cfg)?;
    let mut written = Vec::new();
    for (path, img) in jobs {
        save_png(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn make_fixture(out: &Path, spec: &FixtureSpec) -> Result<Vec<ClipAnnotation>, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    Ok(generate_fixture(out, spec)?)
}
