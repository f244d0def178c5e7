//! File-level runs: training, evaluation, prediction dumps, overlays and
//! ablation sweeps.
//!
//! A training run writing `m.slv1` also writes
//!
//! ```text
//! m.slv1.json      resolved run config (read back by `Model::load`)
//! m.slv1.log.csv   step,lr,loss
//! m.slv1.run.json  config plus the dataset path and digest
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{FusionStrategy, RunConfig};
use crate::data::pgm::{decode_masks, encode_masks, encode_ppm};
use crate::data::{dataset_digest, Dataset, Split, VideoSample};
use crate::error::{Result, SlvError};
use crate::metrics::{boundary, evaluate, fmt, MetricsReport, Predictor};
use crate::model::{Model, SampleFeatures};
use crate::train::{StepRecord, Trainer};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn log_path(ckpt: &Path) -> PathBuf {
    sibling(ckpt, ".log.csv")
}

pub fn run_meta_path(ckpt: &Path) -> PathBuf {
    sibling(ckpt, ".run.json")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SlvError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| SlvError::io(path, e))
}

fn check_data_geometry(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let g = &ds.manifest().config;
    let d = &cfg.data;
    if (g.height, g.width, g.audio_bins) != (d.height, d.width, d.audio_bins) {
        return Err(SlvError::Config(format!(
            "dataset is {}x{} with {} audio bins but the config expects {}x{} with {}",
            g.height, g.width, g.audio_bins, d.height, d.width, d.audio_bins
        )));
    }
    Ok(())
}

/// Frozen-module features of every sample, in input order.
pub fn features(model: &Model, samples: &[VideoSample]) -> Result<Vec<SampleFeatures>> {
    samples.par_iter().map(|s| model.features(s)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Save and stop once this many optimizer steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a RunConfig,
    dataset: String,
    dataset_digest: String,
    steps_done: usize,
}

/// Trains on the `train` split and writes the checkpoint plus its sidecars.
pub fn train_run(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let ds = Dataset::open(data)?;
    check_data_geometry(cfg, &ds)?;
    let mut trainer = match &opts.resume {
        Some(path) => {
            let t = Trainer::load(path)?;
            if &t.model.config != cfg {
                return Err(SlvError::Config(format!(
                    "config differs from the one stored with {}",
                    path.display()
                )));
            }
            info!("resuming from {} at step {}", path.display(), t.step());
            t
        }
        None => Trainer::new(Model::init(cfg.clone())?),
    };
    let samples = ds.load_split(Split::Train)?;
    if samples.is_empty() {
        return Err(SlvError::Input(format!("{} has no training samples", data.display())));
    }
    let feats = features(&trainer.model, &samples)?;
    info!("training on {} samples", feats.len());

    let stop = opts
        .stop_after
        .unwrap_or(cfg.train.total_steps)
        .min(cfg.train.total_steps);
    let mut log = Vec::new();
    while trainer.step() < stop {
        let rec = trainer.train_step(&feats)?;
        if rec.step % 25 == 0 || rec.step == stop {
            info!("step {} lr {:.3e} loss {:.5}", rec.step, rec.lr, rec.loss);
        }
        log.push(rec);
    }

    trainer.save(out)?;
    let mut csv = String::from("step,lr,loss\n");
    for r in &log {
        csv.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
    }
    write_file(&log_path(out), csv.as_bytes())?;
    let meta = RunMeta {
        config: cfg,
        dataset: data.display().to_string(),
        dataset_digest: dataset_digest(data)?,
        steps_done: trainer.step(),
    };
    write_file(
        &run_meta_path(out),
        serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes(),
    )?;
    Ok(log)
}

/// Full-video inference with a trained model.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, sample: &VideoSample) -> Result<Vec<Vec<u8>>> {
        let feats = self.model.features(sample)?;
        Ok(self.model.predict(&feats)?.iter().map(|p| p.mask()).collect())
    }
}

pub const PREDICTIONS_VERSION: &str = "slv-predictions-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Relative to the predictions directory.
    pub masks: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsManifest {
    pub version: String,
    pub samples: Vec<PredictionRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub json: Option<PathBuf>,
    pub dump_masks: Option<PathBuf>,
}

/// Writes `DIR/<id>/pred.pgm` per sample and `DIR/predictions.json`.
pub fn dump_predictions(predictor: &dyn Predictor, samples: &[VideoSample], dir: &Path) -> Result<PredictionsManifest> {
    let records = samples
        .par_iter()
        .map(|s| {
            let masks = predictor.predict(s)?;
            let flat: Vec<u8> = masks.concat();
            let rel = format!("{}/pred.pgm", s.id);
            write_file(&dir.join(&rel), &encode_masks(&flat, s.num_frames, s.height, s.width))?;
            Ok(PredictionRecord {
                id: s.id.clone(),
                frames: s.num_frames,
                height: s.height,
                width: s.width,
                masks: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = PredictionsManifest {
        version: PREDICTIONS_VERSION.into(),
        samples: records,
    };
    write_file(
        &dir.join("predictions.json"),
        serde_json::to_string_pretty(&manifest).expect("serializes").as_bytes(),
    )?;
    Ok(manifest)
}

fn load_splits(ds: &Dataset, splits: &[Split]) -> Result<Vec<VideoSample>> {
    let mut out = Vec::new();
    for &s in splits {
        let part = ds.load_split(s)?;
        if part.is_empty() {
            warn!("split {} has no samples", s.tag());
        }
        out.extend(part);
    }
    Ok(out)
}

/// Predictions computed ahead of time, keyed by sample id.
pub struct Precomputed(pub BTreeMap<String, Vec<Vec<u8>>>);

impl Precomputed {
    pub fn new(predictor: &dyn Predictor, samples: &[VideoSample]) -> Result<Self> {
        let masks = samples
            .par_iter()
            .map(|s| Ok((s.id.clone(), predictor.predict(s)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(masks.into_iter().collect()))
    }
}

impl Predictor for Precomputed {
    fn predict(&self, sample: &VideoSample) -> Result<Vec<Vec<u8>>> {
        self.0
            .get(&sample.id)
            .cloned()
            .ok_or_else(|| SlvError::Input(format!("no prediction for sample {}", sample.id)))
    }
}

/// Evaluates a checkpoint and writes the report CSV (and optionally JSON
/// and mask dumps).
pub fn eval_run(ckpt: &Path, data: &Path, splits: &[Split], report: &Path, opts: &EvalOptions) -> Result<MetricsReport> {
    let model = Model::load(ckpt)?;
    let ds = Dataset::open(data)?;
    check_data_geometry(&model.config, &ds)?;
    let samples = load_splits(&ds, splits)?;
    let preds = Precomputed::new(&ModelPredictor { model: &model }, &samples)?;
    let rep = evaluate(&preds, &samples, splits)?;
    for w in &rep.warnings {
        warn!("{w}");
    }
    write_file(report, rep.to_csv().as_bytes())?;
    if let Some(j) = &opts.json {
        write_file(j, rep.to_json().as_bytes())?;
    }
    if let Some(dir) = &opts.dump_masks {
        dump_predictions(&preds, &samples, dir)?;
    }
    Ok(rep)
}

const TINT: [f64; 3] = [1.0, 0.15, 0.15];
const CONTOUR: [u8; 3] = [0, 255, 0];

/// One RGB overlay: predicted mask tinted red, ground-truth contour green.
pub fn overlay(sample: &VideoSample, frame: usize, pred: &[u8]) -> Vec<u8> {
    let (h, w) = (sample.height, sample.width);
    let px = h * w;
    let img = sample.frame(frame);
    let contour = boundary(sample.mask(frame), h, w);
    let mut rgb = Vec::with_capacity(px * 3);
    for i in 0..px {
        if contour[i] {
            rgb.extend_from_slice(&CONTOUR);
            continue;
        }
        for c in 0..3 {
            let mut v = f64::from(img[c * px + i]);
            if pred[i] != 0 {
                v = 0.5 * v + 0.5 * TINT[c];
            }
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    rgb
}

/// Renders `OUT/<id>/frame_XX.ppm` for every predicted sample; returns the
/// number of images written.
pub fn render_overlays(data: &Path, predictions: &Path, out: &Path) -> Result<usize> {
    let ds = Dataset::open(data)?;
    let mpath = predictions.join("predictions.json");
    let text = fs::read_to_string(&mpath).map_err(|e| SlvError::io(&mpath, e))?;
    let manifest: PredictionsManifest =
        serde_json::from_str(&text).map_err(|source| SlvError::Json { path: mpath.clone(), source })?;
    let counts = manifest
        .samples
        .par_iter()
        .map(|rec| {
            let sample = ds.load_sample(&rec.id)?;
            if rec.frames != sample.num_frames || rec.height != sample.height || rec.width != sample.width {
                return Err(SlvError::Input(format!(
                    "sample {}: predictions have {} frames of {}x{}, dataset has {} of {}x{}",
                    rec.id, rec.frames, rec.width, rec.height, sample.num_frames, sample.width, sample.height
                )));
            }
            let p = predictions.join(&rec.masks);
            let bytes = fs::read(&p).map_err(|e| SlvError::io(&p, e))?;
            let masks = decode_masks(&bytes, &p, rec.frames, rec.height, rec.width)?;
            let n = rec.height * rec.width;
            for f in 0..rec.frames {
                let rgb = overlay(&sample, f, &masks[f * n..(f + 1) * n]);
                let path = out.join(&rec.id).join(format!("frame_{f:02}.ppm"));
                write_file(&path, &encode_ppm(&rgb, rec.height, rec.width))?;
            }
            Ok(rec.frames)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Layers,
    NSeg,
    Strategy,
    Freeze,
}

impl std::str::FromStr for AblationAxis {
    type Err = SlvError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "layers" => Self::Layers,
            "n_seg" => Self::NSeg,
            "strategy" => Self::Strategy,
            "freeze" => Self::Freeze,
            other => return Err(SlvError::Config(format!("unknown ablation axis {other:?}"))),
        })
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Layers => "layers",
            Self::NSeg => "n_seg",
            Self::Strategy => "strategy",
            Self::Freeze => "freeze",
        }
    }

    /// Applies one axis value to a copy of `base`. Freeze values name the
    /// trainable segmenter groups: `none`, `decoder`, `decoder+prompt`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let num = || {
            value
                .parse::<usize>()
                .map_err(|_| SlvError::Config(format!("{} expects an integer, got {value:?}", self.name())))
        };
        match self {
            Self::Layers => cfg.fusion.layers = num()?,
            Self::NSeg => cfg.fusion.n_seg = num()?,
            Self::Strategy => cfg.fusion.strategy = value.parse::<FusionStrategy>()?,
            Self::Freeze => {
                let (dec, prompt) = match value {
                    "none" => (false, false),
                    "decoder" => (true, false),
                    "decoder+prompt" => (true, true),
                    other => {
                        return Err(SlvError::Config(format!(
                            "freeze expects none, decoder or decoder+prompt, got {other:?}"
                        )))
                    }
                };
                cfg.seg.train_mask_decoder = dec;
                cfg.seg.train_prompt_encoder = prompt;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const ABLATION_SPLITS: [Split; 3] = [Split::Seen, Split::Unseen, Split::Null];

/// Trains and evaluates one run per value, writing a row to `out_csv` after
/// each run. A failing run stops the sweep; rows written so far remain.
pub fn ablate(base: &RunConfig, data: &Path, axis: AblationAxis, values: &[String], out_csv: &Path, work: &Path) -> Result<usize> {
    let configs = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SlvError::io(dir, e))?;
    }
    let mut file = fs::File::create(out_csv).map_err(|e| SlvError::io(out_csv, e))?;
    let mut header_written = false;
    for (value, cfg) in values.iter().zip(&configs) {
        let tag = format!("{}-{}", axis.name(), value.replace('+', "_"));
        info!("ablation run {tag}");
        let ckpt = work.join(format!("{tag}.slv1"));
        train_run(cfg, data, &ckpt, &TrainOptions::default())?;
        let report = eval_run(
            &ckpt,
            data,
            &ABLATION_SPLITS,
            &work.join(format!("{tag}.csv")),
            &EvalOptions::default(),
        )?;
        let mut line = String::new();
        if !header_written {
            line.push_str(&format!("axis,value,{}\n", report.csv_header().join(",")));
            header_written = true;
        }
        line.push_str(&format!("{},{},{}\n", axis.name(), value, report.csv_values().join(",")));
        file.write_all(line.as_bytes()).map_err(|e| SlvError::io(out_csv, e))?;
        file.flush().map_err(|e| SlvError::io(out_csv, e))?;
    }
    Ok(values.len())
}

/// Reads the `step,lr,loss` log of a checkpoint.
pub fn read_log(ckpt: &Path) -> Result<Vec<StepRecord>> {
    let p = log_path(ckpt);
    let text = fs::read_to_string(&p).map_err(|e| SlvError::io(&p, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || SlvError::load(&p, format!("malformed log line {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(StepRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Formats a report row for logs.
pub fn summary(rep: &MetricsReport) -> String {
    let mut parts = Vec::new();
    for (name, m) in [("seen", rep.seen), ("unseen", rep.unseen), ("mix", rep.mix)] {
        if let Some(m) = m {
            parts.push(format!("{name} J&F {}", fmt(m.jf)));
        }
    }
    if let Some(s) = rep.null_s {
        parts.push(format!("null S {}", fmt(s)));
    }
    parts.join(", ")
}
