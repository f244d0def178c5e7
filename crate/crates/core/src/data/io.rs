//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json
//! DIR/vocab.txt
//! DIR/<sample id>/frames.f32      N x 3 x H x W little-endian f32, no header
//! DIR/<sample id>/audio.f32       N x bins little-endian f32, no header
//! DIR/<sample id>/masks.pgm       N concatenated P5 images (0 / 255)
//! DIR/<sample id>/expression.txt  UTF-8 expression
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::pgm::{decode_masks, encode_masks};
use super::{generate_scene, tokenize, GenConfig, ObjectTrack, Split, VideoSample, VOCABULARY};
use crate::error::{Result, SlvError};
use crate::params::derive_seed;

pub const MANIFEST_VERSION: &str = "slv-lavs-1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub seen: usize,
    pub unseen: usize,
    pub null: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Seen => self.seen,
            Split::Unseen => self.unseen,
            Split::Null => self.null,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.seen + self.unseen + self.null
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub frames: String,
    pub audio: String,
    pub masks: String,
    pub expression: String,
    pub template_id: usize,
    pub categories: Vec<usize>,
    pub target: Option<usize>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_bins: usize,
    pub objects: Vec<ObjectTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub config: GenConfig,
    pub counts: SplitCounts,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|r| r.id == id)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SlvError::io(path, e))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, &format!("{}/{index}", split.tag()))
}

/// Generates every sample (in parallel), writes the per-sample files, then
/// writes `manifest.json` once.
pub fn build_dataset(seed: u64, config: &GenConfig, counts: SplitCounts, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| SlvError::io(out, e))?;
    let jobs: Vec<(Split, usize)> = Split::ALL
        .iter()
        .flat_map(|&s| (0..counts.get(s)).map(move |i| (s, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(split, index)| {
            let mut sample = generate_scene(sample_seed(seed, split, index), config, split)?;
            sample.id = format!("{}-{index:04}", split.short());
            save_sample(&sample, out)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        seed,
        config: config.clone(),
        counts,
        samples: records,
    };
    write(&out.join("vocab.txt"), (VOCABULARY.join("\n") + "\n").as_bytes())?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// Writes one sample's files under `root/<id>/` and returns its record.
pub fn save_sample(sample: &VideoSample, root: &Path) -> Result<SampleRecord> {
    let dir = root.join(&sample.id);
    fs::create_dir_all(&dir).map_err(|e| SlvError::io(&dir, e))?;
    let rel = |f: &str| format!("{}/{f}", sample.id);
    write(&dir.join("frames.f32"), &f32_bytes(&sample.frames))?;
    write(&dir.join("audio.f32"), &f32_bytes(&sample.audio))?;
    write(
        &dir.join("masks.pgm"),
        &encode_masks(&sample.masks, sample.num_frames, sample.height, sample.width),
    )?;
    write(&dir.join("expression.txt"), sample.expression.as_bytes())?;
    Ok(SampleRecord {
        id: sample.id.clone(),
        split: sample.split,
        frames: rel("frames.f32"),
        audio: rel("audio.f32"),
        masks: rel("masks.pgm"),
        expression: rel("expression.txt"),
        template_id: sample.template_id,
        categories: sample.category_ids(),
        target: sample.target,
        num_frames: sample.num_frames,
        height: sample.height,
        width: sample.width,
        audio_bins: sample.audio_bins,
        objects: sample.objects.clone(),
    })
}

fn read_exact_len(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| SlvError::io(path, e))?;
    if bytes.len() != expected {
        return Err(SlvError::load(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn read_f32(path: &Path, count: usize) -> Result<Vec<f32>> {
    let bytes = read_exact_len(path, count * 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect())
}

/// A dataset directory with its parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| SlvError::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|source| SlvError::Json { path: path.clone(), source })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(SlvError::load(
                &path,
                format!("unsupported manifest version {:?}", manifest.version),
            ));
        }
        let mut ids: Vec<&str> = manifest.samples.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(SlvError::load(&path, "duplicate sample ids"));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Records of one split, in manifest order.
    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.manifest.samples.iter().filter(move |r| r.split == split)
    }

    pub fn load_sample(&self, id: &str) -> Result<VideoSample> {
        let rec = self
            .manifest
            .record(id)
            .ok_or_else(|| SlvError::Input(format!("sample {id:?} is not in the manifest")))?;
        let (n, h, w) = (rec.num_frames, rec.height, rec.width);
        let frames = read_f32(&self.root.join(&rec.frames), n * 3 * h * w)?;
        let audio = read_f32(&self.root.join(&rec.audio), n * rec.audio_bins)?;
        let mask_path = self.root.join(&rec.masks);
        let mask_bytes = fs::read(&mask_path).map_err(|e| SlvError::io(&mask_path, e))?;
        let masks = decode_masks(&mask_bytes, &mask_path, n, h, w)?;
        let expr_path = self.root.join(&rec.expression);
        let expression = fs::read_to_string(&expr_path).map_err(|e| SlvError::io(&expr_path, e))?;
        let tokens = tokenize(&expression)?;
        Ok(VideoSample {
            id: rec.id.clone(),
            split: rec.split,
            template_id: rec.template_id,
            expression,
            tokens,
            num_frames: n,
            height: h,
            width: w,
            audio_bins: rec.audio_bins,
            frames,
            audio,
            masks,
            objects: rec.objects.clone(),
            target: rec.target,
        })
    }

    /// Loads every sample of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<VideoSample>> {
        let ids: Vec<&str> = self.records(split).map(|r| r.id.as_str()).collect();
        ids.par_iter().map(|id| self.load_sample(id)).collect()
    }
}

/// SHA-256 over `manifest.json` and every sample file in manifest order.
pub fn dataset_digest(root: &Path) -> Result<String> {
    let ds = Dataset::open(root)?;
    let mut h = Sha256::new();
    let manifest_path = root.join("manifest.json");
    h.update(fs::read(&manifest_path).map_err(|e| SlvError::io(&manifest_path, e))?);
    for rec in &ds.manifest.samples {
        for f in [&rec.frames, &rec.audio, &rec.masks, &rec.expression] {
            let p = root.join(f);
            h.update(fs::read(&p).map_err(|e| SlvError::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
