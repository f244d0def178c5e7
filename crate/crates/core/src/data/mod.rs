//! Synthetic language-aided audio-visual scenes: moving shapes that emit
//! tones, referring expressions resolved against the scene, ground-truth masks.

mod io;
pub mod pgm;
mod scene;

pub use io::{build_dataset, dataset_digest, Dataset, DatasetManifest, SampleRecord, SplitCounts, MANIFEST_VERSION};
pub use scene::{
    generate_scene, generate_scene_with, in_shape, render_mask, resolve_template, Resolution, Template,
};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlvError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// An object class: a shape, a colour and an instrument timbre.
#[derive(Clone, Copy, Debug)]
pub struct Category {
    pub id: usize,
    pub name: &'static str,
    pub shape: Shape,
    pub color: &'static str,
    pub rgb: [f32; 3],
    /// Timbre kind; selects the harmonic pattern of the tone.
    pub timbre: usize,
}

pub const CATEGORIES: [Category; 8] = [
    Category { id: 0, name: "drum", shape: Shape::Circle, color: "red", rgb: [0.9, 0.15, 0.15], timbre: 0 },
    Category { id: 1, name: "guitar", shape: Shape::Square, color: "green", rgb: [0.15, 0.85, 0.2], timbre: 1 },
    Category { id: 2, name: "piano", shape: Shape::Triangle, color: "blue", rgb: [0.2, 0.3, 0.95], timbre: 2 },
    Category { id: 3, name: "violin", shape: Shape::Circle, color: "yellow", rgb: [0.95, 0.9, 0.1], timbre: 1 },
    Category { id: 4, name: "trumpet", shape: Shape::Square, color: "magenta", rgb: [0.9, 0.2, 0.85], timbre: 2 },
    Category { id: 5, name: "flute", shape: Shape::Triangle, color: "cyan", rgb: [0.1, 0.9, 0.9], timbre: 0 },
    Category { id: 6, name: "cello", shape: Shape::Circle, color: "orange", rgb: [1.0, 0.55, 0.05], timbre: 2 },
    Category { id: 7, name: "bell", shape: Shape::Square, color: "white", rgb: [0.97, 0.97, 0.97], timbre: 0 },
];

/// Categories that may appear in training scenes.
pub const SEEN_CATEGORIES: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Categories held out for the unseen test split.
pub const UNSEEN_CATEGORIES: [usize; 2] = [6, 7];

/// Spectrum of one unit-amplitude source of a category over `bins` bins.
pub fn category_spectrum(category: usize, bins: usize) -> Vec<f64> {
    let cat = &CATEGORIES[category];
    let base = (2 + 3 * category) % bins;
    let mut s = vec![0.0; bins];
    s[base] += 1.0;
    match cat.timbre {
        0 => {}
        1 => s[(2 * base) % bins] += 0.5,
        _ => {
            s[(base + 1) % bins] += 0.4;
            s[(3 * base) % bins] += 0.25;
        }
    }
    s
}

/// The fixed vocabulary. Token ids are positions in this list.
pub const VOCABULARY: [&str; 64] = [
    "the", "a", "an", "object", "one", "thing", "that", "which", "is", "was", "making", "made", "sound",
    "sounds", "sounded", "loudest", "quietest", "silent", "before", "after", "first", "last", "of", "and",
    "with", "in", "red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white", "black", "purple",
    "circle", "square", "triangle", "star", "drum", "guitar", "piano", "violin", "trumpet", "flute", "cello",
    "bell", "left", "right", "top", "bottom", "moving", "small", "large", "loud", "quiet", "playing",
    "instrument", "shape", "visible", "video", "frame", "scene",
];

pub fn token_id(word: &str) -> Option<usize> {
    VOCABULARY.iter().position(|w| *w == word)
}

/// Whitespace tokenization into vocabulary ids; unknown words are errors.
pub fn tokenize(expression: &str) -> Result<Vec<usize>> {
    expression
        .split_whitespace()
        .map(|w| token_id(w).ok_or_else(|| SlvError::Input(format!("word {w:?} is not in the vocabulary"))))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "seen-test")]
    Seen,
    #[serde(rename = "unseen-test")]
    Unseen,
    #[serde(rename = "null-test")]
    Null,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Seen, Split::Unseen, Split::Null];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen-test",
            Split::Unseen => "unseen-test",
            Split::Null => "null-test",
        }
    }

    /// Short name used on the command line (`seen`, `unseen`, `null`, `train`).
    pub fn short(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Seen => "seen",
            Split::Unseen => "unseen",
            Split::Null => "null",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.short() == s || sp.tag() == s)
            .ok_or_else(|| SlvError::Input(format!("unknown split {s:?}")))
    }
}

/// Expression template families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// "the red square"
    TextOnly,
    /// "the object making the loudest sound"
    AudioArgmax,
    /// "the circle that is making sound"
    AudioPresence,
    /// "the silent triangle"
    Negation,
    /// "the object that sounded before the square"
    Temporal,
    /// "the drum that is making sound" with no drum in the scene
    Null,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::TextOnly,
        TemplateKind::AudioArgmax,
        TemplateKind::AudioPresence,
        TemplateKind::Negation,
        TemplateKind::Temporal,
        TemplateKind::Null,
    ];

    pub fn id(self) -> usize {
        TemplateKind::ALL.iter().position(|k| *k == self).expect("listed")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub audio_bins: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object radius / half-width range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum centre displacement per frame in pixels.
    pub max_speed: f64,
    /// Probability that an object emits sound at all.
    pub sounding_prob: f64,
    /// Template families drawn for train/seen/unseen samples (null excluded).
    pub templates: Vec<TemplateKind>,
    /// Fraction of training samples that use the null template.
    pub null_train_fraction: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_frames: 8,
            audio_bins: 32,
            min_objects: 1,
            max_objects: 3,
            min_size: 5.0,
            max_size: 8.0,
            max_speed: 1.5,
            sounding_prob: 0.6,
            templates: vec![
                TemplateKind::TextOnly,
                TemplateKind::AudioArgmax,
                TemplateKind::AudioPresence,
                TemplateKind::Negation,
                TemplateKind::Temporal,
            ],
            null_train_fraction: 0.125,
            max_retries: 400,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SlvError::Config(format!("generator: {m}")));
        if self.height == 0 || self.width == 0 || self.audio_bins == 0 {
            return bad("frame and audio dimensions must be positive");
        }
        if self.num_frames < 2 {
            return bad("num_frames must be at least 2");
        }
        if !(1..=4).contains(&self.min_objects) || !(self.min_objects..=4).contains(&self.max_objects) {
            return bad("object count must be within 1..=4");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad("invalid size range");
        }
        if 2.0 * self.max_size >= self.height.min(self.width) as f64 {
            return bad("objects do not fit in the frame");
        }
        if self.templates.is_empty() || self.templates.contains(&TemplateKind::Null) {
            return bad("template set must be non-empty and exclude the null family");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }
}

/// One object's motion and sound over the clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub category_id: usize,
    /// Per-frame centre `(x, y)` in pixels.
    pub trajectory: Vec<[f64; 2]>,
    /// Radius (circle) or half-width (square, triangle) in pixels.
    pub size: f64,
    /// Fundamental spectral bin.
    pub tone_bin: usize,
    /// Per-frame loudness in `[0, 1]`; all zeros for a silent object.
    pub amplitude_envelope: Vec<f64>,
}

impl ObjectTrack {
    pub fn shape(&self) -> Shape {
        CATEGORIES[self.category_id].shape
    }

    pub fn is_sounding(&self) -> bool {
        self.amplitude_envelope.iter().any(|&a| a > 0.0)
    }

    pub fn total_loudness(&self) -> f64 {
        self.amplitude_envelope.iter().sum()
    }

    /// First frame with non-zero amplitude.
    pub fn onset(&self) -> Option<usize> {
        self.amplitude_envelope.iter().position(|&a| a > 0.0)
    }
}

/// One generated clip with its expression and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub split: Split,
    pub template_id: usize,
    pub expression: String,
    pub tokens: Vec<usize>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_bins: usize,
    /// `num_frames x 3 x H x W`, values in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `num_frames x audio_bins` mixed spectral magnitudes.
    pub audio: Vec<f32>,
    /// `num_frames x H x W`, 0 or 1.
    pub masks: Vec<u8>,
    pub objects: Vec<ObjectTrack>,
    /// Index into `objects` of the referred object; `None` for null expressions.
    pub target: Option<usize>,
}

impl VideoSample {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.frames[i * n..(i + 1) * n]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.masks[i * n..(i + 1) * n]
    }

    pub fn audio_row(&self, i: usize) -> &[f32] {
        &self.audio[i * self.audio_bins..(i + 1) * self.audio_bins]
    }

    pub fn category_ids(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.category_id).collect()
    }
}
