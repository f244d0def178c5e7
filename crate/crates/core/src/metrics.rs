//! Region (J), boundary (F) and null-split (S) metrics, and the report
//! layout: Seen / Unseen / Mix / NULL.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{Split, VideoSample};
use crate::error::{contract, Result};

fn same_len(a: &[u8], b: &[u8], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(contract(format!("{what}: masks of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// `|p ∩ g| / |p ∪ g|`; two empty masks score 1.
pub fn jaccard(pred: &[u8], gt: &[u8]) -> Result<f64> {
    same_len(pred, gt, "jaccard")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels that touch the image border or a background 4-neighbour.
pub fn boundary(mask: &[u8], height: usize, width: usize) -> Vec<bool> {
    let fg = |y: usize, x: usize| mask[y * width + x] != 0;
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            if !fg(y, x) {
                continue;
            }
            out[y * width + x] = y == 0
                || x == 0
                || y + 1 == height
                || x + 1 == width
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
        }
    }
    out
}

/// Fraction of `from` boundary pixels that have a `to` boundary pixel within
/// Chebyshev distance `tol`.
fn matched_fraction(from: &[bool], to: &[bool], height: usize, width: usize, tol: usize) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for y in 0..height {
        for x in 0..width {
            if !from[y * width + x] {
                continue;
            }
            total += 1;
            let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(height - 1));
            let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(width - 1));
            if (y0..=y1).any(|yy| (x0..=x1).any(|xx| to[yy * width + xx])) {
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

/// Boundary F-measure with distance-threshold matching.
pub fn boundary_f(pred: &[u8], gt: &[u8], height: usize, width: usize, tol: usize) -> Result<f64> {
    same_len(pred, gt, "boundary_f")?;
    if pred.len() != height * width {
        return Err(contract(format!("boundary_f: {} pixels is not {height}x{width}", pred.len())));
    }
    let bp = boundary(pred, height, width);
    let bg = boundary(gt, height, width);
    let (np, ng) = (bp.iter().any(|&b| b), bg.iter().any(|&b| b));
    match (np, ng) {
        (false, false) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_fraction(&bp, &bg, height, width, tol);
    let recall = matched_fraction(&bg, &bp, height, width, tol);
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// `sqrt(Σ fg / Σ bg)` pooled over frames; `+inf` when nothing is background.
pub fn s_score(frames: &[Vec<u8>]) -> Result<f64> {
    if frames.is_empty() {
        return Err(contract("s_score needs at least one frame"));
    }
    let fg: usize = frames.iter().map(|f| f.iter().filter(|&&m| m != 0).count()).sum();
    let total: usize = frames.iter().map(Vec::len).sum();
    let bg = total - fg;
    Ok(if fg == 0 {
        0.0
    } else if bg == 0 {
        f64::INFINITY
    } else {
        (fg as f64 / bg as f64).sqrt()
    })
}

/// Anything that maps a sample to one binary mask per frame.
pub trait Predictor: Sync {
    fn predict(&self, sample: &VideoSample) -> Result<Vec<Vec<u8>>>;
}

/// Returns the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, sample: &VideoSample) -> Result<Vec<Vec<u8>>> {
        Ok((0..sample.num_frames).map(|i| sample.mask(i).to_vec()).collect())
    }
}

/// Predicts nothing, everywhere.
pub struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn predict(&self, sample: &VideoSample) -> Result<Vec<Vec<u8>>> {
        Ok(vec![vec![0; sample.height * sample.width]; sample.num_frames])
    }
}

pub const BOUNDARY_TOL: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub id: String,
    pub split: Split,
    pub frame_j: Vec<f64>,
    pub frame_f: Vec<f64>,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub s: Option<f64>,
}

pub fn score_sample(sample: &VideoSample, pred: &[Vec<u8>]) -> Result<SampleMetrics> {
    if pred.len() != sample.num_frames {
        return Err(contract(format!(
            "sample {}: {} predicted frames for {} frames",
            sample.id,
            pred.len(),
            sample.num_frames
        )));
    }
    let (h, w) = (sample.height, sample.width);
    let mut frame_j = Vec::with_capacity(pred.len());
    let mut frame_f = Vec::with_capacity(pred.len());
    for (i, p) in pred.iter().enumerate() {
        frame_j.push(jaccard(p, sample.mask(i))?);
        frame_f.push(boundary_f(p, sample.mask(i), h, w, BOUNDARY_TOL)?);
    }
    let n = pred.len() as f64;
    let j = frame_j.iter().sum::<f64>() / n;
    let f = frame_f.iter().sum::<f64>() / n;
    let s = if sample.split == Split::Null { Some(s_score(pred)?) } else { None };
    Ok(SampleMetrics {
        id: sample.id.clone(),
        split: sample.split,
        frame_j,
        frame_f,
        j,
        f,
        jf: (j + f) / 2.0,
        s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub videos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub samples: Vec<SampleMetrics>,
    pub seen: Option<SplitMetrics>,
    pub unseen: Option<SplitMetrics>,
    pub mix: Option<SplitMetrics>,
    pub null_s: Option<f64>,
    pub warnings: Vec<String>,
}

fn split_mean(rows: &[&SampleMetrics]) -> Option<SplitMetrics> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let j = rows.iter().map(|r| r.j).sum::<f64>() / n;
    let f = rows.iter().map(|r| r.f).sum::<f64>() / n;
    Some(SplitMetrics {
        j,
        f,
        jf: (j + f) / 2.0,
        videos: rows.len(),
    })
}

impl MetricsReport {
    /// Aggregates per-sample rows for the requested splits.
    pub fn assemble(samples: Vec<SampleMetrics>, splits: &[Split]) -> Self {
        let rows = |s: Split| samples.iter().filter(|r| r.split == s).collect::<Vec<_>>();
        let mut warnings = Vec::new();
        let mut pick = |s: Split| {
            if !splits.contains(&s) {
                return None;
            }
            let r = rows(s);
            if r.is_empty() {
                warnings.push(format!("split {} has no samples; column omitted", s.tag()));
            }
            Some(r)
        };
        let seen = pick(Split::Seen).and_then(|r| split_mean(&r));
        let unseen = pick(Split::Unseen).and_then(|r| split_mean(&r));
        let null = pick(Split::Null).filter(|r| !r.is_empty());
        let null_s = null.map(|r| r.iter().map(|x| x.s.unwrap_or(0.0)).sum::<f64>() / r.len() as f64);
        let mix = match (seen, unseen) {
            (Some(a), Some(b)) => Some(SplitMetrics {
                j: (a.j + b.j) / 2.0,
                f: (a.f + b.f) / 2.0,
                jf: (a.jf + b.jf) / 2.0,
                videos: a.videos + b.videos,
            }),
            _ => None,
        };
        Self {
            samples,
            seen,
            unseen,
            mix,
            null_s,
            warnings,
        }
    }

    /// CSV header; columns of absent splits are left out.
    pub fn csv_header(&self) -> Vec<String> {
        let mut cols = Vec::new();
        for (name, m) in [("seen", self.seen), ("unseen", self.unseen), ("mix", self.mix)] {
            if m.is_some() {
                cols.extend([format!("{name}_J"), format!("{name}_F"), format!("{name}_JF")]);
            }
        }
        if self.null_s.is_some() {
            cols.push("null_S".into());
        }
        cols
    }

    pub fn csv_values(&self) -> Vec<String> {
        let mut vals = Vec::new();
        for m in [self.seen, self.unseen, self.mix].into_iter().flatten() {
            vals.extend([fmt(m.j), fmt(m.f), fmt(m.jf)]);
        }
        if let Some(s) = self.null_s {
            vals.push(fmt(s));
        }
        vals
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{}", self.csv_header().join(",")).unwrap();
        writeln!(out, "{}", self.csv_values().join(",")).unwrap();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// Scores `predictor` on every sample, in input order.
pub fn evaluate(predictor: &dyn Predictor, samples: &[VideoSample], splits: &[Split]) -> Result<MetricsReport> {
    let rows = samples
        .par_iter()
        .filter(|s| splits.contains(&s.split))
        .map(|s| score_sample(s, &predictor.predict(s)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::assemble(rows, splits))
}
