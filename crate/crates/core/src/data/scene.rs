use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    category_spectrum, tokenize, GenConfig, ObjectTrack, Shape, Split, TemplateKind, VideoSample, CATEGORIES,
    SEEN_CATEGORIES, UNSEEN_CATEGORIES,
};
use crate::error::{Result, SlvError};
use crate::params::derive_seed;

/// A template family with its slots filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub kind: TemplateKind,
    pub color: Option<&'static str>,
    pub shape: Option<Shape>,
    /// Category named by a null expression.
    pub named_category: Option<usize>,
}

impl Template {
    pub fn new(kind: TemplateKind) -> Self {
        Self {
            kind,
            color: None,
            shape: None,
            named_category: None,
        }
    }

    pub fn with_shape(kind: TemplateKind, shape: Shape) -> Self {
        Self {
            shape: Some(shape),
            ..Self::new(kind)
        }
    }

    pub fn expression(&self) -> String {
        let shape = || self.shape.map(Shape::word).unwrap_or("object");
        match self.kind {
            TemplateKind::TextOnly => format!("the {} {}", self.color.unwrap_or("red"), shape()),
            TemplateKind::AudioArgmax => "the object making the loudest sound".to_string(),
            TemplateKind::AudioPresence => format!("the {} that is making sound", shape()),
            TemplateKind::Negation => format!("the silent {}", shape()),
            TemplateKind::Temporal => format!("the object that sounded before the {}", shape()),
            TemplateKind::Null => format!(
                "the {} that is making sound",
                CATEGORIES[self.named_category.unwrap_or(0)].name
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Target(usize),
    /// The expression refers to nothing in the scene.
    Null,
    /// The expression is ambiguous or refers to nothing for a non-null family.
    Unsatisfiable,
}

fn unique(mut candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let first = candidates.next()?;
    candidates.next().is_none().then_some(first)
}

/// Evaluates a template against the object tracks of a scene.
pub fn resolve_template(template: &Template, objects: &[ObjectTrack]) -> Resolution {
    let with_shape = |i: &usize| Some(objects[*i].shape()) == template.shape;
    let found = |o: Option<usize>| o.map_or(Resolution::Unsatisfiable, Resolution::Target);
    let all = 0..objects.len();
    match template.kind {
        TemplateKind::TextOnly => found(unique(all.filter(|&i| {
            let c = &CATEGORIES[objects[i].category_id];
            Some(c.color) == template.color && Some(c.shape) == template.shape
        }))),
        TemplateKind::AudioArgmax => {
            let mut best: Option<usize> = None;
            for i in all.filter(|&i| objects[i].is_sounding()) {
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let (lb, li) = (objects[b].total_loudness(), objects[i].total_loudness());
                        let louder = li > lb || (li == lb && objects[i].category_id < objects[b].category_id);
                        Some(if louder { i } else { b })
                    }
                };
            }
            found(best)
        }
        TemplateKind::AudioPresence => {
            found(unique(all.filter(|i| objects[*i].is_sounding()).filter(with_shape)))
        }
        TemplateKind::Negation => found(unique(all.filter(|i| !objects[*i].is_sounding()).filter(with_shape))),
        TemplateKind::Temporal => {
            let Some(reference) = unique(all.clone().filter(|i| objects[*i].is_sounding()).filter(with_shape))
            else {
                return Resolution::Unsatisfiable;
            };
            let ref_onset = objects[reference].onset().expect("sounding");
            found(unique(all.filter(|&i| {
                i != reference && objects[i].onset().is_some_and(|o| o < ref_onset)
            })))
        }
        TemplateKind::Null => {
            let named = template.named_category;
            if objects.iter().any(|o| Some(o.category_id) == named) {
                Resolution::Unsatisfiable
            } else {
                Resolution::Null
            }
        }
    }
}

/// Point-in-shape test for a pixel centre `(px, py)`.
pub fn in_shape(shape: Shape, center: [f64; 2], size: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - center[0], py - center[1]);
    match shape {
        Shape::Circle => dx * dx + dy * dy <= size * size,
        Shape::Square => dx.abs() <= size && dy.abs() <= size,
        Shape::Triangle => {
            // Upward triangle: apex above the centre, base below it.
            let v = [
                [center[0], center[1] - size],
                [center[0] + size, center[1] + size],
                [center[0] - size, center[1] + size],
            ];
            let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
            let e0 = edge(v[0], v[1]);
            let e1 = edge(v[1], v[2]);
            let e2 = edge(v[2], v[0]);
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

/// Binary mask (`H x W`) of one object at one frame.
pub fn render_mask(object: &ObjectTrack, frame: usize, height: usize, width: usize) -> Vec<u8> {
    let c = object.trajectory[frame];
    let mut out = vec![0u8; height * width];
    for y in 0..height {
        for x in 0..width {
            if in_shape(object.shape(), c, object.size, x as f64 + 0.5, y as f64 + 0.5) {
                out[y * width + x] = 1;
            }
        }
    }
    out
}

/// Generates one scene, drawing the template family from the seed.
pub fn generate_scene(seed: u64, config: &GenConfig, split: Split) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "family"));
    let kind = match split {
        Split::Null => TemplateKind::Null,
        Split::Train if rng.random_bool(config.null_train_fraction.clamp(0.0, 1.0)) => TemplateKind::Null,
        _ => *config.templates.choose(&mut rng).expect("validated non-empty"),
    };
    generate_scene_with(seed, config, split, kind)
}

/// Generates one scene for a fixed template family.
pub fn generate_scene_with(seed: u64, config: &GenConfig, split: Split, kind: TemplateKind) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene"));
    let mut last_reason = String::new();
    for _ in 0..config.max_retries {
        match attempt(&mut rng, config, split, kind) {
            Ok((objects, template, resolution)) => {
                return render(seed, config, split, objects, template, resolution);
            }
            Err(reason) => last_reason = reason,
        }
    }
    Err(SlvError::Generation {
        attempts: config.max_retries,
        reason: last_reason,
    })
}

type Attempt = std::result::Result<(Vec<ObjectTrack>, Template, Resolution), String>;

/// Redraws of a single object before the whole attempt is abandoned.
const PLACEMENT_TRIES: usize = 32;

fn attempt(rng: &mut ChaCha8Rng, cfg: &GenConfig, split: Split, kind: TemplateKind) -> Attempt {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut cats: Vec<usize> = match split {
        Split::Train | Split::Seen => {
            let mut pool = SEEN_CATEGORIES.to_vec();
            pool.shuffle(rng);
            pool.truncate(n);
            pool
        }
        Split::Unseen => {
            let first = *UNSEEN_CATEGORIES.choose(rng).expect("non-empty");
            let mut rest: Vec<usize> = (0..CATEGORIES.len()).filter(|&c| c != first).collect();
            rest.shuffle(rng);
            rest.truncate(n - 1);
            std::iter::once(first).chain(rest).collect()
        }
        Split::Null => {
            let mut pool: Vec<usize> = (0..CATEGORIES.len()).collect();
            pool.shuffle(rng);
            pool.truncate(n);
            pool
        }
    };
    cats.shuffle(rng);
    let mut objects: Vec<ObjectTrack> = Vec::with_capacity(n);
    for &c in &cats {
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            objects.push(draw_track(rng, cfg, c));
            if overlapping(&objects, cfg) {
                objects.pop();
                None
            } else {
                Some(())
            }
        });
        if placed.is_none() {
            return Err("objects overlap".into());
        }
    }

    let sounding: Vec<usize> = (0..n).filter(|&i| objects[i].is_sounding()).collect();
    let silent: Vec<usize> = (0..n).filter(|&i| !objects[i].is_sounding()).collect();
    let mut template = Template::new(kind);
    match kind {
        TemplateKind::TextOnly => {
            let pool: Vec<usize> = if split == Split::Unseen {
                (0..n).filter(|&i| UNSEEN_CATEGORIES.contains(&objects[i].category_id)).collect()
            } else {
                (0..n).collect()
            };
            let pick = *pool.choose(rng).ok_or("no candidate object")?;
            let cat = &CATEGORIES[objects[pick].category_id];
            template.color = Some(cat.color);
            template.shape = Some(cat.shape);
        }
        TemplateKind::AudioArgmax => {}
        TemplateKind::AudioPresence | TemplateKind::Temporal => {
            let pick = *sounding.choose(rng).ok_or("no sounding object")?;
            template.shape = Some(objects[pick].shape());
        }
        TemplateKind::Negation => {
            let pick = *silent.choose(rng).ok_or("no silent object")?;
            template.shape = Some(objects[pick].shape());
        }
        TemplateKind::Null => {
            let pool: &[usize] = if split == Split::Train { &SEEN_CATEGORIES } else { &[0, 1, 2, 3, 4, 5, 6, 7] };
            let absent: Vec<usize> = pool.iter().copied().filter(|c| !cats.contains(c)).collect();
            template.named_category = Some(*absent.choose(rng).ok_or("every category present")?);
        }
    }

    let resolution = resolve_template(&template, &objects);
    match (kind, resolution) {
        (TemplateKind::Null, Resolution::Null) => {}
        (TemplateKind::Null, _) => return Err("null expression resolved to an object".into()),
        (_, Resolution::Target(t)) => {
            if split == Split::Unseen && !UNSEEN_CATEGORIES.contains(&objects[t].category_id) {
                return Err("unseen-split target is a seen category".into());
            }
        }
        _ => return Err(format!("{kind:?} expression is not satisfiable")),
    }
    Ok((objects, template, resolution))
}

fn draw_track(rng: &mut ChaCha8Rng, cfg: &GenConfig, category: usize) -> ObjectTrack {
    let size = rng.random_range(cfg.min_size..=cfg.max_size);
    let n = cfg.num_frames;
    // The centre stays in [size, side - size] on both endpoints, and the
    // path between them is a straight line, so every frame stays in bounds.
    let lo = size;
    let (hx, hy) = (cfg.width as f64 - size, cfg.height as f64 - size);
    let start = [rng.random_range(lo..=hx), rng.random_range(lo..=hy)];
    let span = cfg.max_speed * (n - 1) as f64;
    let end = [
        (start[0] + rng.random_range(-span..=span)).clamp(lo, hx),
        (start[1] + rng.random_range(-span..=span)).clamp(lo, hy),
    ];
    let trajectory = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            [start[0] + t * (end[0] - start[0]), start[1] + t * (end[1] - start[1])]
        })
        .collect();

    let mut amplitude_envelope = vec![0.0; n];
    if rng.random_bool(cfg.sounding_prob.clamp(0.0, 1.0)) {
        let onset = rng.random_range(0..=n / 2);
        let level = rng.random_range(0.2..=1.0);
        for a in amplitude_envelope.iter_mut().skip(onset) {
            *a = (level * rng.random_range(0.85..=1.0_f64)).clamp(0.05, 1.0);
        }
    }
    ObjectTrack {
        category_id: category,
        trajectory,
        size,
        tone_bin: (2 + 3 * category) % cfg.audio_bins,
        amplitude_envelope,
    }
}

fn overlapping(objects: &[ObjectTrack], cfg: &GenConfig) -> bool {
    for f in 0..cfg.num_frames {
        let mut occupied = vec![false; cfg.height * cfg.width];
        for o in objects {
            for (cell, m) in occupied.iter_mut().zip(render_mask(o, f, cfg.height, cfg.width)) {
                if m == 1 {
                    if *cell {
                        return true;
                    }
                    *cell = true;
                }
            }
        }
    }
    false
}

fn render(
    seed: u64,
    cfg: &GenConfig,
    split: Split,
    objects: Vec<ObjectTrack>,
    template: Template,
    resolution: Resolution,
) -> Result<VideoSample> {
    let (h, w, n) = (cfg.height, cfg.width, cfg.num_frames);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "background"));
    let background: Vec<f32> = (0..h * w).map(|_| 0.08 + 0.06 * bg_rng.random::<f32>()).collect();

    let mut frames = Vec::with_capacity(n * 3 * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let target = match resolution {
        Resolution::Target(t) => Some(t),
        _ => None,
    };
    for f in 0..n {
        let mut rgb = [background.clone(), background.clone(), background.clone()];
        for o in &objects {
            let color = CATEGORIES[o.category_id].rgb;
            for (i, m) in render_mask(o, f, h, w).into_iter().enumerate() {
                if m == 1 {
                    for c in 0..3 {
                        rgb[c][i] = color[c];
                    }
                }
            }
        }
        for plane in &rgb {
            frames.extend_from_slice(plane);
        }
        match target {
            Some(t) => masks.extend(render_mask(&objects[t], f, h, w)),
            None => masks.extend(std::iter::repeat_n(0u8, h * w)),
        }
    }

    let mut audio = Vec::with_capacity(n * cfg.audio_bins);
    let spectra: Vec<Vec<f64>> = objects
        .iter()
        .map(|o| category_spectrum(o.category_id, cfg.audio_bins))
        .collect();
    for f in 0..n {
        for b in 0..cfg.audio_bins {
            let v: f64 = objects
                .iter()
                .zip(&spectra)
                .map(|(o, s)| o.amplitude_envelope[f] * s[b])
                .sum();
            audio.push(v as f32);
        }
    }

    let expression = template.expression();
    let tokens = tokenize(&expression)?;
    Ok(VideoSample {
        id: format!("scene-{seed}"),
        split,
        template_id: template.kind.id(),
        expression,
        tokens,
        num_frames: n,
        height: h,
        width: w,
        audio_bins: cfg.audio_bins,
        frames,
        audio,
        masks,
        objects,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(category: usize, envelope: &[f64]) -> ObjectTrack {
        ObjectTrack {
            category_id: category,
            trajectory: vec![[10.0, 10.0]; envelope.len()],
            size: 5.0,
            tone_bin: 0,
            amplitude_envelope: envelope.to_vec(),
        }
    }

    #[test]
    fn loudest_is_brute_force_argmax() {
        // Envelope sums 0.2, 0.9, 0.4.
        let objects = vec![
            track(0, &[0.1, 0.1]),
            track(1, &[0.4, 0.5]),
            track(2, &[0.2, 0.2]),
        ];
        let sums: Vec<f64> = objects.iter().map(|o| o.amplitude_envelope.iter().sum()).collect();
        let brute = (0..3).fold(0, |b, i| if sums[i] > sums[b] { i } else { b });
        assert_eq!(brute, 1);
        assert_eq!(
            resolve_template(&Template::new(TemplateKind::AudioArgmax), &objects),
            Resolution::Target(1)
        );
    }

    #[test]
    fn loudest_ties_go_to_lowest_category() {
        let objects = vec![track(4, &[0.5, 0.5]), track(2, &[0.5, 0.5])];
        assert_eq!(
            resolve_template(&Template::new(TemplateKind::AudioArgmax), &objects),
            Resolution::Target(1)
        );
    }

    #[test]
    fn presence_negation_and_temporal() {
        // circle sounding from frame 1, square sounding from 0, circle (yellow) silent
        let objects = vec![
            track(0, &[0.0, 0.5, 0.5]),
            track(1, &[0.3, 0.3, 0.3]),
            track(3, &[0.0, 0.0, 0.0]),
        ];
        let t = Template::with_shape(TemplateKind::AudioPresence, Shape::Circle);
        assert_eq!(resolve_template(&t, &objects), Resolution::Target(0));
        let t = Template::with_shape(TemplateKind::Negation, Shape::Circle);
        assert_eq!(resolve_template(&t, &objects), Resolution::Target(2));
        let t = Template::with_shape(TemplateKind::Temporal, Shape::Circle);
        assert_eq!(resolve_template(&t, &objects), Resolution::Target(1));
        let t = Template::with_shape(TemplateKind::Temporal, Shape::Square);
        assert_eq!(resolve_template(&t, &objects), Resolution::Unsatisfiable);
    }

    #[test]
    fn null_template_for_absent_drum() {
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let s = generate_scene_with(seed, &cfg, Split::Null, TemplateKind::Null).unwrap();
            assert!(s.masks.iter().all(|&m| m == 0));
            assert!(s.target.is_none());
        }
        let objects = vec![track(1, &[0.5, 0.5])];
        let t = Template {
            named_category: Some(0),
            ..Template::new(TemplateKind::Null)
        };
        assert_eq!(t.expression(), "the drum that is making sound");
        assert_eq!(resolve_template(&t, &objects), Resolution::Null);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_scene(7, &cfg, Split::Train).unwrap();
        let b = generate_scene(7, &cfg, Split::Train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsatisfiable_request_fails_after_retries() {
        let cfg = GenConfig {
            max_objects: 1,
            max_retries: 5,
            ..GenConfig::default()
        };
        // A temporal expression needs two sounding objects.
        let err = generate_scene_with(3, &cfg, Split::Train, TemplateKind::Temporal).unwrap_err();
        assert!(matches!(err, SlvError::Generation { attempts: 5, .. }));
    }
}
