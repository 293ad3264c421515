//! Synthetic paired editing data: a moving shape over a drifting textured
//! background, rendered with exact ground-truth edit masks.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MiveError, Result};
use crate::io::video::{read_image, read_mask, read_video, write_frame_png, write_mask, write_video, DEFAULT_FPS};
use crate::tensor::Video;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    Delete,
    Add,
    BackgroundSwap,
    Recolor,
}

impl EditType {
    pub const ALL: [EditType; 4] = [EditType::Delete, EditType::Add, EditType::BackgroundSwap, EditType::Recolor];

    pub fn name(self) -> &'static str {
        match self {
            EditType::Delete => "delete",
            EditType::Add => "add",
            EditType::BackgroundSwap => "background_swap",
            EditType::Recolor => "recolor",
        }
    }
}

impl std::str::FromStr for EditType {
    type Err = MiveError;

    fn from_str(s: &str) -> Result<Self> {
        EditType::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| MiveError::invalid(format!("unknown edit type `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
        }
    }
}

/// Saturated palette: every channel is 0, 0.8 or 1, so a foreground pixel
/// never coincides with a background pixel (channels in `[0.25, 0.75]`).
pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 204, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("white", [255, 255, 255]),
    ("black", [0, 0, 0]),
];

/// Rendering sizes for generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 9,
            height: 32,
            width: 32,
        }
    }
}

/// Parameters that fully determine a rendered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: String,
    pub seed: u64,
    pub edit_type: EditType,
    pub instruction: String,
    pub shape: Shape,
    pub color: String,
    /// Foreground colour after a recolor edit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_color: Option<String>,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub meta: SampleMeta,
    pub src_video: Video,
    pub tgt_video: Video,
    pub ref_image: Video,
    pub gt_mask: Array3<bool>,
}

impl EditSample {
    pub fn edit_type(&self) -> EditType {
        self.meta.edit_type
    }

    pub fn instruction(&self) -> &str {
        &self.meta.instruction
    }
}

fn q(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Low-frequency drifting texture, quantized to 8 bits, channels in `[0.25, 0.75]`.
#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    waves: Vec<([f64; 3], f64, f64, f64)>,
    drift: (f64, f64),
}

impl Texture {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let base = [0.0; 3].map(|_: f64| rng.random_range(0.4..0.6));
        let waves = (0..3)
            .map(|_| {
                let amp = [0.0; 3].map(|_: f64| rng.random_range(-0.05..0.05));
                (
                    amp,
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.1..0.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let drift = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Self { base, waves, drift }
    }

    fn at(&self, f: usize, c: usize, y: usize, x: usize) -> f64 {
        let (xs, ys) = (x as f64 + self.drift.0 * f as f64, y as f64 + self.drift.1 * f as f64);
        let mut v = self.base[c];
        for (amp, kx, ky, phase) in &self.waves {
            v += amp[c] * (kx * xs + ky * ys + phase).sin();
        }
        q(v.clamp(0.25, 0.75))
    }
}

#[derive(Debug, Clone, Copy)]
struct Track {
    start: (f64, f64),
    velocity: (f64, f64),
    wobble: f64,
    freq: f64,
    radius: f64,
}

impl Track {
    fn center(&self, f: usize) -> (f64, f64) {
        let t = f as f64;
        (
            self.start.0 + self.velocity.0 * t + self.wobble * (self.freq * t).sin(),
            self.start.1 + self.velocity.1 * t,
        )
    }

    fn covers(&self, shape: Shape, f: usize, y: usize, x: usize) -> bool {
        let (cx, cy) = self.center(f);
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        match shape {
            Shape::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            Shape::Square => dx.abs() <= self.radius && dy.abs() <= self.radius,
        }
    }
}

fn color_value(name: &str) -> [f64; 3] {
    let rgb = COLORS.iter().find(|(n, _)| *n == name).expect("palette colour").1;
    rgb.map(|v| v as f64 / 255.0)
}

fn render(
    cfg: GenConfig,
    bg: &Texture,
    fg: Option<(&Track, Shape, [f64; 3])>,
) -> (Video, Array3<bool>) {
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut mask = Array3::from_elem((t, h, w), false);
    if let Some((track, shape, _)) = fg {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    mask[[f, y, x]] = track.covers(shape, f, y, x);
                }
            }
        }
    }
    let data = Array4::from_shape_fn((t, 3, h, w), |(f, c, y, x)| match fg {
        Some((_, _, color)) if mask[[f, y, x]] => color[c],
        _ => bg.at(f, c, y, x),
    });
    (Video::new(data).expect("three channels"), mask)
}

/// Renders a sample of the given type. Identical seeds give identical samples.
pub fn generate_sample(edit_type: EditType, seed: u64, cfg: GenConfig) -> Result<EditSample> {
    crate::codec::check_video_dims(cfg.frames, cfg.height, cfg.width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = if rng.random_bool(0.5) { Shape::Circle } else { Shape::Square };
    let ci = rng.random_range(0..COLORS.len());
    let color = COLORS[ci].0.to_string();
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let radius = rng.random_range(0.12..0.2) * h.min(w);
    let speed = rng.random_range(0.5..2.5);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let track = Track {
        start: (
            rng.random_range(radius..w - radius),
            rng.random_range(radius..h - radius),
        ),
        velocity: (speed * angle.cos(), speed * angle.sin()),
        wobble: rng.random_range(0.0..2.0),
        freq: rng.random_range(0.3..1.2),
        radius,
    };
    let bg_a = Texture::sample(&mut rng);
    let bg_b = Texture::sample(&mut rng);
    let fg = color_value(&color);

    let (plain, _) = render(cfg, &bg_a, None);
    let (composite, shape_mask) = render(cfg, &bg_a, Some((&track, shape, fg)));
    let mut new_color = None;
    let (src, tgt, instruction) = match edit_type {
        EditType::Delete => (
            composite,
            plain,
            format!("remove the {color} {}", shape.name()),
        ),
        EditType::Add => (
            plain,
            composite,
            format!("add a {color} {}", shape.name()),
        ),
        EditType::BackgroundSwap => {
            let (mut swapped, _) = render(cfg, &bg_b, Some((&track, shape, fg)));
            // Keep every background pixel distinct from the original.
            let a = composite.data();
            for ((f, c, y, x), v) in swapped.data_mut().indexed_iter_mut() {
                if !shape_mask[[f, y, x]] && *v == a[[f, c, y, x]] && c == 0 {
                    *v = q(if *v < 0.5 { *v + 1.0 / 255.0 } else { *v - 1.0 / 255.0 });
                }
            }
            (
                composite,
                swapped,
                format!("replace the background behind the {color} {}", shape.name()),
            )
        }
        EditType::Recolor => {
            let nj = (ci + 1 + rng.random_range(0..COLORS.len() - 1)) % COLORS.len();
            let target = COLORS[nj].0.to_string();
            let (recolored, _) = render(cfg, &bg_a, Some((&track, shape, color_value(&target))));
            let text = format!("recolor the {} {target}", shape.name());
            new_color = Some(target);
            (composite, recolored, text)
        }
    };
    let gt_mask = match edit_type {
        EditType::Delete | EditType::Add | EditType::Recolor => shape_mask,
        EditType::BackgroundSwap => shape_mask.mapv(|s| !s),
    };
    let ref_image = tgt.frame(0);
    Ok(EditSample {
        meta: SampleMeta {
            id: format!("{}_{seed:06}", edit_type.name()),
            seed,
            edit_type,
            instruction,
            shape,
            color,
            new_color,
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
        },
        src_video: src,
        tgt_video: tgt,
        ref_image,
        gt_mask,
    })
}

/// `count` samples cycling through `types`; sample `i` uses seed `seed + i`.
pub fn generate_corpus(types: &[EditType], count: usize, seed: u64, cfg: GenConfig) -> Result<Vec<EditSample>> {
    if types.is_empty() {
        return Err(MiveError::invalid("no edit types requested"));
    }
    (0..count)
        .map(|i| generate_sample(types[i % types.len()], seed + i as u64, cfg))
        .collect()
}

pub fn write_sample(dir: impl AsRef<Path>, sample: &EditSample) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    write_video(dir.join("src"), &sample.src_video, DEFAULT_FPS)?;
    write_video(dir.join("tgt"), &sample.tgt_video, DEFAULT_FPS)?;
    write_frame_png(dir.join("ref.png"), &sample.ref_image, 0)?;
    write_mask(dir.join("mask"), &sample.gt_mask)?;
    let path = dir.join("sample.json");
    fs::write(&path, serde_json::to_vec_pretty(&sample.meta)?).map_err(|e| MiveError::io(&path, e))
}

pub fn read_sample(dir: impl AsRef<Path>) -> Result<EditSample> {
    let dir = dir.as_ref();
    let path = dir.join("sample.json");
    let bytes = fs::read(&path).map_err(|e| MiveError::io(&path, e))?;
    let meta: SampleMeta = serde_json::from_slice(&bytes)?;
    let sample = EditSample {
        meta,
        src_video: read_video(dir.join("src"))?,
        tgt_video: read_video(dir.join("tgt"))?,
        ref_image: read_image(dir.join("ref.png"))?,
        gt_mask: read_mask(dir.join("mask"))?,
    };
    sample.src_video.check_same_shape(&sample.tgt_video)?;
    Ok(sample)
}

/// `root/<split>`.
pub fn split_dir(root: impl AsRef<Path>, split: &str) -> PathBuf {
    root.as_ref().join(split)
}

pub fn write_dataset(root: impl AsRef<Path>, split: &str, samples: &[EditSample]) -> Result<()> {
    let dir = split_dir(root, split);
    for s in samples {
        write_sample(dir.join(&s.meta.id), s)?;
    }
    Ok(())
}

/// Reads every sample directory of a split in name order.
pub fn read_dataset(split: impl AsRef<Path>) -> Result<Vec<EditSample>> {
    let dir = split.as_ref();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| MiveError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("sample.json").exists())
        .collect();
    entries.sort();
    entries.iter().map(read_sample).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Retain,
    RejectMinor,
    RejectHard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub score: f64,
    pub verdict: Verdict,
    pub reason: String,
}

pub const HARD_REJECT_BELOW: f64 = 5.0;
pub const RETAIN_FROM: f64 = 8.5;

/// Three-stage thresholding of a 0-10 quality score.
pub fn filter_decision(score: f64) -> Result<FilterDecision> {
    if !(0.0..=10.0).contains(&score) {
        return Err(MiveError::invalid(format!("score {score} outside [0, 10]")));
    }
    let (verdict, reason) = if score < HARD_REJECT_BELOW {
        (Verdict::RejectHard, "below 5.0: hard rejection")
    } else if score < RETAIN_FROM {
        (Verdict::RejectMinor, "5.0 to 8.4: minor flaws")
    } else {
        (Verdict::Retain, "8.5 or above: retained")
    };
    Ok(FilterDecision {
        score,
        verdict,
        reason: reason.to_string(),
    })
}

/// Keeps the first `cap` samples of each edit type, preserving order.
pub fn cap_per_category(samples: Vec<EditSample>, cap: usize) -> Vec<EditSample> {
    let mut counts = std::collections::HashMap::new();
    samples
        .into_iter()
        .filter(|s| {
            let n = counts.entry(s.edit_type()).or_insert(0usize);
            *n += 1;
            *n <= cap
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(s: &EditSample) {
        assert_eq!(s.gt_mask, s.src_video.diff_mask(&s.tgt_video).unwrap(), "{}", s.meta.id);
        assert_eq!(s.ref_image, s.tgt_video.frame(0));
        assert_eq!(s.src_video.dims(), s.tgt_video.dims());
        assert!(s.gt_mask.iter().any(|&m| m));
    }

    #[test]
    fn masks_and_references_are_exact() {
        for seed in 0..12 {
            for ty in EditType::ALL {
                check_invariants(&generate_sample(ty, seed, GenConfig::default()).unwrap());
            }
        }
    }

    #[test]
    fn delete_target_is_pure_background() {
        let s = generate_sample(EditType::Delete, 4, GenConfig::default()).unwrap();
        let color = color_value(&s.meta.color);
        let t = s.tgt_video.data();
        for ((f, y, x), &m) in s.gt_mask.indexed_iter() {
            if m {
                let px = [t[[f, 0, y, x]], t[[f, 1, y, x]], t[[f, 2, y, x]]];
                assert_ne!(px, color);
                assert!(px.iter().all(|v| (0.25..=0.75).contains(v)));
            }
        }
    }

    #[test]
    fn recolor_changes_only_masked_pixels() {
        let s = generate_sample(EditType::Recolor, 7, GenConfig::default()).unwrap();
        let (a, b) = (s.src_video.data(), s.tgt_video.data());
        for ((f, c, y, x), v) in a.indexed_iter() {
            if !s.gt_mask[[f, y, x]] {
                assert_eq!(*v, b[[f, c, y, x]]);
            }
        }
        assert_ne!(s.meta.new_color.as_deref(), Some(s.meta.color.as_str()));
        assert!(s.instruction().starts_with("recolor the "));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(EditType::BackgroundSwap, 99, GenConfig::default()).unwrap();
        let b = generate_sample(EditType::BackgroundSwap, 99, GenConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(EditType::BackgroundSwap, 100, GenConfig::default()).unwrap();
        assert_ne!(a.src_video, c.src_video);
    }

    #[test]
    fn instructions_use_known_words() {
        let vocab = crate::encoder::Vocab::builtin();
        for ty in EditType::ALL {
            let s = generate_sample(ty, 3, GenConfig::default()).unwrap();
            let ids = vocab.tokenize(s.instruction());
            assert!(ids.0.iter().all(|&i| i != crate::encoder::UNK_ID), "{}", s.instruction());
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_corpus(&EditType::ALL, 4, 10, GenConfig::default()).unwrap();
        write_dataset(dir.path(), "train", &samples).unwrap();
        let back = read_dataset(split_dir(dir.path(), "train")).unwrap();
        let mut expected = samples.clone();
        expected.sort_by(|a, b| a.meta.id.cmp(&b.meta.id));
        assert_eq!(back, expected);
    }

    #[test]
    fn filter_boundaries() {
        let v = |s: f64| filter_decision(s).unwrap().verdict;
        assert_eq!(v(4.9), Verdict::RejectHard);
        assert_eq!(v(5.0), Verdict::RejectMinor);
        assert_eq!(v(8.4), Verdict::RejectMinor);
        assert_eq!(v(8.5), Verdict::Retain);
        assert_eq!(v(0.0), Verdict::RejectHard);
        assert_eq!(v(10.0), Verdict::Retain);
        assert!(filter_decision(10.1).is_err());
        assert!(filter_decision(f64::NAN).is_err());
    }

    #[test]
    fn capping_is_stable_per_category() {
        let cfg = GenConfig::default();
        let recolor: Vec<_> = (0..10).map(|i| generate_sample(EditType::Recolor, i, cfg).unwrap()).collect();
        let kept = cap_per_category(recolor.clone(), 4);
        assert_eq!(kept, recolor[..4].to_vec());
        assert!(cap_per_category(recolor, 0).is_empty());

        let mut mixed = Vec::new();
        for (ty, n) in [(EditType::Delete, 3), (EditType::Add, 7), (EditType::Recolor, 5)] {
            for i in 0..n {
                mixed.push(generate_sample(ty, 100 + i, cfg).unwrap());
            }
        }
        let kept = cap_per_category(mixed, 5);
        let count = |ty| kept.iter().filter(|s| s.edit_type() == ty).count();
        assert_eq!((count(EditType::Delete), count(EditType::Add), count(EditType::Recolor)), (3, 5, 5));
    }
}
