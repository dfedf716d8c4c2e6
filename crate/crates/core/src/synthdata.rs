//! Procedural labeled videos: colored shapes moving over two textured background bands.
//!
//! Object classes are `"<color> <shape>"` composites, so names of held-out composites
//! share words with seen ones. Vocabulary order is backgrounds, seen composites, then
//! held-out composites; the split marks the held-out ones unseen.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clipio::{frame_path, mask_path, save_mask, ClassVocabulary, Frame, Manifest, Normalization, VideoEntry, DEFAULT_IGNORE};
use crate::config::parse_document;
use crate::error::{io_err, Error, Result};
use crate::train::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnseenObjects {
    /// Objects are drawn from every composite.
    Any,
    /// Held-out composites never appear.
    None,
    /// Every video contains at least one held-out composite.
    Force,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub shapes: Vec<String>,
    pub colors: Vec<String>,
    pub backgrounds: Vec<String>,
    /// Composite names (`"<color> <shape>"`) marked unseen.
    pub held_out: Vec<String>,
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Largest centroid displacement between consecutive frames, in pixels.
    pub max_speed: f64,
    /// Uniform per-frame perturbation of the velocity, in pixels.
    pub jitter: f64,
    pub unseen_objects: UnseenObjects,
    /// Width of an ignore-labeled ring at the frame border.
    pub ignore_border: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        GeneratorSpec {
            shapes: s(&["circle", "square", "triangle", "cross"]),
            colors: s(&["red", "blue", "yellow", "purple"]),
            backgrounds: s(&["sky", "grass", "sand", "water"]),
            held_out: s(&["red circle", "purple triangle"]),
            videos: 40,
            frames: 24,
            height: 64,
            width: 64,
            seed: 0,
            min_objects: 1,
            max_objects: 3,
            min_radius: 6.0,
            max_radius: 11.0,
            max_speed: 3.0,
            jitter: 0.5,
            unseen_objects: UnseenObjects::Any,
            ignore_border: 0,
        }
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "shapes",
    "colors",
    "backgrounds",
    "held_out",
    "videos",
    "frames",
    "height",
    "width",
    "seed",
    "min_objects",
    "max_objects",
    "min_radius",
    "max_radius",
    "max_speed",
    "jitter",
    "unseen_objects",
    "ignore_border",
];

fn value_err(key: &str, value: &str, reason: impl ToString) -> Error {
    Error::ConfigValue { key: key.into(), value: value.into(), reason: reason.to_string() }
}

fn names(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl GeneratorSpec {
    /// Reads a `key = value` (or flat JSON) document over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = GeneratorSpec::default();
        for (k, v) in parse_document(text)? {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn n<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e| value_err(key, value, e))
        }
        match key {
            "shapes" => self.shapes = names(value),
            "colors" => self.colors = names(value),
            "backgrounds" => self.backgrounds = names(value),
            "held_out" => self.held_out = names(value),
            "videos" => self.videos = n(key, value)?,
            "frames" => self.frames = n(key, value)?,
            "height" => self.height = n(key, value)?,
            "width" => self.width = n(key, value)?,
            "seed" => self.seed = n(key, value)?,
            "min_objects" => self.min_objects = n(key, value)?,
            "max_objects" => self.max_objects = n(key, value)?,
            "min_radius" => self.min_radius = n(key, value)?,
            "max_radius" => self.max_radius = n(key, value)?,
            "max_speed" => self.max_speed = n(key, value)?,
            "jitter" => self.jitter = n(key, value)?,
            "unseen_objects" => {
                self.unseen_objects = match value.trim() {
                    "any" => UnseenObjects::Any,
                    "none" => UnseenObjects::None,
                    "force" => UnseenObjects::Force,
                    _ => return Err(value_err(key, value, "expected any, none or force")),
                }
            }
            "ignore_border" => self.ignore_border = n(key, value)?,
            _ => {
                return Err(Error::UnknownConfigKey {
                    key: key.into(),
                    valid: SPEC_KEYS.iter().map(|s| s.to_string()).collect(),
                })
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> String {
        let u = match self.unseen_objects {
            UnseenObjects::Any => "any",
            UnseenObjects::None => "none",
            UnseenObjects::Force => "force",
        };
        let pairs: BTreeMap<&str, String> = [
            ("shapes", self.shapes.join(",")),
            ("colors", self.colors.join(",")),
            ("backgrounds", self.backgrounds.join(",")),
            ("held_out", self.held_out.join(",")),
            ("videos", self.videos.to_string()),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("seed", self.seed.to_string()),
            ("min_objects", self.min_objects.to_string()),
            ("max_objects", self.max_objects.to_string()),
            ("min_radius", self.min_radius.to_string()),
            ("max_radius", self.max_radius.to_string()),
            ("max_speed", self.max_speed.to_string()),
            ("jitter", self.jitter.to_string()),
            ("unseen_objects", u.to_string()),
            ("ignore_border", self.ignore_border.to_string()),
        ]
        .into_iter()
        .collect();
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("generator spec: {m}")));
        if self.shapes.is_empty() || self.colors.is_empty() || self.backgrounds.len() < 2 {
            return bad("need at least one shape, one color and two backgrounds".into());
        }
        for s in &self.shapes {
            if Shape::parse(s).is_none() {
                return bad(format!("unknown shape {s:?}"));
            }
        }
        for c in &self.colors {
            if color_rgb(c).is_none() {
                return bad(format!("unknown color {c:?}"));
            }
        }
        for b in &self.backgrounds {
            if background_rgb(b).is_none() {
                return bad(format!("unknown background {b:?}"));
            }
        }
        let composites = self.composites();
        for h in &self.held_out {
            if !composites.contains(h) {
                return bad(format!("held-out class {h:?} is not a shape/color composite"));
            }
        }
        if self.held_out.len() >= composites.len() {
            return bad("every composite is held out".into());
        }
        if self.unseen_objects == UnseenObjects::Force && self.held_out.is_empty() {
            return bad("unseen_objects = force needs held-out classes".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects".into());
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("empty video".into());
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad("need 0 < min_radius <= max_radius".into());
        }
        if 2.0 * self.max_radius >= self.height.min(self.width) as f64 {
            return bad("objects do not fit the frame".into());
        }
        if self.max_speed <= 0.0 || self.jitter < 0.0 {
            return bad("need max_speed > 0 and jitter >= 0".into());
        }
        if self.backgrounds.len() + composites.len() >= DEFAULT_IGNORE as usize {
            return bad("too many classes for 8-bit labels".into());
        }
        Ok(())
    }

    /// Every `"<color> <shape>"` name, colors outermost.
    pub fn composites(&self) -> Vec<String> {
        self.colors.iter().flat_map(|c| self.shapes.iter().map(move |s| format!("{c} {s}"))).collect()
    }

    /// Backgrounds, seen composites, held-out composites.
    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        let comps = self.composites();
        let mut names = self.backgrounds.clone();
        names.extend(comps.iter().filter(|c| !self.held_out.contains(c)).cloned());
        let n_seen = names.len();
        names.extend(comps.iter().filter(|c| self.held_out.contains(c)).cloned());
        let n = names.len();
        ClassVocabulary::new(names, (0..n_seen).collect(), (n_seen..n).collect(), DEFAULT_IGNORE)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(Shape::Circle),
            "square" => Some(Shape::Square),
            "triangle" => Some(Shape::Triangle),
            "cross" => Some(Shape::Cross),
            _ => None,
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // apex up, base at dy = 0.8 r
                let t = (dy + r) / (1.8 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }
}

pub fn color_rgb(name: &str) -> Option<[f32; 3]> {
    Some(match name {
        "red" => [0.9, 0.12, 0.12],
        "blue" => [0.1, 0.2, 0.95],
        "yellow" => [0.95, 0.9, 0.1],
        "purple" => [0.55, 0.1, 0.7],
        "green" => [0.1, 0.8, 0.2],
        "orange" => [1.0, 0.55, 0.05],
        "white" => [0.97, 0.97, 0.97],
        "black" => [0.05, 0.05, 0.05],
        _ => return None,
    })
}

pub fn background_rgb(name: &str) -> Option<[f32; 3]> {
    Some(match name {
        "sky" => [0.55, 0.75, 0.95],
        "grass" => [0.3, 0.55, 0.2],
        "sand" => [0.85, 0.75, 0.5],
        "water" => [0.1, 0.35, 0.45],
        "snow" => [0.9, 0.92, 0.95],
        "rock" => [0.45, 0.42, 0.4],
        _ => return None,
    })
}

#[derive(Clone, Debug)]
struct Object {
    class: u8,
    shape: Shape,
    rgb: [f32; 3],
    r: f64,
    pos: (f64, f64),
    vel: (f64, f64),
}

/// One generated video: frames, masks and per-frame object centres.
#[derive(Clone, Debug)]
pub struct SynthVideo {
    pub frames: Vec<Frame>,
    pub masks: Vec<Vec<u8>>,
    /// `centres[t][k]` is object `k`'s centre `(y, x)` in frame `t`.
    pub centres: Vec<Vec<(f64, f64)>>,
    pub classes: Vec<u8>,
}

fn clamp_speed(v: (f64, f64), max: f64) -> (f64, f64) {
    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
    if n > max {
        (v.0 * max / n, v.1 * max / n)
    } else {
        v
    }
}

/// Draws one video from `seed`.
pub fn generate_video(spec: &GeneratorSpec, vocab: &ClassVocabulary, seed: u64) -> SynthVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let index = |name: &str| vocab.names().iter().position(|n| n == name).expect("class in vocabulary") as u8;

    let nb = spec.backgrounds.len();
    let top = rng.gen_range(0..nb);
    let bottom = (top + rng.gen_range(1..nb)) % nb;
    let horizon = rng.gen_range(0.35..0.65) * h as f64;
    let wave_amp = rng.gen_range(0.0..3.0);
    let wave_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let band = [
        (index(&spec.backgrounds[top]), background_rgb(&spec.backgrounds[top]).expect("validated")),
        (index(&spec.backgrounds[bottom]), background_rgb(&spec.backgrounds[bottom]).expect("validated")),
    ];
    let grain: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-0.04..0.04)).collect();

    let seen: Vec<String> = spec.composites().into_iter().filter(|c| !spec.held_out.contains(c)).collect();
    let all = spec.composites();
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let forced = if spec.unseen_objects == UnseenObjects::Force { rng.gen_range(0..count) } else { usize::MAX };
    let mut objects = Vec::with_capacity(count);
    for k in 0..count {
        let name = if k == forced {
            spec.held_out[rng.gen_range(0..spec.held_out.len())].clone()
        } else if spec.unseen_objects == UnseenObjects::None {
            seen[rng.gen_range(0..seen.len())].clone()
        } else {
            all[rng.gen_range(0..all.len())].clone()
        };
        let (color, shape) = name.split_once(' ').expect("composite name");
        let r = rng.gen_range(spec.min_radius..=spec.max_radius);
        let pos = (rng.gen_range(r..h as f64 - r), rng.gen_range(r..w as f64 - r));
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.3 * spec.max_speed..=spec.max_speed);
        objects.push(Object {
            class: index(&name),
            shape: Shape::parse(shape).expect("validated"),
            rgb: color_rgb(color).expect("validated"),
            r,
            pos,
            vel: (speed * angle.sin(), speed * angle.cos()),
        });
    }

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    let mut centres = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for o in &mut objects {
                let j = (rng.gen_range(-spec.jitter..=spec.jitter), rng.gen_range(-spec.jitter..=spec.jitter));
                let mut step = clamp_speed((o.vel.0 + j.0, o.vel.1 + j.1), spec.max_speed);
                let mut next = (o.pos.0 + step.0, o.pos.1 + step.1);
                // bounce off the walls, keeping the whole object in frame
                if next.0 < o.r || next.0 > h as f64 - o.r {
                    step.0 = -step.0;
                    o.vel.0 = -o.vel.0;
                }
                if next.1 < o.r || next.1 > w as f64 - o.r {
                    step.1 = -step.1;
                    o.vel.1 = -o.vel.1;
                }
                next = (
                    (o.pos.0 + step.0).clamp(o.r, h as f64 - o.r),
                    (o.pos.1 + step.1).clamp(o.r, w as f64 - o.r),
                );
                o.pos = next;
            }
        }
        centres.push(objects.iter().map(|o| o.pos).collect());
        let shimmer = 0.03 * ((t as f64) * 0.7).sin() as f32;
        let mut data = vec![0f32; h * w * 3];
        let mut mask = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
                let edge = horizon + wave_amp * (cx * 0.2 + wave_phase).sin();
                let b = usize::from(cy >= edge);
                let stripe = 0.05 * ((cy * 0.9 + b as f64 * 2.0).sin() * (cx * 0.35).cos()) as f32;
                let (mut class, base) = band[b];
                let mut rgb = base.map(|c| c + grain[p] + stripe + shimmer);
                for o in &objects {
                    if o.shape.contains(cx - o.pos.1, cy - o.pos.0, o.r) {
                        class = o.class;
                        rgb = o.rgb.map(|c| c + 0.5 * grain[p]);
                    }
                }
                let k = spec.ignore_border;
                if y < k || x < k || y + k >= h || x + k >= w {
                    class = DEFAULT_IGNORE;
                }
                mask[p] = class;
                for c in 0..3 {
                    data[p * 3 + c] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        frames.push(Frame::new(h, w, data));
        masks.push(mask);
    }
    SynthVideo { frames, masks, centres, classes: objects.iter().map(|o| o.class).collect() }
}

fn ensure_empty(out_root: &Path) -> Result<()> {
    if out_root.exists() {
        let mut entries = fs::read_dir(out_root).map_err(io_err(out_root))?;
        if entries.next().is_some() {
            return Err(Error::OutputExists(out_root.to_path_buf()));
        }
    }
    fs::create_dir_all(out_root).map_err(io_err(out_root))
}

/// Per-channel mean and standard deviation over every frame.
fn frame_statistics(videos: &[SynthVideo]) -> Normalization {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for f in videos.iter().flat_map(|v| &v.frames) {
        for px in f.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += px[c] as f64;
                sq[c] += (px[c] as f64).powi(2);
            }
            n += 1.0;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-6).sqrt();
    }
    Normalization { mean, std }
}

/// Writes a dataset in the on-disk layout of [`crate::clipio`].
pub fn generate(spec: &GeneratorSpec, out_root: &Path) -> Result<ClassVocabulary> {
    spec.validate()?;
    ensure_empty(out_root)?;
    let vocab = spec.vocabulary()?;
    let videos: Vec<SynthVideo> =
        (0..spec.videos).into_par_iter().map(|i| generate_video(spec, &vocab, derive_seed(spec.seed, i as u64))).collect();
    let entries: Vec<VideoEntry> =
        (0..spec.videos).map(|i| VideoEntry { id: format!("video_{i:04}"), frames: spec.frames }).collect();
    entries.par_iter().zip(&videos).try_for_each(|(e, v)| -> Result<()> {
        for sub in ["frames", "masks"] {
            let d = out_root.join(&e.id).join(sub);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        for (t, (f, m)) in v.frames.iter().zip(&v.masks).enumerate() {
            f.save(&frame_path(out_root, &e.id, t))?;
            save_mask(&mask_path(out_root, &e.id, t), spec.height, spec.width, m)?;
        }
        Ok(())
    })?;
    vocab.write(out_root)?;
    Manifest { frame_size: [spec.height, spec.width], normalization: frame_statistics(&videos), videos: entries }
        .write(out_root)?;
    let spec_path = out_root.join("generator.txt");
    fs::write(&spec_path, spec.to_document()).map_err(io_err(&spec_path))?;
    Ok(vocab)
}

/// The fixed 20-class benchmark: `train` (40 videos, any objects) and `val` (10 videos,
/// each with a held-out composite) under `out_root`.
pub fn make_default_benchmark(out_root: &Path, seed: u64) -> Result<PathBuf> {
    ensure_empty(out_root)?;
    let train = GeneratorSpec { seed, ..GeneratorSpec::default() };
    let val = GeneratorSpec {
        seed: derive_seed(seed, 0x7661_6c),
        videos: 10,
        unseen_objects: UnseenObjects::Force,
        ..GeneratorSpec::default()
    };
    generate(&train, &out_root.join("train"))?;
    generate(&val, &out_root.join("val"))?;
    Ok(out_root.to_path_buf())
}
